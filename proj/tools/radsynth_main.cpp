// Command-line front end. Every subcommand resolves one RunConfig (file plus
// overrides), validates it before touching the filesystem, writes a config
// echo into its output directory, and maps error families to exit codes:
// 0 success, 2 config error, 3 numerical failure, 4 I/O error.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "radsynth/config.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace radsynth;

namespace {

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> sets;
    std::string seed_text;
    std::string checkpoint;
    std::string out;
};

config::RunConfig resolve(const CommonArgs& a) {
    config::RunConfig c;
    if (!a.config_path.empty()) c = config::load_file(a.config_path);
    for (const auto& kv : a.sets) config::apply_override(c, kv);
    if (!a.seed_text.empty()) {
        std::uint64_t v = 0;
        size_t used = 0;
        try {
            v = std::stoull(a.seed_text, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != a.seed_text.size() || a.seed_text[0] == '-')
            throw ConfigError("--seed wants a non-negative integer, got '" + a.seed_text + "'");
        c.seed = v;
    }
    if (!a.checkpoint.empty()) c.checkpoint = a.checkpoint;
    if (!a.out.empty()) c.out_dir = a.out;
    return c;
}

void need(const std::string& value, const char* what) {
    if (value.empty()) throw ConfigError(std::string(what) + " is required");
}

data::Dataset open_dataset(const config::RunConfig& c) {
    need(c.data_dir, "data.dir");
    auto manifest = data::load_manifest((fs::path(c.data_dir) / "manifest.jsonl").string());
    auto vocab = data::Vocabulary::load((fs::path(c.data_dir) / "vocab.txt").string());
    return data::Dataset(std::move(manifest), std::move(vocab));
}

void check_dataset_dims(const config::RunConfig& c, const data::Dataset& ds) {
    const int s = ds.image_plane(0).dim(0);
    if (s != c.image_size)
        throw ConfigError("models.image_size=" + std::to_string(c.image_size) +
                          " but the dataset images are " + std::to_string(s) + "px");
    if (ds.class_count() != c.class_count)
        throw ConfigError("models.class_count=" + std::to_string(c.class_count) +
                          " but the dataset has " + std::to_string(ds.class_count()) + " classes");
}

data::Batch load_rows(const data::Dataset& ds, int first, int count) {
    std::vector<int> rows((size_t)count);
    for (int i = 0; i < count; ++i) rows[(size_t)i] = first + i;
    return ds.load_batch(rows);
}

// Feature snapshot without the trained-extractor gate; the caller vouches for
// the encoder (e.g. the report model inside a GAN checkpoint).
Tensor frozen_features(ToyClassifier& enc, const Tensor& images, int chunk = 64) {
    const int n = images.dim(0), s = images.dim(2);
    Tensor out({n, enc.cfg.feat_dim});
    const long long plane = 3LL * s * s;
    ad::NoGradGuard ng;
    for (int i0 = 0; i0 < n; i0 += chunk) {
        const int nb = std::min(chunk, n - i0);
        Tensor xb({nb, 3, s, s});
        std::memcpy(xb.data(), images.data() + (long long)i0 * plane,
                    sizeof(double) * (size_t)(nb * plane));
        Tensor f = enc.features(ad::leaf(xb)).val();
        std::memcpy(out.data() + (long long)i0 * enc.cfg.feat_dim, f.data(),
                    sizeof(double) * (size_t)(nb * enc.cfg.feat_dim));
    }
    return out;
}

std::vector<data::Report> caption_with(train::ModelBundle& models, const Tensor& images) {
    return models.decoder.decode(frozen_features(models.encoder, images));
}

Tensor synth_with_labels(Generator& g, const std::vector<int>& labels, std::uint64_t seed,
                         int batch) {
    const int n = (int)labels.size(), k = g.cfg.class_count, s = g.cfg.image_size;
    Tensor images({n, 3, s, s});
    const long long plane = 3LL * s * s;
    Rng rng(seed);
    for (int i0 = 0; i0 < n; i0 += batch) {
        const int nb = std::min(batch, n - i0);
        Tensor z({nb, g.cfg.noise_dim});
        rng.fill_normal(z);
        Tensor y({nb, k});
        for (int i = 0; i < nb; ++i) y.at({i, labels[(size_t)(i0 + i)]}) = 1.0;
        Tensor imgs = g.generate(z, y);
        std::memcpy(images.data() + (long long)i0 * plane, imgs.data(),
                    sizeof(double) * (size_t)(nb * plane));
    }
    return images;
}

// Channel-mean of one [-1,1] sample -> one [0,1] grayscale plane.
Tensor to_plane(const Tensor& images, int row) {
    const int s = images.dim(2);
    Tensor p({s, s});
    const long long plane = (long long)s * s;
    const double* base = images.data() + (long long)row * 3 * plane;
    for (long long i = 0; i < plane; ++i) {
        const double v = (base[i] + base[plane + i] + base[2 * plane + i]) / 3.0;
        p[i] = std::clamp((v + 1.0) / 2.0, 0.0, 1.0);
    }
    return p;
}

Tensor tile_grid(const std::vector<Tensor>& planes, int cols) {
    const int n = (int)planes.size(), s = planes.at(0).dim(0);
    const int rows = (n + cols - 1) / cols;
    Tensor grid({rows * s, cols * s});
    for (int i = 0; i < n; ++i) {
        const int r0 = (i / cols) * s, c0 = (i % cols) * s;
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x) grid.at({r0 + y, c0 + x}) = planes[(size_t)i].at({y, x});
    }
    return grid;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path.string());
    f << text << "\n";
}

void prepare_out(const config::RunConfig& c) {
    need(c.out_dir, "out.dir");
    fs::create_directories(c.out_dir);
    config::write_echo(c, c.out_dir);
}

// ---------------------------------------------------------------------------
// make-toy-data
// ---------------------------------------------------------------------------

int cmd_make_toy_data(const config::RunConfig& c) {
    need(c.out_dir, "out.dir");
    data::ToyConfig toy = c.toy;
    toy.seed = c.seed;
    if (toy.class_count < 2) throw ConfigError("data.toy.class_count must be at least 2");
    if (toy.n_samples < toy.class_count)
        throw ConfigError("data.toy.n_samples must cover every class");
    if (toy.image_size < 32 || (toy.image_size & (toy.image_size - 1)) != 0)
        throw ConfigError("data.toy.image_size must be a power of two >= 32");
    if (c.vocab_min_count < 1) throw ConfigError("data.vocab_min_count must be positive");

    prepare_out(c);
    data::DatasetManifest m = data::generate_toy_dataset(toy, c.out_dir);
    std::vector<std::string> corpus;
    corpus.reserve(m.records.size());
    for (const auto& r : m.records) corpus.push_back(r.report);
    data::Vocabulary vocab = data::build_vocabulary(corpus, c.vocab_min_count);
    vocab.save((fs::path(c.out_dir) / "vocab.txt").string());
    std::cout << "wrote " << m.records.size() << " paired samples (" << m.class_count
              << " classes, vocab " << vocab.size() << " tokens) to " << c.out_dir << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// pretrain-decoder
// ---------------------------------------------------------------------------

int cmd_pretrain_decoder(const config::RunConfig& c) {
    if (c.protocol.decoder_steps < 0) throw ConfigError("protocol.decoder_steps must be >= 0");
    if (c.protocol.batch_size < 1) throw ConfigError("protocol.batch_size must be positive");
    data::Dataset ds = open_dataset(c);
    check_dataset_dims(c, ds);

    ClassifierConfig ec = c.encoder;
    ec.image_size = c.image_size;
    ec.class_count = c.class_count;
    DecoderConfig dc = c.decoder;
    dc.feat_dim = ec.feat_dim;
    dc.vocab_size = ds.vocab().size();
    dc.validate();

    const int n = ds.size();
    data::Batch all = load_rows(ds, 0, n);

    eval::Captioner cap;
    long long step0 = 0;
    if (!c.checkpoint.empty()) {
        cap = train::load_captioner(c.checkpoint, &ec, &dc, &step0);
        if (ec.image_size != c.image_size || dc.vocab_size != ds.vocab().size())
            throw ConfigError("captioner checkpoint does not match the dataset dimensions");
    }
    prepare_out(c);
    if (c.checkpoint.empty()) {
        cap.encoder = train_classifier(all.images, all.label_ids, ec, c.seed,
                                       c.protocol.encoder_steps, c.protocol.batch_size,
                                       c.protocol.lr);
        Rng init_rng(c.seed ^ 0x9e3779b97f4a7c15ull);
        cap.decoder.init(dc, init_rng);
    }

    Tensor feats = frozen_features(cap.encoder, all.images);
    auto ps = cap.decoder.params();
    nn::Adam opt;
    opt.lr = c.protocol.decoder_lr;
    opt.beta1 = 0.9;
    opt.init(ps);

    std::ofstream log(fs::path(c.out_dir) / "metrics.jsonl", std::ios::app);
    if (!log) throw IoError("cannot write metrics log in " + c.out_dir);

    Rng rng = Rng::fork(c.seed ^ 0x9e3779b97f4a7c15ull, (std::uint64_t)step0);
    const int fd = ec.feat_dim;
    double last = 0.0;
    for (int s = 0; s < c.protocol.decoder_steps; ++s) {
        const int nb = std::min(c.protocol.batch_size, n);
        Tensor fb({nb, fd});
        std::vector<data::Report> rb((size_t)nb);
        for (int i = 0; i < nb; ++i) {
            const int pick = (int)rng.uniform_u64((std::uint64_t)n);
            std::memcpy(fb.data() + (long long)i * fd, feats.data() + (long long)pick * fd,
                        sizeof(double) * (size_t)fd);
            rb[(size_t)i] = all.reports[(size_t)pick];
        }
        opt.zero_grad(ps);
        auto loss = cap.decoder.teacher_forced_loss(ad::leaf(fb), rb);
        ad::backward(loss.total);
        opt.step(ps);
        last = loss.total.val()[0];
        if (!std::isfinite(last))
            throw NumericalError("pretraining loss is not finite at step " +
                                 std::to_string(step0 + s + 1));
        log << json{{"step", step0 + s + 1}, {"term", "pretrain_loss"}, {"value", last}}.dump()
            << "\n";
    }
    const long long total = step0 + c.protocol.decoder_steps;
    const std::string out_path = (fs::path(c.out_dir) / "captioner.ckpt").string();
    train::save_captioner(cap, ec, dc, out_path, total);
    std::cout << "pretrained decoder for " << c.protocol.decoder_steps << " steps (total " << total
              << (c.protocol.decoder_steps ? ", final loss " + std::to_string(last) : "")
              << ") -> " << out_path << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

int cmd_train(const config::RunConfig& c) {
    {
        train::TrainConfig probe = c.train;
        probe.seed = c.seed;
        probe.validate();
    }
    data::Dataset ds = open_dataset(c);
    check_dataset_dims(c, ds);

    train::TrainState st = [&] {
        if (!c.checkpoint.empty()) {
            train::TrainState s = train::load_checkpoint(c.checkpoint);
            // run-length and logging knobs follow the current invocation;
            // everything that shapes the model or the updates is pinned by
            // the checkpoint
            s.cfg.total_g_steps = c.train.total_g_steps;
            s.cfg.metrics_every = c.train.metrics_every;
            s.cfg.checkpoint_every = c.train.checkpoint_every;
            s.cfg.fid_every = c.train.fid_every;
            s.cfg.fid_probe_size = c.train.fid_probe_size;
            return s;
        }
        train::TrainConfig tc = c.train;
        tc.seed = c.seed;
        return train::make_state(config::models_config(c, ds.vocab().size()), tc);
    }();
    if (st.models_cfg.decoder.vocab_size != ds.vocab().size())
        throw ConfigError("checkpoint vocabulary size does not match the dataset");
    if (!c.f_init.empty()) train::warm_start_report_model(st, c.f_init);

    prepare_out(c);

    ToyClassifier probe_clf;
    train::TrainHooks hooks;
    if (st.cfg.fid_every > 0) {
        const int rows = std::min(c.protocol.real_train, ds.size());
        data::Batch b = load_rows(ds, 0, rows);
        ClassifierConfig ec = c.encoder;
        ec.image_size = c.image_size;
        ec.class_count = c.class_count;
        probe_clf = train_classifier(b.images, b.label_ids, ec, c.seed ^ 0xFEA7,
                                     c.protocol.classifier_steps, c.protocol.batch_size,
                                     c.protocol.lr);
        hooks.fid_extractor = &probe_clf;
    }

    train::train(st, ds, c.out_dir, hooks);
    std::cout << "trained to " << st.g_step << " generator steps / " << st.d_step
              << " critic steps -> " << (fs::path(c.out_dir) / "final.ckpt").string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

std::vector<int> labels_for_spec(const std::string& spec, int count, int class_count) {
    std::vector<int> labels((size_t)count);
    if (spec == "balanced") {
        for (int i = 0; i < count; ++i) labels[(size_t)i] = i % class_count;
        return labels;
    }
    size_t used = 0;
    int cls = -1;
    try {
        cls = std::stoi(spec, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != spec.size() || cls < 0 || cls >= class_count)
        throw ConfigError("generate.class_spec must be 'balanced' or a class id in [0," +
                          std::to_string(class_count) + "), got '" + spec + "'");
    std::fill(labels.begin(), labels.end(), cls);
    return labels;
}

int cmd_generate(const config::RunConfig& c) {
    need(c.checkpoint, "checkpoint");
    need(c.data_dir, "data.dir");
    if (c.generate_count < 1) throw ConfigError("generate.count must be positive");
    train::TrainState st = train::load_checkpoint(c.checkpoint);
    data::Vocabulary vocab =
        data::Vocabulary::load((fs::path(c.data_dir) / "vocab.txt").string());
    if (vocab.size() != st.models_cfg.decoder.vocab_size)
        throw ConfigError("vocabulary size does not match the checkpoint");
    const int k = st.models_cfg.gen.class_count;
    std::vector<int> labels = labels_for_spec(c.class_spec, c.generate_count, k);

    prepare_out(c);
    fs::create_directories(fs::path(c.out_dir) / "images");
    fs::create_directories(fs::path(c.out_dir) / "reports");

    Tensor images =
        synth_with_labels(st.models.g, labels, c.seed ^ 0x93E1A7C4ull, c.protocol.gen_batch);
    std::vector<data::Report> reports = caption_with(st.models, images);

    data::DatasetManifest m;
    m.class_count = k;
    m.base_dir = c.out_dir;
    for (int i = 0; i < c.generate_count; ++i) {
        char img_name[32], txt_name[32];
        std::snprintf(img_name, sizeof(img_name), "images/%06d.png", i);
        std::snprintf(txt_name, sizeof(txt_name), "reports/%06d.txt", i);
        write_png_gray((fs::path(c.out_dir) / img_name).string(), to_plane(images, i));
        const std::string text = data::detokenize(reports[(size_t)i], vocab);
        write_text(fs::path(c.out_dir) / txt_name, text);
        m.records.push_back({img_name, text, labels[(size_t)i]});
    }
    data::save_manifest(m, (fs::path(c.out_dir) / "manifest.jsonl").string());
    std::cout << "generated " << c.generate_count << " samples (" << c.class_spec << ") -> "
              << c.out_dir << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

int cmd_evaluate(const config::RunConfig& c) {
    need(c.checkpoint, "checkpoint");
    if (c.evaluate_fid_samples < 2) throw ConfigError("evaluate.fid_samples must be at least 2");
    if (c.evaluate_caption_samples < 1)
        throw ConfigError("evaluate.caption_samples must be positive");
    data::Dataset ds = open_dataset(c);
    check_dataset_dims(c, ds);
    const int n = ds.size();
    if (c.protocol.real_train + c.protocol.held_out > n)
        throw ConfigError("dataset too small for the requested split");
    train::TrainState st = train::load_checkpoint(c.checkpoint);
    if (st.models_cfg.decoder.vocab_size != ds.vocab().size())
        throw ConfigError("checkpoint vocabulary size does not match the dataset");

    prepare_out(c);

    // metrics extractor, trained on the head of the corpus
    data::Batch train_b = load_rows(ds, 0, c.protocol.real_train);
    ClassifierConfig ec = c.encoder;
    ec.image_size = c.image_size;
    ec.class_count = c.class_count;
    ToyClassifier clf =
        train_classifier(train_b.images, train_b.label_ids, ec, c.seed ^ 0xC1A55ull,
                         c.protocol.classifier_steps, c.protocol.batch_size, c.protocol.lr);

    // image quality: held-out real slice vs fresh synthetic draws
    data::Batch held_b = load_rows(ds, n - c.protocol.held_out, c.protocol.held_out);
    auto [synth_images, synth_labels] = eval::detail::synthesize(
        st.models.g, c.evaluate_fid_samples, train::detail::mix_seed(c.seed, 0xF1D),
        c.protocol.gen_batch);
    eval::MetricsReport r;
    r.experiment = "evaluate";
    r.seed = c.seed;
    r.extractor_id = "toy-clf/s" + std::to_string(c.seed ^ 0xC1A55ull) + "/t" +
                     std::to_string(c.protocol.classifier_steps);
    r.fid = eval::fid(eval::fit_gaussian(eval::extract_features(held_b.images, clf)),
                      eval::fit_gaussian(eval::extract_features(synth_images, clf)));

    // report quality: caption held-out real images with the checkpoint's
    // report model, score against the true reports
    const int cap_n = std::min(c.evaluate_caption_samples, c.protocol.held_out);
    Tensor cap_imgs({cap_n, 3, c.image_size, c.image_size});
    std::memcpy(cap_imgs.data(), held_b.images.data(),
                sizeof(double) * (size_t)cap_imgs.size());
    std::vector<data::Report> decoded = caption_with(st.models, cap_imgs);
    std::vector<eval::TokenSeq> cands;
    std::vector<std::vector<eval::TokenSeq>> refs;
    for (int i = 0; i < cap_n; ++i) {
        cands.push_back(eval::flatten_for_metrics(decoded[(size_t)i]));
        refs.push_back({eval::flatten_for_metrics(held_b.reports[(size_t)i])});
    }
    r.bleu1 = eval::corpus_bleu_n(cands, refs, 1);
    r.bleu2 = eval::corpus_bleu_n(cands, refs, 2);
    r.bleu3 = eval::corpus_bleu_n(cands, refs, 3);
    r.bleu4 = eval::corpus_bleu_n(cands, refs, 4);
    r.cider = eval::cider(cands, refs);

    // conditioning fidelity: does the extractor see the requested class?
    {
        ad::NoGradGuard ng;
        Tensor logits = clf.logits(ad::leaf(synth_images)).val();
        r.acc = eval::accuracy(ad::argmax_rows(logits), synth_labels);
        r.auc = eval::auc_macro(logits, synth_labels);
    }

    const std::string path = (fs::path(c.out_dir) / "metrics_report.json").string();
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path);
    f << r.to_json().dump(2) << "\n";
    std::cout << "fid " << *r.fid << ", bleu1 " << *r.bleu1 << ", cider " << *r.cider << ", acc "
              << *r.acc << " -> " << path << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// experiment
// ---------------------------------------------------------------------------

int cmd_experiment(const config::RunConfig& c) {
    need(c.checkpoint, "checkpoint");
    if (c.experiment_kind != "augmentation" && c.experiment_kind != "report-gen")
        throw ConfigError("experiment.kind must be 'augmentation' or 'report-gen'");
    if (c.experiment_mixes.empty()) throw ConfigError("experiment.mixes must not be empty");
    for (int m : c.experiment_mixes)
        if (m < 0) throw ConfigError("experiment.mixes entries must be >= 0");
    if (c.experiment_seeds.empty()) throw ConfigError("experiment.seeds must not be empty");
    data::Dataset ds = open_dataset(c);
    check_dataset_dims(c, ds);
    if (c.protocol.real_train + c.protocol.held_out > ds.size())
        throw ConfigError("dataset too small for the requested split");
    train::TrainState st = train::load_checkpoint(c.checkpoint);
    if (st.models_cfg.decoder.vocab_size != ds.vocab().size())
        throw ConfigError("checkpoint vocabulary size does not match the dataset");

    prepare_out(c);

    ClassifierConfig ec = c.encoder;
    ec.image_size = c.image_size;
    ec.class_count = c.class_count;
    std::vector<eval::MixOutcome> rows;
    std::optional<double> eval::MetricsReport::*headline = nullptr;
    if (c.experiment_kind == "augmentation") {
        rows = eval::augmentation_experiment(ds, st.models.g, c.experiment_mixes, ec,
                                             c.experiment_seeds, c.protocol);
        headline = &eval::MetricsReport::auc;
    } else {
        DecoderConfig dc = c.decoder;
        dc.feat_dim = ec.feat_dim;
        dc.vocab_size = ds.vocab().size();
        eval::Captioner gan_f{st.models.encoder, st.models.decoder};
        // the checkpoint's report model captions synthetic images as-is,
        // whatever its provenance
        gan_f.encoder.trained = true;
        rows = eval::report_generation_experiment(ds, st.models.g, gan_f, c.experiment_mixes, ec,
                                                  dc, c.experiment_seeds, c.protocol);
        headline = &eval::MetricsReport::cider;
    }

    const std::string rows_path = (fs::path(c.out_dir) / "experiments.jsonl").string();
    std::ofstream rf(rows_path);
    if (!rf) throw IoError("cannot write " + rows_path);
    json summary = json::array();
    const char* metric_name = c.experiment_kind == "augmentation" ? "auc" : "cider";
    std::cout << "mix        n  mean " << metric_name << "   sd\n";
    for (const auto& mix : rows) {
        for (const auto& run : mix.runs) rf << run.to_json().dump() << "\n";
        const double mean = eval::metric_mean(mix.runs, headline);
        const double sd = eval::metric_sd(mix.runs, headline);
        summary.push_back(json{{"experiment", mix.experiment},
                               {"synth_count", mix.synth_count},
                               {"runs", (int)mix.runs.size()},
                               {"metric", metric_name},
                               {"mean", mean},
                               {"sd", sd}});
        std::printf("%-9s %2d  %.4f   %.4f\n", mix.experiment.c_str(), (int)mix.runs.size(), mean,
                    sd);
    }
    std::ofstream sf(fs::path(c.out_dir) / "summary.json");
    if (!sf) throw IoError("cannot write summary in " + c.out_dir);
    sf << summary.dump(2) << "\n";
    std::cout << "rows -> " << rows_path << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// export-samples
// ---------------------------------------------------------------------------

int cmd_export_samples(const config::RunConfig& c) {
    need(c.checkpoint, "checkpoint");
    const int n = c.export_count;
    if (n < 1) throw ConfigError("export.count must be positive");
    data::Dataset ds = open_dataset(c);
    check_dataset_dims(c, ds);
    if (n > ds.size()) throw ConfigError("export.count exceeds the dataset size");
    train::TrainState st = train::load_checkpoint(c.checkpoint);
    if (st.models_cfg.decoder.vocab_size != ds.vocab().size())
        throw ConfigError("checkpoint vocabulary size does not match the dataset");

    prepare_out(c);
    fs::create_directories(fs::path(c.out_dir) / "samples");

    Rng pick_rng = Rng::fork(c.seed, 0xEA1);
    std::vector<int> order = pick_rng.permutation(ds.size());
    std::vector<int> real_rows(order.begin(), order.begin() + n);
    data::Batch real_b = ds.load_batch(real_rows);

    Tensor synth = synth_with_labels(st.models.g, real_b.label_ids, c.seed ^ 0x5A2Bull,
                                     c.protocol.gen_batch);
    std::vector<data::Report> synth_reports = caption_with(st.models, synth);

    struct Entry {
        const Tensor* images;
        int row;
        std::string text;
        int label;
        const char* kind;
        int source;
    };
    std::vector<Entry> entries;
    for (int i = 0; i < n; ++i)
        entries.push_back({&real_b.images, i, ds.report_text(real_rows[(size_t)i]),
                           real_b.label_ids[(size_t)i], "real", real_rows[(size_t)i]});
    for (int i = 0; i < n; ++i)
        entries.push_back({&synth, i, data::detokenize(synth_reports[(size_t)i], ds.vocab()),
                           real_b.label_ids[(size_t)i], "synthetic", i});

    Rng shuffle_rng = Rng::fork(c.seed, 0x0DD);
    std::vector<int> placement = shuffle_rng.permutation(2 * n);

    json index = json::array(), key = json::array();
    std::vector<Tensor> planes;
    for (int pos = 0; pos < 2 * n; ++pos) {
        const Entry& e = entries[(size_t)placement[(size_t)pos]];
        char img_name[32], txt_name[32];
        std::snprintf(img_name, sizeof(img_name), "samples/%03d.png", pos);
        std::snprintf(txt_name, sizeof(txt_name), "samples/%03d.txt", pos);
        Tensor plane = to_plane(*e.images, e.row);
        write_png_gray((fs::path(c.out_dir) / img_name).string(), plane);
        write_text(fs::path(c.out_dir) / txt_name, e.text);
        index.push_back(json{{"image", img_name}, {"report", txt_name}, {"label", e.label}});
        key.push_back(json{{"position", pos}, {"kind", e.kind}, {"source", e.source}});
        planes.push_back(std::move(plane));
    }
    std::ofstream fi(fs::path(c.out_dir) / "index.json");
    if (!fi) throw IoError("cannot write index in " + c.out_dir);
    fi << index.dump(2) << "\n";
    std::ofstream fk(fs::path(c.out_dir) / "key.json");
    if (!fk) throw IoError("cannot write key in " + c.out_dir);
    fk << key.dump(2) << "\n";

    // unshuffled side-by-side comparison: row i is real_i | synth_i
    std::vector<Tensor> pair_planes;
    const int pair_rows = std::min(n, 16);
    for (int i = 0; i < pair_rows; ++i) {
        pair_planes.push_back(to_plane(real_b.images, i));
        pair_planes.push_back(to_plane(synth, i));
    }
    write_png_gray((fs::path(c.out_dir) / "pairs.png").string(), tile_grid(pair_planes, 2));
    write_png_gray((fs::path(c.out_dir) / "grid.png").string(),
                         tile_grid(planes, std::min(2 * n, 8)));
    std::cout << "exported " << n << " real + " << n << " synthetic samples -> " << c.out_dir
              << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"paired image+report GAN toolkit"};
    app.require_subcommand(1);

    CommonArgs args;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", args.config_path, "JSON config file of flat dotted keys");
        sub->add_option("--set", args.sets, "config override as key=value");
        sub->add_option("--seed", args.seed_text, "run seed");
        sub->add_option("--checkpoint", args.checkpoint, "input checkpoint path");
        sub->add_option("--out", args.out, "output directory");
        return sub;
    };
    CLI::App* c_data = add_common(
        app.add_subcommand("make-toy-data", "synthesize a paired image+report toy corpus"));
    CLI::App* c_pre = add_common(
        app.add_subcommand("pretrain-decoder", "pretrain the report model on real pairs"));
    CLI::App* c_train =
        add_common(app.add_subcommand("train", "adversarial training of the full model"));
    CLI::App* c_gen = add_common(
        app.add_subcommand("generate", "sample paired images and reports from a checkpoint"));
    CLI::App* c_eval =
        add_common(app.add_subcommand("evaluate", "score a checkpoint and write a metrics report"));
    CLI::App* c_exp = add_common(
        app.add_subcommand("experiment", "run an augmentation experiment matrix"));
    CLI::App* c_export = add_common(
        app.add_subcommand("export-samples", "export a blinded bundle of real and synthetic pairs"));

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        const config::RunConfig cfg = resolve(args);
        if (c_data->parsed()) return cmd_make_toy_data(cfg);
        if (c_pre->parsed()) return cmd_pretrain_decoder(cfg);
        if (c_train->parsed()) return cmd_train(cfg);
        if (c_gen->parsed()) return cmd_generate(cfg);
        if (c_eval->parsed()) return cmd_evaluate(cfg);
        if (c_exp->parsed()) return cmd_experiment(cfg);
        if (c_export->parsed()) return cmd_export_samples(cfg);
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 4;
    }
}
