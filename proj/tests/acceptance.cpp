// Acceptance gate: one line per criterion, PASS/FAIL, nonzero exit on any
// failure. Criteria can be selected by number on the command line; heavy
// stages cache their artifacts under --dir so later criteria can reuse them.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "radsynth/config.hpp"

using namespace radsynth;
namespace fs = std::filesystem;
using clk = std::chrono::steady_clock;

namespace {

// ---------------------------------------------------------------------------
// harness
// ---------------------------------------------------------------------------

struct Harness {
    std::string work_dir = "acceptance_work";
    int failures = 0;

    void report(int id, bool pass, const std::string& detail) {
        std::printf("%s  criterion %d: %s\n", pass ? "PASS" : "FAIL", id, detail.c_str());
        std::fflush(stdout);
        if (!pass) ++failures;
    }
};

std::string fmt(const char* f, ...) {
    char buf[512];
    va_list ap;
    va_start(ap, f);
    std::vsnprintf(buf, sizeof(buf), f, ap);
    va_end(ap);
    return buf;
}

// ---------------------------------------------------------------------------
// shared toy corpus and model shapes
// ---------------------------------------------------------------------------

// Dimensions sized so the full efficacy run fits a commodity single-core
// budget (pilot: ~0.36 s per 2d+1g cycle at batch 16).
train::ModelsConfig toy_models(int vocab_size) {
    train::ModelsConfig mc;
    mc.gen = {.noise_dim = 16, .chunk_dim = 4, .class_emb_dim = 8, .class_count = 4,
              .base_channels = 8, .image_size = 32, .up_block_count = 2};
    mc.encoder = {.image_size = 32, .base_channels = 8, .feat_dim = 32, .class_count = 4};
    mc.decoder = {.feat_dim = 32, .sent_hidden = 16, .topic_hidden = 16, .emb_dim = 12,
                  .word_hidden = 16, .word_layers = 2, .vocab_size = vocab_size, .t_max = 4,
                  .l_max = 10};
    mc.d_image = {.image_size = 32, .base_channels = 8, .down_block_count = 3, .class_count = 4};
    mc.d_report = {.vocab_size = vocab_size, .emb_dim = 8, .hidden = 12, .ff_hidden = 12};
    mc.d_joint = {.image_size = 32, .base_channels = 6, .down_block_count = 3,
                  .vocab_size = vocab_size, .emb_dim = 8, .hidden = 12, .s_emb_dim = 8,
                  .ff_hidden = 16};
    return mc;
}

data::Dataset toy_corpus(Harness& h, int n_samples = 2000) {
    const std::string dir = h.work_dir + "/corpus";
    if (!fs::exists(dir + "/manifest.jsonl") || !fs::exists(dir + "/vocab.txt")) {
        data::ToyConfig tc;
        tc.n_samples = n_samples;
        tc.class_count = 4;
        tc.image_size = 32;
        tc.seed = 77;
        data::generate_toy_dataset(tc, dir);
        std::vector<std::string> corpus;
        auto m = data::load_manifest(dir + "/manifest.jsonl");
        for (const auto& r : m.records) corpus.push_back(r.report);
        data::build_vocabulary(corpus, 1).save(dir + "/vocab.txt");
    }
    return data::Dataset(data::load_manifest(dir + "/manifest.jsonl"),
                         data::Vocabulary::load(dir + "/vocab.txt"));
}

ToyClassifier toy_extractor(const data::Dataset& ds) {
    data::Batch b = ds.load_batch(eval::detail::iota_range(0, std::min(512, ds.size())));
    ClassifierConfig cc{.image_size = 32, .base_channels = 8, .feat_dim = 32, .class_count = 4};
    return train_classifier(b.images, b.label_ids, cc, 9, 400);
}

// ---------------------------------------------------------------------------
// criterion 1: metric oracles
// ---------------------------------------------------------------------------

double auc_pairwise_oracle(const std::vector<double>& scores, const std::vector<int>& labels) {
    double wins = 0.0;
    long long pairs = 0;
    for (size_t i = 0; i < scores.size(); ++i)
        for (size_t j = 0; j < scores.size(); ++j) {
            if (labels[i] != 1 || labels[j] != 0) continue;
            ++pairs;
            if (scores[i] > scores[j]) wins += 1.0;
            else if (scores[i] == scores[j]) wins += 0.5;
        }
    return wins / (double)pairs;
}

void criterion_1(Harness& h) {
    bool ok = true;
    std::string why;

    // identity: any distribution against itself
    {
        Tensor x({40, 3});
        Rng rng(5);
        rng.fill_normal(x, 0.3, 1.7);
        auto g = eval::fit_gaussian(x);
        const double d = eval::fid(g, g);
        if (std::abs(d) > 1e-8) { ok = false; why = fmt("fid identity %g", d); }
    }
    // unit covariance, mean shift of norm 1: distance exactly 1
    {
        eval::GaussianSummary a, b;
        a.mu = Tensor({2});
        a.sigma = Tensor::from({2, 2}, {1, 0, 0, 1});
        b.mu = Tensor::from({2}, {1.0, 0.0});
        b.sigma = Tensor::from({2, 2}, {1, 0, 0, 1});
        const double d = eval::fid(a, b);
        if (std::abs(d - 1.0) > 1e-8) { ok = ok && false; why += fmt(" fid shift %g", d); }
    }
    // auc against the O(n^2) oracle, exact, on 100 random instances
    {
        std::mt19937_64 mt(1234);
        for (int t = 0; t < 100 && ok; ++t) {
            const int n = 10 + (int)(mt() % 191);
            std::vector<double> s((size_t)n);
            std::vector<int> y((size_t)n);
            int pos = 0;
            for (int i = 0; i < n; ++i) {
                s[(size_t)i] = (double)(mt() % 13); // discrete scores force ties
                y[(size_t)i] = (int)(mt() % 2);
                pos += y[(size_t)i];
            }
            if (pos == 0 || pos == n) { --t; continue; }
            const double a = eval::auc(s, y), o = auc_pairwise_oracle(s, y);
            if (a != o) { ok = false; why = fmt("auc %.17g != oracle %.17g", a, o); }
        }
    }
    // BLEU hand cases
    {
        using V = std::vector<int>;
        const std::vector<V> cand1{{7, 8, 9, 10}};
        const std::vector<std::vector<V>> refs1{{V{7, 8, 9, 10, 11}}};
        const double b1 = eval::corpus_bleu_n(cand1, refs1, 1);
        // all unigrams match, c=4 vs r=5: BP = exp(1 - 5/4)
        if (std::abs(b1 - std::exp(-0.25)) > 1e-9) { ok = false; why += fmt(" bleu bp %g", b1); }
        const double ident = eval::corpus_bleu_n(cand1, {{cand1[0]}}, 4);
        if (std::abs(ident - 1.0) > 1e-9) { ok = false; why += fmt(" bleu ident %g", ident); }
        // clipping: "the the the" against one "the" -> 1/3 unigram precision
        const std::vector<V> cand2{{5, 5, 5}};
        const std::vector<std::vector<V>> refs2{{V{5, 6, 7}}};
        const double b2 = eval::corpus_bleu_n(cand2, refs2, 1);
        if (std::abs(b2 - 1.0 / 3.0) > 1e-9) { ok = false; why += fmt(" bleu clip %g", b2); }
    }
    h.report(1, ok,
             ok ? "metric oracles match (fid 0/1.0 within 1e-8, auc exact on 100, bleu 1e-9)"
                : "metric oracle mismatch: " + why);
}

// ---------------------------------------------------------------------------
// criterion 2: gradient suite
// ---------------------------------------------------------------------------

struct GradCheck {
    std::string name;
    std::function<ad::Var()> loss;
    std::vector<nn::Parameter*> params;
};

// central finite differences on >=10 sampled coordinates per module
bool check_gradients(const GradCheck& gc, Rng& pick, double tol, std::string& why) {
    ad::Var L = gc.loss();
    ad::backward(L);
    struct Probe { nn::Parameter* p; long long i; double analytic; };
    std::vector<Probe> probes;
    int guard = 0;
    while ((int)probes.size() < 10 && guard++ < 400) {
        nn::Parameter* p = gc.params[pick.uniform_u64(gc.params.size())];
        const long long i = (long long)pick.uniform_u64((std::uint64_t)p->value.size());
        if (!p->grad.defined() || p->grad.size() != p->value.size()) continue;
        if (std::abs(p->grad[i]) < 1e-7) continue; // want informative coordinates
        bool dup = false;
        for (const auto& q : probes) dup = dup || (q.p == p && q.i == i);
        if (!dup) probes.push_back({p, i, p->grad[i]});
    }
    if ((int)probes.size() < 10) {
        why = gc.name + ": not enough informative coordinates";
        return false;
    }
    for (const auto& q : probes) {
        const double theta = q.p->value[q.i];
        const double step = 1e-5 * std::max(1.0, std::abs(theta));
        q.p->value[q.i] = theta + step;
        const double up = gc.loss().val()[0];
        q.p->value[q.i] = theta - step;
        const double dn = gc.loss().val()[0];
        q.p->value[q.i] = theta;
        const double fd = (up - dn) / (2.0 * step);
        const double rel = std::abs(q.analytic - fd) /
                           std::max({std::abs(q.analytic), std::abs(fd), 1e-8});
        if (rel > tol) {
            why = fmt("%s %s[%lld]: analytic %.8g vs fd %.8g (rel %.2g)", gc.name.c_str(),
                      q.p->name.c_str(), q.i, q.analytic, fd, rel);
            return false;
        }
    }
    return true;
}

void criterion_2(Harness& h) {
    const auto t0 = clk::now();
    train::ModelsConfig mc = toy_models(31);
    train::TrainConfig tc;
    tc.seed = 3;
    auto st = train::make_state(mc, tc);
    auto& m = st.models;

    const int n = 6, s = 32, vocab = 31;
    Rng rng(17);
    Tensor z({n, mc.gen.noise_dim}), x({n, 3, s, s}), feats({n, mc.encoder.feat_dim});
    rng.fill_normal(z);
    rng.fill_normal(x, 0.0, 0.5);
    rng.fill_normal(feats);
    Tensor y({n, 4});
    std::vector<int> yid((size_t)n);
    for (int i = 0; i < n; ++i) {
        yid[(size_t)i] = i % 4;
        y.at({i, i % 4}) = 1.0;
    }
    std::vector<data::Report> reports;
    for (int i = 0; i < n; ++i)
        reports.push_back({{4 + i % 7, 5 + i % 11, 6 + i % 5}, {8 + i % 9, 4 + i % 13}});
    std::vector<std::vector<int>> flat_rows((size_t)n);
    for (int i = 0; i < n; ++i)
        flat_rows[(size_t)i] =
            flatten_report(reports[(size_t)i], mc.decoder.t_max, mc.decoder.l_max);
    std::vector<int> turns((size_t)n);
    for (int i = 0; i < n; ++i) turns[(size_t)i] = i % 4;

    std::vector<GradCheck> checks;
    checks.push_back({"generator",
                      [&] { return ad::mean_all(m.g.fwd(ad::leaf(z), ad::leaf(y), true)); },
                      m.g.params()});
    checks.push_back({"decoder",
                      [&] {
                          return m.decoder.teacher_forced_loss(ad::leaf(feats), reports).total;
                      },
                      m.decoder.params()});
    checks.push_back({"d_image",
                      [&] {
                          auto out = m.d_image.fwd(ad::leaf(x), ad::leaf(y));
                          auto rp = rotation_predict(m.d_image, ad::leaf(x), turns);
                          return ad::add(ad::mean_all(out.score), rp.ce);
                      },
                      m.d_image.params()});
    checks.push_back({"d_report",
                      [&] { return ad::mean_all(m.d_report.score_ids(flat_rows)); },
                      m.d_report.params()});
    checks.push_back({"d_joint",
                      [&] { return ad::mean_all(m.d_joint.score_ids(ad::leaf(x), flat_rows)); },
                      m.d_joint.params()});

    bool ok = true;
    std::string why;
    Rng pick(99);
    for (auto& gc : checks) {
        for (auto* p : gc.params) p->grad.fill(0.0);
        if (!check_gradients(gc, pick, 1e-3, why)) { ok = false; break; }
    }
    (void)vocab;
    const double dt = std::chrono::duration<double>(clk::now() - t0).count();
    h.report(2, ok,
             ok ? fmt("analytic gradients match central differences "
                      "(5 modules x 10 coords, rel < 1e-3, %.1fs)", dt)
                : "gradient mismatch: " + why);
}

// ---------------------------------------------------------------------------
// criterion 3: end-to-end differentiability
// ---------------------------------------------------------------------------

void criterion_3(Harness& h) {
    train::ModelsConfig mc = toy_models(31);
    train::TrainConfig tc;
    tc.seed = 11;
    auto st = train::make_state(mc, tc);
    auto& m = st.models;

    const int n = 4;
    Rng rng(23);
    Tensor z({n, mc.gen.noise_dim});
    rng.fill_normal(z);
    Tensor y({n, 4});
    for (int i = 0; i < n; ++i) y.at({i, i % 4}) = 1.0;

    auto first_layer_grad_l1 = [&](bool through_joint) {
        for (auto* p : m.g.params()) p->grad.fill(0.0);
        ad::Var img = m.g.fwd(ad::leaf(z), ad::leaf(y), true);
        ad::Var v = m.encoder.features(img);
        auto sd = m.decoder.decode_soft(v);
        ad::Var score = through_joint ? m.d_joint.score_soft(img, sd.probs)
                                      : m.d_report.score_soft(sd.probs);
        ad::backward(ad::mean_all(score));
        double l1 = 0.0;
        for (auto* p : m.g.params())
            if (p->name.rfind("g.initial", 0) == 0 && p->grad.defined())
                for (long long i = 0; i < p->grad.size(); ++i) l1 += std::abs(p->grad[i]);
        return l1;
    };

    const double via_report = first_layer_grad_l1(false);
    const double via_joint = first_layer_grad_l1(true);
    const bool ok = via_report > 0.0 && via_joint > 0.0 && std::isfinite(via_report) &&
                    std::isfinite(via_joint);
    h.report(3, ok,
             fmt("generator first-layer grads via report critic %.3g, via joint critic %.3g%s",
                 via_report, via_joint, ok ? "" : " (expected nonzero)"));
}

// ---------------------------------------------------------------------------
// criterion 4: spectral invariant after a 500-step run
// ---------------------------------------------------------------------------

double top_singular_value(const Tensor& w) {
    const int r = nn::sn_rows(w), c = nn::sn_cols(w);
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(
        w.data(), r, c);
    return Eigen::BDCSVD<Eigen::MatrixXd>(m).singularValues()(0);
}

void criterion_4(Harness& h) {
    const auto t0 = clk::now();
    data::Dataset ds = toy_corpus(h);
    train::ModelsConfig mc = toy_models(ds.vocab().size());
    train::TrainConfig tc;
    tc.seed = 5;
    tc.batch_size = 16;
    tc.total_g_steps = 167; // 167 generator + 334 critic updates = 501 steps
    tc.metrics_every = 0;
    auto st = train::make_state(mc, tc);
    train::train(st, ds, "");

    int checked = 0;
    double worst = 0.0;
    std::string worst_name;
    for (auto* p : st.models.d_params()) {
        if (!p->spectral) continue;
        // normalize exactly as the forward pass does: sigma-hat from the
        // settled power-iteration vectors
        const double sigma_hat = std::max(nn::spectral_sigma(*p), 1e-12);
        Tensor norm = p->value.clone();
        for (long long i = 0; i < norm.size(); ++i) norm[i] /= sigma_hat;
        const double sv = top_singular_value(norm);
        ++checked;
        if (sv > worst) {
            worst = sv;
            worst_name = p->name;
        }
    }
    const double dt = std::chrono::duration<double>(clk::now() - t0).count();
    const bool ok = checked > 0 && worst <= 1.0 + 1e-2;
    h.report(4, ok,
             fmt("top singular value of %d normalized critic matrices <= %.6f "
                 "(worst %s, bound 1.01, %.1fs)", checked, worst, worst_name.c_str(), dt));
}

// ---------------------------------------------------------------------------
// criterion 5: toy training efficacy (cached for criteria 6)
// ---------------------------------------------------------------------------

struct EfficacyRun {
    train::TrainState st;
    double fid_initial = 0.0, fid_final = 0.0;
};

EfficacyRun ensure_efficacy_run(Harness& h, data::Dataset& ds, ToyClassifier& extractor) {
    const std::string ckpt = h.work_dir + "/gan.ckpt";
    const std::string fid_file = h.work_dir + "/gan_fid.json";
    if (fs::exists(ckpt) && fs::exists(fid_file)) {
        EfficacyRun run{train::load_checkpoint(ckpt)};
        std::ifstream f(fid_file);
        nlohmann::json j = nlohmann::json::parse(f);
        run.fid_initial = j.at("initial").get<double>();
        run.fid_final = j.at("final").get<double>();
        return run;
    }

    train::ModelsConfig mc = toy_models(ds.vocab().size());
    train::TrainConfig tc;
    tc.seed = 1;
    tc.batch_size = 16;
    tc.total_g_steps = 2000;
    tc.metrics_every = 0;
    tc.fid_every = 500;
    tc.fid_probe_size = 256;
    EfficacyRun run{train::make_state(mc, tc)};
    train::TrainHooks hooks;
    hooks.fid_extractor = &extractor;
    train::train(run.st, ds, "", hooks);

    run.fid_initial = run.st.fid_history.front().second;
    run.fid_final = run.st.fid_history.back().second;
    train::save_checkpoint(run.st, ckpt);
    std::ofstream f(fid_file);
    nlohmann::json hist = nlohmann::json::array();
    for (auto& [step, value] : run.st.fid_history) hist.push_back({step, value});
    f << nlohmann::json{{"initial", run.fid_initial}, {"final", run.fid_final},
                        {"history", hist}}.dump(2)
      << "\n";
    return run;
}

void criterion_5(Harness& h) {
    const auto t0 = clk::now();
    data::Dataset ds = toy_corpus(h);
    ToyClassifier extractor = toy_extractor(ds);
    EfficacyRun run = ensure_efficacy_run(h, ds, extractor);

    const bool fid_ok = run.fid_final <= 0.5 * run.fid_initial;

    auto [sx, sy] = eval::detail::synthesize(run.st.models.g, 400, 424242, 64);
    std::vector<int> preds;
    {
        ad::NoGradGuard ng;
        preds = ad::argmax_rows(extractor.logits(ad::leaf(sx)).val());
    }
    const double acc = eval::accuracy(preds, sy);
    std::vector<int> per_hit(4, 0), per_n(4, 0);
    for (size_t i = 0; i < sy.size(); ++i) {
        ++per_n[(size_t)sy[i]];
        per_hit[(size_t)sy[i]] += preds[i] == sy[i];
    }
    const bool acc_ok = acc >= 0.70;

    const double dt = std::chrono::duration<double>(clk::now() - t0).count();
    h.report(5, fid_ok && acc_ok,
             fmt("fid %.2f -> %.2f (need <= %.2f)%s; conditioning acc %.3f "
                 "[%d/%d %d/%d %d/%d %d/%d] (need >= 0.70)%s (%.0fs)",
                 run.fid_initial, run.fid_final, 0.5 * run.fid_initial, fid_ok ? "" : " MISS",
                 acc, per_hit[0], per_n[0], per_hit[1], per_n[1], per_hit[2], per_n[2],
                 per_hit[3], per_n[3], acc_ok ? "" : " MISS", dt));
}

// ---------------------------------------------------------------------------
// criterion 6: augmentation direction
// ---------------------------------------------------------------------------

void criterion_6(Harness& h) {
    const auto t0 = clk::now();
    data::Dataset ds = toy_corpus(h);
    ToyClassifier extractor = toy_extractor(ds);
    EfficacyRun run = ensure_efficacy_run(h, ds, extractor);

    const std::vector<int> mixes{0, 1000};
    const std::vector<std::uint64_t> seeds{101, 202, 303};
    eval::ExperimentProtocol proto; // 200 real train / 200 held out
    ClassifierConfig cc{.image_size = 32, .base_channels = 8, .feat_dim = 32, .class_count = 4};

    auto aug = eval::augmentation_experiment(ds, run.st.models.g, mixes, cc, seeds, proto);
    const double auc_real = eval::metric_mean(aug[0].runs, &eval::MetricsReport::auc);
    const double auc_aug = eval::metric_mean(aug[1].runs, &eval::MetricsReport::auc);

    train::ModelsConfig mc = toy_models(ds.vocab().size());
    eval::Captioner gan_f{run.st.models.encoder, run.st.models.decoder};
    gan_f.encoder.trained = true;
    auto rep = eval::report_generation_experiment(ds, run.st.models.g, gan_f, mixes, mc.encoder,
                                                  mc.decoder, seeds, proto);
    const double cider_real = eval::metric_mean(rep[0].runs, &eval::MetricsReport::cider);
    const double cider_aug = eval::metric_mean(rep[1].runs, &eval::MetricsReport::cider);

    const bool auc_ok = auc_aug >= auc_real;
    const bool cider_ok = cider_aug >= cider_real;
    const double dt = std::chrono::duration<double>(clk::now() - t0).count();
    h.report(6, auc_ok && cider_ok,
             fmt("mean auc real %.4f vs augmented %.4f%s; mean cider real %.4f vs "
                 "augmented %.4f%s (3 seeds, %.0fs)",
                 auc_real, auc_aug, auc_ok ? "" : " MISS", cider_real, cider_aug,
                 cider_ok ? "" : " MISS", dt));
}

// ---------------------------------------------------------------------------
// criterion 7: limited-label direction
// ---------------------------------------------------------------------------

void criterion_7(Harness& h) {
    const auto t0 = clk::now();
    data::Dataset ds = toy_corpus(h);
    ToyClassifier extractor = toy_extractor(ds);

    auto final_fid = [&](double fraction, std::uint64_t seed) -> std::optional<double> {
        train::ModelsConfig mc = toy_models(ds.vocab().size());
        train::TrainConfig tc;
        tc.seed = seed;
        tc.batch_size = 16;
        tc.total_g_steps = 300;
        tc.metrics_every = 0;
        tc.fid_every = 300;
        tc.fid_probe_size = 256;
        tc.label_fraction = fraction; // rotation self-supervision stays on
        auto st = train::make_state(mc, tc);
        train::TrainHooks hooks;
        hooks.fid_extractor = &extractor;
        try {
            train::train(st, ds, "", hooks);
        } catch (const NumericalError&) {
            return std::nullopt; // a NaN halt fails the criterion
        }
        return st.fid_history.back().second;
    };

    bool ok = true;
    std::string detail;
    for (std::uint64_t seed : {31ull, 32ull}) {
        auto partial = final_fid(0.3, seed);
        auto full = final_fid(1.0, seed);
        if (!partial || !full) {
            ok = false;
            detail += fmt(" seed %llu: NaN halt;", (unsigned long long)seed);
            continue;
        }
        const bool within = *partial <= 1.5 * *full;
        ok = ok && within;
        detail += fmt(" seed %llu: fid %.2f (30%% labels) vs %.2f (full) ratio %.2f%s;",
                      (unsigned long long)seed, *partial, *full, *partial / *full,
                      within ? "" : " MISS");
    }
    const double dt = std::chrono::duration<double>(clk::now() - t0).count();
    h.report(7, ok, fmt("limited labels:%s bound 1.5x (%.0fs)", detail.c_str(), dt));
}

// ---------------------------------------------------------------------------
// criterion 8: schedule, isolation, deterministic replay
// ---------------------------------------------------------------------------

void criterion_8(Harness& h) {
    data::Dataset ds = toy_corpus(h);
    train::ModelsConfig mc = toy_models(ds.vocab().size());

    bool ok = true;
    std::string why;

    // per-step isolation and the exact 2:1 counter ratio
    {
        train::TrainConfig tc;
        tc.seed = 8;
        tc.batch_size = 16;
        auto st = train::make_state(mc, tc);
        auto plan = data::batch_plan(ds.size(), tc.batch_size, 99, true);
        size_t pos = 0;
        auto next = [&] { return ds.load_batch(plan[pos++ % plan.size()]); };
        for (int cycle = 0; cycle < 6 && ok; ++cycle) {
            for (int i = 0; i < 2; ++i) {
                const auto gf_before = nn::params_hash(st.models.gf_params(true));
                train::discriminator_step(st, next());
                if (nn::params_hash(st.models.gf_params(true)) != gf_before) {
                    ok = false;
                    why = "critic step moved generator-side parameters";
                }
            }
            const auto d_before = nn::params_hash(st.models.d_params());
            train::generator_step(st, next());
            if (nn::params_hash(st.models.d_params()) != d_before) {
                ok = false;
                why = "generator step moved critic parameters";
            }
            if (st.d_step != 2 * st.g_step) {
                ok = false;
                why = fmt("counter ratio %lld:%lld", st.d_step, st.g_step);
            }
        }
    }

    // deterministic replay: same seed, same data -> identical archives
    if (ok) {
        const std::string a = h.work_dir + "/replay_a", b = h.work_dir + "/replay_b";
        for (const std::string& dir : {a, b}) {
            fs::remove_all(dir);
            train::TrainConfig tc;
            tc.seed = 8;
            tc.batch_size = 16;
            tc.total_g_steps = 4;
            tc.metrics_every = 0;
            auto st = train::make_state(mc, tc);
            train::train(st, ds, dir);
        }
        std::ifstream fa(a + "/final.ckpt", std::ios::binary), fb(b + "/final.ckpt",
                                                                  std::ios::binary);
        std::string ba((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
        std::string bb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
        if (ba.empty() || ba != bb) {
            ok = false;
            why = "replay checkpoints differ";
        }
        auto sa = train::load_checkpoint(a + "/final.ckpt");
        auto sb = train::load_checkpoint(b + "/final.ckpt");
        if (nn::params_hash(sa.models.all_params()) != nn::params_hash(sb.models.all_params())) {
            ok = false;
            why = "replay parameter hashes differ";
        }
    }
    h.report(8, ok,
             ok ? "2:1 ratio held with per-step isolation over 6 cycles; replay archives identical"
                : why);
}

} // namespace

int main(int argc, char** argv) {
    Harness h;
    std::set<int> wanted;
    for (int i = 1; i < argc; ++i) {
        const std::string arg = argv[i];
        if (arg == "--dir" && i + 1 < argc) {
            h.work_dir = argv[++i];
        } else {
            const int id = std::atoi(arg.c_str());
            if (id < 1 || id > 8) {
                std::fprintf(stderr, "usage: %s [--dir WORKDIR] [criterion...]\n", argv[0]);
                return 2;
            }
            wanted.insert(id);
        }
    }
    if (wanted.empty()) wanted = {1, 2, 3, 4, 5, 6, 7, 8};
    fs::create_directories(h.work_dir);

    if (wanted.count(1)) criterion_1(h);
    if (wanted.count(2)) criterion_2(h);
    if (wanted.count(3)) criterion_3(h);
    if (wanted.count(4)) criterion_4(h);
    if (wanted.count(5)) criterion_5(h);
    if (wanted.count(6)) criterion_6(h);
    if (wanted.count(7)) criterion_7(h);
    if (wanted.count(8)) criterion_8(h);

    if (h.failures) std::printf("%d criterion(s) failed\n", h.failures);
    else std::printf("all selected criteria passed\n");
    return h.failures ? 1 : 0;
}
