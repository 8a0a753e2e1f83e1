#pragma once

// Adversarial training loop: per-network losses for the constrained minimax
// objective, alternating discriminator/generator updates at a fixed ratio,
// limited-label stratification, checkpointing, and a metrics log.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "radsynth/checkpoint.hpp"
#include "radsynth/classifier.hpp"
#include "radsynth/data.hpp"
#include "radsynth/discriminators.hpp"
#include "radsynth/errors.hpp"
#include "radsynth/evaluation.hpp"
#include "radsynth/generator.hpp"
#include "radsynth/nn.hpp"
#include "radsynth/report_decoder.hpp"
#include "radsynth/rng.hpp"

namespace radsynth::train {

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

struct TrainConfig {
    double lr_generator = 5e-5;
    double lr_discriminators = 2e-4;
    int batch_size = 64;
    int d_steps_per_g_step = 2;
    int total_g_steps = 0;
    double alpha = 0.2;          // self-supervision weight
    double label_fraction = 1.0; // stratified share of labeled samples per class
    std::uint64_t seed = 0;
    double beta1 = 0.0, beta2 = 0.999;

    // loss wiring knobs
    bool rotation_on_real = true; // rotation term in the critic objective
    bool rotation_on_fake = true; // mirrored rotation term in the generator objective
    bool train_encoder = false;   // unfreeze the report model's image encoder
    double g_image_weight = 1.0, g_report_weight = 1.0, g_joint_weight = 1.0;

    // artifact cadence (0 disables the periodic variant)
    int metrics_every = 10;
    int checkpoint_every = 0;
    int fid_every = 0;
    int fid_probe_size = 256;

    void validate() const {
        if (lr_generator <= 0 || lr_discriminators <= 0)
            throw ConfigError("learning rates must be > 0");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (d_steps_per_g_step < 1) throw ConfigError("d_steps_per_g_step must be >= 1");
        if (total_g_steps < 0) throw ConfigError("total_g_steps must be >= 0");
        if (!(label_fraction > 0.0) || label_fraction > 1.0)
            throw ConfigError("label_fraction must lie in (0, 1]");
        if (alpha < 0) throw ConfigError("alpha must be >= 0");
        if (fid_probe_size < 2) throw ConfigError("fid_probe_size must be >= 2");
    }
};

struct ModelsConfig {
    GeneratorConfig gen;
    ClassifierConfig encoder;
    DecoderConfig decoder;
    DImageConfig d_image;
    DReportConfig d_report;
    DJointConfig d_joint;

    void validate() const {
        if (gen.class_count != encoder.class_count || gen.class_count != d_image.class_count)
            throw ConfigError("class_count must agree across networks");
        if (gen.image_size != encoder.image_size || gen.image_size != d_image.image_size ||
            gen.image_size != d_joint.image_size)
            throw ConfigError("image_size must agree across networks");
        if (decoder.vocab_size != d_report.vocab_size || decoder.vocab_size != d_joint.vocab_size)
            throw ConfigError("vocab_size must agree across networks");
    }
};

struct ModelBundle {
    Generator g;
    ToyClassifier encoder; // image half of the report model
    ReportDecoder decoder; // text half of the report model
    DImage d_image;
    DReport d_report;
    DJoint d_joint;

    std::vector<nn::Parameter*> d_params() {
        std::vector<nn::Parameter*> ps = d_image.params();
        for (auto* p : d_report.params()) ps.push_back(p);
        for (auto* p : d_joint.params()) ps.push_back(p);
        return ps;
    }

    std::vector<nn::Parameter*> gf_params(bool include_encoder) {
        std::vector<nn::Parameter*> ps = g.params();
        if (include_encoder)
            for (auto* p : encoder.params()) ps.push_back(p);
        for (auto* p : decoder.params()) ps.push_back(p);
        return ps;
    }

    std::vector<nn::Parameter*> all_params() {
        std::vector<nn::Parameter*> ps = g.params();
        for (auto* p : encoder.params()) ps.push_back(p);
        for (auto* p : decoder.params()) ps.push_back(p);
        for (auto* p : d_params()) ps.push_back(p);
        return ps;
    }
};

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

struct LossBundle {
    double d_image_real = 0, d_image_fake = 0;
    double d_report_real = 0, d_report_fake = 0;
    double d_joint_real = 0, d_joint_fake = 0;
    double rotation_ss = 0; // critic-side rotation CE (real images)
    double g_image = 0, g_report = 0, g_joint = 0;
    double g_rotation_ss = 0; // generator-side rotation CE (generated images)
    double alpha = 0;

    bool finite() const {
        for (double v : {d_image_real, d_image_fake, d_report_real, d_report_fake, d_joint_real,
                         d_joint_fake, rotation_ss, g_image, g_report, g_joint, g_rotation_ss})
            if (!std::isfinite(v)) return false;
        return true;
    }

    nlohmann::json to_json() const {
        return {{"d_image_real", d_image_real}, {"d_image_fake", d_image_fake},
                {"d_report_real", d_report_real}, {"d_report_fake", d_report_fake},
                {"d_joint_real", d_joint_real}, {"d_joint_fake", d_joint_fake},
                {"rotation_ss", rotation_ss}, {"g_image", g_image},
                {"g_report", g_report}, {"g_joint", g_joint},
                {"g_rotation_ss", g_rotation_ss}, {"alpha", alpha}};
    }
};

namespace detail {

// Stable logit binary cross-entropy, reduced to the batch mean.
inline ad::Var bce_real(const ad::Var& score) { return ad::mean_all(ad::softplus(ad::neg(score))); }
inline ad::Var bce_fake(const ad::Var& score) { return ad::mean_all(ad::softplus(score)); }

inline ad::Var zero_scalar() { return ad::leaf(Tensor({1})); }

inline std::vector<std::vector<int>> flatten_reports(const std::vector<data::Report>& reports,
                                                     const DecoderConfig& dc) {
    std::vector<std::vector<int>> flat;
    flat.reserve(reports.size());
    for (const auto& r : reports) flat.push_back(flatten_report(r, dc.t_max, dc.l_max));
    return flat;
}

enum Parts : unsigned { kDSide = 1u, kGSide = 2u, kBothSides = 3u };

struct LossGraphs {
    ad::Var d_image_real, d_image_fake, d_report_real, d_report_fake;
    ad::Var d_joint_real, d_joint_fake, rotation_ss;
    ad::Var g_image, g_report, g_joint, g_rotation_ss;
    ad::Var d_total, g_total;
    bool has_labeled = false;

    LossBundle values(double alpha) const {
        LossBundle b;
        b.alpha = alpha;
        auto v = [](const ad::Var& x) { return x.node() ? x.val()[0] : 0.0; };
        b.d_image_real = v(d_image_real);
        b.d_image_fake = v(d_image_fake);
        b.d_report_real = v(d_report_real);
        b.d_report_fake = v(d_report_fake);
        b.d_joint_real = v(d_joint_real);
        b.d_joint_fake = v(d_joint_fake);
        b.rotation_ss = v(rotation_ss);
        b.g_image = v(g_image);
        b.g_report = v(g_report);
        b.g_joint = v(g_joint);
        b.g_rotation_ss = v(g_rotation_ss);
        return b;
    }
};

// Build the requested loss terms for one batch. Random draws always occur in
// the order: noise, fake labels, real rotation turns, fake rotation turns —
// skipping draws whose term is disabled or not requested.
inline LossGraphs build_losses(ModelBundle& m, const data::Batch& batch,
                               const std::vector<char>& labeled_mask, const TrainConfig& cfg,
                               Rng& rng, unsigned parts) {
    const int n = batch.images.dim(0);
    const int k = m.g.cfg.class_count;
    if (n < 1) throw ConfigError("empty batch");

    // shared fake draws
    Tensor z({n, m.g.cfg.noise_dim});
    rng.fill_normal(z);
    Tensor y_fake({n, k});
    std::vector<int> y_fake_ids((size_t)n);
    for (int i = 0; i < n; ++i) {
        y_fake_ids[(size_t)i] = (int)rng.uniform_u64((std::uint64_t)k);
        y_fake.at({i, y_fake_ids[(size_t)i]}) = 1.0;
    }
    std::vector<int> real_turns, fake_turns;
    if ((parts & kDSide) && cfg.rotation_on_real) {
        real_turns.resize((size_t)n);
        for (auto& t : real_turns) t = (int)rng.uniform_u64(4);
    }
    if ((parts & kGSide) && cfg.rotation_on_fake) {
        fake_turns.resize((size_t)n);
        for (auto& t : fake_turns) t = (int)rng.uniform_u64(4);
    }

    // fake pair: through the generator for generator-side terms, as constants
    // for critic-side terms
    ad::Var img_fake, probs_fake;
    if (parts & kGSide) {
        img_fake = m.g.fwd(ad::leaf(z), ad::leaf(y_fake), true);
        probs_fake = m.decoder.decode_soft(m.encoder.features(img_fake)).probs;
    } else {
        ad::NoGradGuard ng;
        Tensor img = m.g.fwd(ad::leaf(z), ad::leaf(y_fake), true).val();
        Tensor probs = m.decoder.decode_soft(m.encoder.features(ad::leaf(img))).probs.val();
        img_fake = ad::leaf(img);
        probs_fake = ad::leaf(probs);
    }
    ad::Var y_fake_v = ad::leaf(y_fake);

    LossGraphs out;

    if (parts & kDSide) {
        const auto flat = flatten_reports(batch.reports, m.decoder.cfg);
        // conditional image critic sees only labeled real samples
        std::vector<int> labeled_rows;
        for (int i = 0; i < n; ++i) {
            const int src = batch.indices.empty() ? i : batch.indices[(size_t)i];
            if (labeled_mask.empty() || labeled_mask[(size_t)src]) labeled_rows.push_back(i);
        }
        out.has_labeled = !labeled_rows.empty();
        if (out.has_labeled) {
            const int s = m.g.cfg.image_size;
            const long long plane = 3LL * s * s;
            Tensor xi({(int)labeled_rows.size(), 3, s, s});
            Tensor yi({(int)labeled_rows.size(), k});
            for (size_t r = 0; r < labeled_rows.size(); ++r) {
                std::memcpy(xi.data() + (long long)r * plane,
                            batch.images.data() + (long long)labeled_rows[r] * plane,
                            sizeof(double) * (size_t)plane);
                yi.at({(int)r, batch.label_ids[(size_t)labeled_rows[r]]}) = 1.0;
            }
            out.d_image_real = bce_real(m.d_image.fwd(ad::leaf(xi), ad::leaf(yi)).score);
        } else {
            out.d_image_real = zero_scalar();
        }
        out.d_image_fake = bce_fake(m.d_image.fwd(img_fake, y_fake_v).score);

        ad::Var x_real = ad::leaf(batch.images);
        out.d_report_real = bce_real(m.d_report.score_ids(flat));
        out.d_report_fake = bce_fake(m.d_report.score_soft(probs_fake));
        out.d_joint_real = bce_real(m.d_joint.score_ids(x_real, flat));
        out.d_joint_fake = bce_fake(m.d_joint.score_soft(img_fake, probs_fake));
        out.rotation_ss = cfg.rotation_on_real
                              ? rotation_predict(m.d_image, x_real, real_turns).ce
                              : zero_scalar();

        out.d_total = ad::add(
            ad::add(ad::add(out.d_image_real, out.d_image_fake),
                    ad::add(out.d_report_real, out.d_report_fake)),
            ad::add(ad::add(out.d_joint_real, out.d_joint_fake),
                    ad::mul_const(out.rotation_ss, cfg.alpha)));
    }

    if (parts & kGSide) {
        // non-saturating terms: push critic scores of fakes toward "real"
        out.g_image = bce_real(m.d_image.fwd(img_fake, y_fake_v).score);
        out.g_report = bce_real(m.d_report.score_soft(probs_fake));
        out.g_joint = bce_real(m.d_joint.score_soft(img_fake, probs_fake));
        out.g_rotation_ss = cfg.rotation_on_fake
                                ? rotation_predict(m.d_image, img_fake, fake_turns).ce
                                : zero_scalar();

        out.g_total = ad::add(
            ad::add(ad::mul_const(out.g_image, cfg.g_image_weight),
                    ad::mul_const(out.g_report, cfg.g_report_weight)),
            ad::add(ad::mul_const(out.g_joint, cfg.g_joint_weight),
                    ad::mul_const(out.g_rotation_ss, cfg.alpha)));
    }
    return out;
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
    std::uint64_t h = fnv1a64(&seed, sizeof(seed));
    return fnv1a64(&tag, sizeof(tag), h);
}

} // namespace detail

// Deterministic per-class subsample: each class keeps round(fraction * count)
// of its samples, drawn without replacement. Returns a dataset-sized mask.
inline std::vector<char> stratified_labeled_mask(const std::vector<int>& labels, int class_count,
                                                 double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0) || fraction > 1.0)
        throw ConfigError("label_fraction must lie in (0, 1]");
    std::vector<char> mask(labels.size(), 0);
    if (fraction == 1.0) {
        std::fill(mask.begin(), mask.end(), 1);
        return mask;
    }
    Rng rng = Rng::fork(seed, 0x5ab3u);
    for (int c = 0; c < class_count; ++c) {
        std::vector<int> rows;
        for (size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == c) rows.push_back((int)i);
        rng.shuffle(rows);
        const long long keep = std::llround(fraction * (double)rows.size());
        for (long long i = 0; i < keep && i < (long long)rows.size(); ++i)
            mask[(size_t)rows[(size_t)i]] = 1;
    }
    return mask;
}

// ---------------------------------------------------------------------------
// train state
// ---------------------------------------------------------------------------

struct TrainState {
    ModelsConfig models_cfg;
    TrainConfig cfg;
    ModelBundle models;
    nn::Adam opt_d, opt_g;
    long long g_step = 0, d_step = 0;
    Rng rng{0};
    std::vector<char> labeled_mask; // dataset-aligned; empty = everything labeled
    std::vector<std::pair<long long, double>> fid_history;
    std::string dump_dir; // where a numerical failure writes its diagnostics
};

inline TrainState make_state(const ModelsConfig& mc, const TrainConfig& tc) {
    tc.validate();
    mc.validate();
    TrainState st;
    st.models_cfg = mc;
    st.cfg = tc;
    Rng init_rng = Rng::fork(tc.seed, 0);
    st.models.g.init(mc.gen, init_rng);
    st.models.encoder.init(mc.encoder, init_rng);
    DecoderConfig dc = mc.decoder;
    dc.feat_dim = mc.encoder.feat_dim; // decoder reads the encoder's features
    st.models.decoder.init(dc, init_rng);
    st.models.d_image.init(mc.d_image, init_rng);
    st.models.d_report.init(mc.d_report, init_rng);
    st.models.d_joint.init(mc.d_joint, init_rng);
    st.models_cfg.decoder = dc;

    st.opt_d.lr = tc.lr_discriminators;
    st.opt_d.beta1 = tc.beta1;
    st.opt_d.beta2 = tc.beta2;
    st.opt_d.init(st.models.d_params());
    st.opt_g.lr = tc.lr_generator;
    st.opt_g.beta1 = tc.beta1;
    st.opt_g.beta2 = tc.beta2;
    st.opt_g.init(st.models.gf_params(tc.train_encoder));
    st.rng = Rng::fork(tc.seed, 1);
    return st;
}

namespace detail {

inline void check_bundle(TrainState& st, const LossBundle& b, const char* where) {
    if (b.finite()) return;
    if (!st.dump_dir.empty()) {
        std::filesystem::create_directories(st.dump_dir);
        std::ofstream js(st.dump_dir + "/nan_dump.json");
        nlohmann::json j = b.to_json();
        j["g_step"] = st.g_step;
        j["d_step"] = st.d_step;
        j["where"] = where;
        js << j.dump(2) << "\n";
    }
    throw NumericalError(std::string("non-finite loss term during ") + where + " at g_step " +
                         std::to_string(st.g_step));
}

} // namespace detail

// Public loss evaluation on a frozen model: every term of the objective,
// fakes routed through the generator so the bundle reflects live wiring.
inline LossBundle compute_losses(const data::Batch& batch, ModelBundle& models,
                                 const TrainConfig& cfg, Rng& rng,
                                 const std::vector<char>& labeled_mask = {}) {
    auto graphs = detail::build_losses(models, batch, labeled_mask, cfg, rng, detail::kBothSides);
    LossBundle b = graphs.values(cfg.alpha);
    if (!b.finite()) throw NumericalError("non-finite loss term");
    return b;
}

// One critic update: spectral estimates refresh, fakes held constant, Adam on
// the three discriminators only.
inline LossBundle discriminator_step(TrainState& st, const data::Batch& batch) {
    auto d_ps = st.models.d_params();
    nn::power_iterate_all(st.models.all_params());
    auto graphs =
        detail::build_losses(st.models, batch, st.labeled_mask, st.cfg, st.rng, detail::kDSide);
    LossBundle b = graphs.values(st.cfg.alpha);
    detail::check_bundle(st, b, "discriminator_step");
    st.opt_d.zero_grad(d_ps);
    ad::backward(graphs.d_total);
    st.opt_d.step(d_ps);
    ++st.d_step;
    return b;
}

// One generator/report-model update: Adam on G plus the report model, critics
// untouched.
inline LossBundle generator_step(TrainState& st, const data::Batch& batch) {
    auto gf_ps = st.models.gf_params(st.cfg.train_encoder);
    nn::power_iterate_all(st.models.all_params());
    auto graphs =
        detail::build_losses(st.models, batch, st.labeled_mask, st.cfg, st.rng, detail::kGSide);
    LossBundle b = graphs.values(st.cfg.alpha);
    detail::check_bundle(st, b, "generator_step");
    st.opt_g.zero_grad(gf_ps);
    ad::backward(graphs.g_total);
    st.opt_g.step(gf_ps);
    ++st.g_step;
    return b;
}

// ---------------------------------------------------------------------------
// checkpointing
// ---------------------------------------------------------------------------

namespace detail {

inline nlohmann::json cfg_json(const TrainConfig& c) {
    return {{"lr_generator", c.lr_generator},
            {"lr_discriminators", c.lr_discriminators},
            {"batch_size", c.batch_size},
            {"d_steps_per_g_step", c.d_steps_per_g_step},
            {"total_g_steps", c.total_g_steps},
            {"alpha", c.alpha},
            {"label_fraction", c.label_fraction},
            {"seed", c.seed},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"rotation_on_real", c.rotation_on_real},
            {"rotation_on_fake", c.rotation_on_fake},
            {"train_encoder", c.train_encoder},
            {"g_image_weight", c.g_image_weight},
            {"g_report_weight", c.g_report_weight},
            {"g_joint_weight", c.g_joint_weight},
            {"metrics_every", c.metrics_every},
            {"checkpoint_every", c.checkpoint_every},
            {"fid_every", c.fid_every},
            {"fid_probe_size", c.fid_probe_size}};
}

inline TrainConfig cfg_from(const nlohmann::json& j) {
    TrainConfig c;
    c.lr_generator = j.at("lr_generator");
    c.lr_discriminators = j.at("lr_discriminators");
    c.batch_size = j.at("batch_size");
    c.d_steps_per_g_step = j.at("d_steps_per_g_step");
    c.total_g_steps = j.at("total_g_steps");
    c.alpha = j.at("alpha");
    c.label_fraction = j.at("label_fraction");
    c.seed = j.at("seed");
    c.beta1 = j.at("beta1");
    c.beta2 = j.at("beta2");
    c.rotation_on_real = j.at("rotation_on_real");
    c.rotation_on_fake = j.at("rotation_on_fake");
    c.train_encoder = j.at("train_encoder");
    c.g_image_weight = j.at("g_image_weight");
    c.g_report_weight = j.at("g_report_weight");
    c.g_joint_weight = j.at("g_joint_weight");
    c.metrics_every = j.at("metrics_every");
    c.checkpoint_every = j.at("checkpoint_every");
    c.fid_every = j.at("fid_every");
    c.fid_probe_size = j.at("fid_probe_size");
    return c;
}

inline nlohmann::json models_cfg_json(const ModelsConfig& m) {
    return {{"gen",
             {{"noise_dim", m.gen.noise_dim},
              {"chunk_dim", m.gen.chunk_dim},
              {"class_emb_dim", m.gen.class_emb_dim},
              {"class_count", m.gen.class_count},
              {"base_channels", m.gen.base_channels},
              {"image_size", m.gen.image_size},
              {"up_block_count", m.gen.up_block_count},
              {"spectral", m.gen.spectral}}},
            {"encoder",
             {{"image_size", m.encoder.image_size},
              {"in_channels", m.encoder.in_channels},
              {"base_channels", m.encoder.base_channels},
              {"feat_dim", m.encoder.feat_dim},
              {"class_count", m.encoder.class_count}}},
            {"decoder",
             {{"feat_dim", m.decoder.feat_dim},
              {"sent_hidden", m.decoder.sent_hidden},
              {"topic_hidden", m.decoder.topic_hidden},
              {"emb_dim", m.decoder.emb_dim},
              {"word_hidden", m.decoder.word_hidden},
              {"word_layers", m.decoder.word_layers},
              {"vocab_size", m.decoder.vocab_size},
              {"t_max", m.decoder.t_max},
              {"l_max", m.decoder.l_max},
              {"stop_threshold", m.decoder.stop_threshold}}},
            {"d_image",
             {{"image_size", m.d_image.image_size},
              {"in_channels", m.d_image.in_channels},
              {"base_channels", m.d_image.base_channels},
              {"down_block_count", m.d_image.down_block_count},
              {"class_count", m.d_image.class_count},
              {"spectral", m.d_image.spectral}}},
            {"d_report",
             {{"vocab_size", m.d_report.vocab_size},
              {"emb_dim", m.d_report.emb_dim},
              {"hidden", m.d_report.hidden},
              {"ff_hidden", m.d_report.ff_hidden},
              {"spectral", m.d_report.spectral}}},
            {"d_joint",
             {{"image_size", m.d_joint.image_size},
              {"in_channels", m.d_joint.in_channels},
              {"base_channels", m.d_joint.base_channels},
              {"down_block_count", m.d_joint.down_block_count},
              {"vocab_size", m.d_joint.vocab_size},
              {"emb_dim", m.d_joint.emb_dim},
              {"hidden", m.d_joint.hidden},
              {"s_emb_dim", m.d_joint.s_emb_dim},
              {"ff_hidden", m.d_joint.ff_hidden},
              {"spectral", m.d_joint.spectral}}}};
}

inline ModelsConfig models_cfg_from(const nlohmann::json& j) {
    ModelsConfig m;
    const auto& g = j.at("gen");
    m.gen.noise_dim = g.at("noise_dim");
    m.gen.chunk_dim = g.at("chunk_dim");
    m.gen.class_emb_dim = g.at("class_emb_dim");
    m.gen.class_count = g.at("class_count");
    m.gen.base_channels = g.at("base_channels");
    m.gen.image_size = g.at("image_size");
    m.gen.up_block_count = g.at("up_block_count");
    m.gen.spectral = g.at("spectral");
    const auto& e = j.at("encoder");
    m.encoder.image_size = e.at("image_size");
    m.encoder.in_channels = e.at("in_channels");
    m.encoder.base_channels = e.at("base_channels");
    m.encoder.feat_dim = e.at("feat_dim");
    m.encoder.class_count = e.at("class_count");
    const auto& d = j.at("decoder");
    m.decoder.feat_dim = d.at("feat_dim");
    m.decoder.sent_hidden = d.at("sent_hidden");
    m.decoder.topic_hidden = d.at("topic_hidden");
    m.decoder.emb_dim = d.at("emb_dim");
    m.decoder.word_hidden = d.at("word_hidden");
    m.decoder.word_layers = d.at("word_layers");
    m.decoder.vocab_size = d.at("vocab_size");
    m.decoder.t_max = d.at("t_max");
    m.decoder.l_max = d.at("l_max");
    m.decoder.stop_threshold = d.at("stop_threshold");
    const auto& di = j.at("d_image");
    m.d_image.image_size = di.at("image_size");
    m.d_image.in_channels = di.at("in_channels");
    m.d_image.base_channels = di.at("base_channels");
    m.d_image.down_block_count = di.at("down_block_count");
    m.d_image.class_count = di.at("class_count");
    m.d_image.spectral = di.at("spectral");
    const auto& dr = j.at("d_report");
    m.d_report.vocab_size = dr.at("vocab_size");
    m.d_report.emb_dim = dr.at("emb_dim");
    m.d_report.hidden = dr.at("hidden");
    m.d_report.ff_hidden = dr.at("ff_hidden");
    m.d_report.spectral = dr.at("spectral");
    const auto& dj = j.at("d_joint");
    m.d_joint.image_size = dj.at("image_size");
    m.d_joint.in_channels = dj.at("in_channels");
    m.d_joint.base_channels = dj.at("base_channels");
    m.d_joint.down_block_count = dj.at("down_block_count");
    m.d_joint.vocab_size = dj.at("vocab_size");
    m.d_joint.emb_dim = dj.at("emb_dim");
    m.d_joint.hidden = dj.at("hidden");
    m.d_joint.s_emb_dim = dj.at("s_emb_dim");
    m.d_joint.ff_hidden = dj.at("ff_hidden");
    m.d_joint.spectral = dj.at("spectral");
    return m;
}

inline void put_optimizer(Archive& a, const std::string& prefix, const nn::Adam& opt,
                          const std::vector<nn::Parameter*>& ps) {
    a.meta[prefix + "_t"] = opt.t;
    for (size_t i = 0; i < ps.size(); ++i) {
        a.put(prefix + ".m." + ps[i]->name, opt.m[i]);
        a.put(prefix + ".v." + ps[i]->name, opt.v[i]);
    }
}

inline void get_optimizer(const Archive& a, const std::string& prefix, nn::Adam& opt,
                          const std::vector<nn::Parameter*>& ps) {
    opt.t = a.meta.at(prefix + "_t");
    for (size_t i = 0; i < ps.size(); ++i) {
        a.load_into(prefix + ".m." + ps[i]->name, opt.m[i]);
        a.load_into(prefix + ".v." + ps[i]->name, opt.v[i]);
    }
}

} // namespace detail

inline void save_checkpoint(TrainState& st, const std::string& path) {
    Archive a;
    a.meta["format"] = "radsynth.train.v1";
    a.meta["g_step"] = st.g_step;
    a.meta["d_step"] = st.d_step;
    a.meta["rng"] = st.rng.state();
    a.meta["train_config"] = detail::cfg_json(st.cfg);
    a.meta["models_config"] = detail::models_cfg_json(st.models_cfg);
    a.meta["encoder_trained"] = st.models.encoder.trained;
    a.meta["labeled_mask"] = std::vector<int>(st.labeled_mask.begin(), st.labeled_mask.end());
    nlohmann::json fh = nlohmann::json::array();
    for (auto& [s, v] : st.fid_history) fh.push_back({s, v});
    a.meta["fid_history"] = fh;
    for (auto* p : st.models.all_params()) {
        a.put(p->name, p->value);
        if (p->spectral) {
            a.put(p->name + ".sn_u", p->sn_u);
            a.put(p->name + ".sn_v", p->sn_v);
        }
    }
    for (auto& [name, buf] : st.models.g.buffers()) a.put(name, *buf);
    detail::put_optimizer(a, "opt_d", st.opt_d, st.models.d_params());
    detail::put_optimizer(a, "opt_g", st.opt_g, st.models.gf_params(st.cfg.train_encoder));
    a.save(path);
}

inline TrainState load_checkpoint(const std::string& path) {
    Archive a = Archive::load(path);
    if (a.meta.value("format", "") != "radsynth.train.v1")
        throw IoError("not a training checkpoint: " + path);
    TrainState st = make_state(detail::models_cfg_from(a.meta.at("models_config")),
                               detail::cfg_from(a.meta.at("train_config")));
    st.g_step = a.meta.at("g_step");
    st.d_step = a.meta.at("d_step");
    st.rng.set_state(a.meta.at("rng").get<std::string>());
    st.models.encoder.trained = a.meta.value("encoder_trained", false);
    const auto mask = a.meta.value("labeled_mask", std::vector<int>{});
    st.labeled_mask.assign(mask.begin(), mask.end());
    st.fid_history.clear();
    for (const auto& e : a.meta.value("fid_history", nlohmann::json::array()))
        st.fid_history.emplace_back(e[0].get<long long>(), e[1].get<double>());
    for (auto* p : st.models.all_params()) {
        a.load_into(p->name, p->value);
        if (p->spectral) {
            a.load_into(p->name + ".sn_u", p->sn_u);
            a.load_into(p->name + ".sn_v", p->sn_v);
        }
    }
    for (auto& [name, buf] : st.models.g.buffers()) a.load_into(name, *buf);
    detail::get_optimizer(a, "opt_d", st.opt_d, st.models.d_params());
    detail::get_optimizer(a, "opt_g", st.opt_g, st.models.gf_params(st.cfg.train_encoder));
    return st;
}

// Report-model warm start artifact (encoder + decoder only). `step` records
// how many pretraining steps produced it so a later run can resume counting.
inline void save_captioner(eval::Captioner& cap, const ClassifierConfig& enc_cfg,
                           const DecoderConfig& dec_cfg, const std::string& path,
                           long long step = 0) {
    Archive a;
    a.meta["format"] = "radsynth.captioner.v1";
    ModelsConfig probe;
    probe.encoder = enc_cfg;
    probe.decoder = dec_cfg;
    a.meta["models_config"] = detail::models_cfg_json(probe);
    a.meta["encoder_trained"] = cap.encoder.trained;
    a.meta["step"] = step;
    for (auto* p : cap.encoder.params()) a.put(p->name, p->value);
    for (auto* p : cap.decoder.params()) a.put(p->name, p->value);
    a.save(path);
}

inline eval::Captioner load_captioner(const std::string& path, ClassifierConfig* enc_cfg = nullptr,
                                      DecoderConfig* dec_cfg = nullptr,
                                      long long* step = nullptr) {
    Archive a = Archive::load(path);
    if (a.meta.value("format", "") != "radsynth.captioner.v1")
        throw IoError("not a captioner checkpoint: " + path);
    ModelsConfig mc = detail::models_cfg_from(a.meta.at("models_config"));
    eval::Captioner cap;
    Rng rng(0);
    cap.encoder.init(mc.encoder, rng);
    cap.decoder.init(mc.decoder, rng);
    cap.encoder.trained = a.meta.value("encoder_trained", false);
    for (auto* p : cap.encoder.params()) a.load_into(p->name, p->value);
    for (auto* p : cap.decoder.params()) a.load_into(p->name, p->value);
    if (enc_cfg) *enc_cfg = mc.encoder;
    if (dec_cfg) *dec_cfg = mc.decoder;
    if (step) *step = a.meta.value("step", 0LL);
    return cap;
}

// Copy a pretrained report model into the training state (warm start).
inline void warm_start_report_model(TrainState& st, const std::string& captioner_path) {
    ClassifierConfig ec;
    DecoderConfig dc;
    eval::Captioner cap = load_captioner(captioner_path, &ec, &dc);
    auto same_shapes = [](std::vector<nn::Parameter*> a, std::vector<nn::Parameter*> b) {
        if (a.size() != b.size()) return false;
        for (size_t i = 0; i < a.size(); ++i)
            if (!(a[i]->name == b[i]->name && a[i]->value.same_shape(b[i]->value))) return false;
        return true;
    };
    if (!same_shapes(cap.encoder.params(), st.models.encoder.params()) ||
        !same_shapes(cap.decoder.params(), st.models.decoder.params()))
        throw ConfigError("captioner checkpoint does not match the configured report model");
    auto copy_all = [](std::vector<nn::Parameter*> from, std::vector<nn::Parameter*> to) {
        for (size_t i = 0; i < from.size(); ++i)
            std::memcpy(to[i]->value.data(), from[i]->value.data(),
                        sizeof(double) * (size_t)from[i]->value.size());
    };
    copy_all(cap.encoder.params(), st.models.encoder.params());
    copy_all(cap.decoder.params(), st.models.decoder.params());
    st.models.encoder.trained = cap.encoder.trained;
}

// ---------------------------------------------------------------------------
// training driver
// ---------------------------------------------------------------------------

struct TrainHooks {
    const ToyClassifier* fid_extractor = nullptr; // enables the periodic FID probe
    std::function<void(const TrainState&, const LossBundle&, const LossBundle&)> on_cycle;
};

// Alternating loop: d_steps_per_g_step critic updates, then one generator
// update, repeated until total_g_steps. Writes metrics.jsonl and checkpoints
// under out_dir when given one.
inline void train(TrainState& st, const data::Dataset& ds, const std::string& out_dir = "",
                  const TrainHooks& hooks = {}) {
    const TrainConfig& cfg = st.cfg;
    cfg.validate();
    const int n = ds.size();
    if (n < cfg.batch_size) throw ConfigError("dataset smaller than one batch");
    st.dump_dir = out_dir;

    // stratified labeled subset (fractional labels feed only the conditional
    // image critic; every sample still feeds the rotation and report terms)
    {
        std::vector<int> labels((size_t)n);
        for (int i = 0; i < n; ++i) labels[(size_t)i] = ds.label_of(i);
        st.labeled_mask = stratified_labeled_mask(labels, st.models_cfg.gen.class_count,
                                                  cfg.label_fraction, cfg.seed);
    }

    std::ofstream metrics;
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        metrics.open(out_dir + "/metrics.jsonl", std::ios::app);
    }
    auto log_term = [&](long long step, const char* term, double value) {
        if (!metrics.is_open()) return;
        metrics << nlohmann::json{{"step", step}, {"term", term}, {"value", value}}.dump() << "\n";
    };
    auto log_bundle = [&](long long step, const LossBundle& b, bool d_side) {
        if (d_side) {
            log_term(step, "d_image_real", b.d_image_real);
            log_term(step, "d_image_fake", b.d_image_fake);
            log_term(step, "d_report_real", b.d_report_real);
            log_term(step, "d_report_fake", b.d_report_fake);
            log_term(step, "d_joint_real", b.d_joint_real);
            log_term(step, "d_joint_fake", b.d_joint_fake);
            log_term(step, "rotation_ss", b.rotation_ss);
        } else {
            log_term(step, "g_image", b.g_image);
            log_term(step, "g_report", b.g_report);
            log_term(step, "g_joint", b.g_joint);
            log_term(step, "g_rotation_ss", b.g_rotation_ss);
        }
    };

    // fixed FID probe: first fid_probe_size real images
    std::optional<eval::GaussianSummary> probe_real;
    const int probe_n = std::min(cfg.fid_probe_size, n);
    if (hooks.fid_extractor && cfg.fid_every > 0) {
        data::Batch pb = ds.load_batch(eval::detail::iota_range(0, probe_n));
        probe_real = eval::fit_gaussian(eval::extract_features(pb.images, *hooks.fid_extractor));
    }
    auto fid_probe = [&]() {
        if (!probe_real) return;
        Tensor sx =
            eval::detail::synthesize(st.models.g, probe_n, detail::mix_seed(cfg.seed, 0xF1D), 64)
                .first;
        const double d = eval::fid(*probe_real,
                                   eval::fit_gaussian(eval::extract_features(sx, *hooks.fid_extractor)));
        st.fid_history.emplace_back(st.g_step, d);
        log_term(st.g_step, "fid", d);
    };

    // seeded epoch plans; the last partial batch is dropped in training mode
    int epoch = 0;
    size_t pos = 0;
    auto plan = data::batch_plan(n, cfg.batch_size, detail::mix_seed(cfg.seed, 0xE0), true);
    auto next_batch = [&]() {
        if (pos == plan.size()) {
            ++epoch;
            pos = 0;
            plan = data::batch_plan(n, cfg.batch_size,
                                    detail::mix_seed(cfg.seed, 0xE0 + (std::uint64_t)epoch), true);
        }
        return ds.load_batch(plan[pos++]);
    };

    if (probe_real && st.g_step == 0) fid_probe();
    while (st.g_step < cfg.total_g_steps) {
        LossBundle db;
        for (int i = 0; i < cfg.d_steps_per_g_step; ++i) {
            data::Batch b = next_batch();
            db = discriminator_step(st, b);
        }
        data::Batch b = next_batch();
        LossBundle gb = generator_step(st, b);

        const bool at_cadence =
            cfg.metrics_every > 0 && (st.g_step % cfg.metrics_every == 0 ||
                                      st.g_step == cfg.total_g_steps);
        if (at_cadence) {
            log_bundle(st.g_step, db, true);
            log_bundle(st.g_step, gb, false);
        }
        if (probe_real && cfg.fid_every > 0 && st.g_step % cfg.fid_every == 0) fid_probe();
        if (!out_dir.empty() && cfg.checkpoint_every > 0 &&
            st.g_step % cfg.checkpoint_every == 0 && st.g_step < cfg.total_g_steps)
            save_checkpoint(st, out_dir + "/ckpt_" + std::to_string(st.g_step) + ".ckpt");
        if (hooks.on_cycle) hooks.on_cycle(st, db, gb);
    }

    // settle the spectral estimates so archived normalizers match final weights
    nn::power_iterate_all(st.models.all_params(), 200);
    if (probe_real) fid_probe();
    if (!out_dir.empty()) save_checkpoint(st, out_dir + "/final.ckpt");
}

} // namespace radsynth::train
