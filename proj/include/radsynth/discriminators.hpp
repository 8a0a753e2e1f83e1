#pragma once

// The three critics. The image critic is a residual downsampling CNN with a
// projection-style conditional score and a rotation self-supervision head.
// The report critic embeds tokens (hard ids or soft distributions over the
// same table), runs an LSTM, and scores the final state. The joint critic
// concatenates an image embedding with a report embedding and scores the
// pair. All scores are raw logits; losses live with the training loop.

#include <string>
#include <vector>

#include "radsynth/autodiff.hpp"
#include "radsynth/data.hpp"
#include "radsynth/errors.hpp"
#include "radsynth/nn.hpp"

namespace radsynth {

// ReLU -> 3x3 conv -> ReLU -> 3x3 conv -> 2x average pool, with a pooled 1x1
// shortcut; channel width doubles down the stack.
struct ResBlockDown {
    nn::Conv2d conv1, conv2, shortcut;

    void init(const std::string& name, int ci, int co, Rng& rng, bool spectral) {
        conv1.init(name + ".conv1", ci, co, 3, 1, rng, true, spectral);
        conv2.init(name + ".conv2", co, co, 3, 1, rng, true, spectral);
        shortcut.init(name + ".shortcut", ci, co, 1, 0, rng, true, spectral);
    }

    ad::Var fwd(const ad::Var& x) {
        ad::Var h = conv2.fwd(ad::relu(conv1.fwd(ad::relu(x))));
        return ad::add(ad::avg_pool2(h), ad::avg_pool2(shortcut.fwd(x)));
    }

    void collect(std::vector<nn::Parameter*>& out) {
        conv1.collect(out);
        conv2.collect(out);
        shortcut.collect(out);
    }
};

// Shared residual downsampling stack: image -> [N, C_final, s, s] feature map.
struct ImageBackbone {
    std::vector<ResBlockDown> blocks;
    int final_channels = 0, final_side = 0;

    void init(const std::string& name, int image_size, int in_channels, int base, int count,
              Rng& rng, bool spectral) {
        if (count < 1) throw ConfigError("need at least one downsampling block");
        if (image_size != (1 << count) * (image_size >> count) || (image_size >> count) < 1)
            throw ConfigError("image_size must be divisible by 2^down_block_count");
        blocks.resize((size_t)count);
        int ci = in_channels;
        for (int i = 0; i < count; ++i) {
            const int co = base << i;
            blocks[(size_t)i].init(name + ".block" + std::to_string(i), ci, co, rng, spectral);
            ci = co;
        }
        final_channels = ci;
        final_side = image_size >> count;
    }

    ad::Var fwd_map(const ad::Var& x) {
        ad::Var h = x;
        for (auto& b : blocks) h = b.fwd(h);
        return h;
    }

    void collect(std::vector<nn::Parameter*>& out) {
        for (auto& b : blocks) b.collect(out);
    }
};

struct DImageConfig {
    int image_size = 128;
    int in_channels = 3;
    int base_channels = 64;
    int down_block_count = 5;
    int class_count = 4;
    bool spectral = true;

    int feat_dim() const { return base_channels << (down_block_count - 1); }
};

struct ImageCriticOutput {
    ad::Var score;      // [N,1] conditional real/fake logit
    ad::Var feat;       // [N,F] pooled backbone feature
    ad::Var rot_logits; // [N,4]
};

class DImage {
  public:
    DImageConfig cfg;

    void init(const DImageConfig& c, Rng& rng) {
        if (c.class_count < 2) throw ConfigError("class_count must be >= 2");
        cfg = c;
        backbone_.init("di", c.image_size, c.in_channels, c.base_channels, c.down_block_count, rng,
                       c.spectral);
        c_rf_.init("di.rf", c.feat_dim(), 1, rng, true, c.spectral);
        rot_head_.init("di.rot", c.feat_dim(), 4, rng, true, c.spectral);
        proj_w_.alloc("di.proj_w", {c.class_count, c.feat_dim()});
        nn::normal_init(proj_w_.value, rng, 0.02);
        if (c.spectral) nn::sn_attach(proj_w_, rng);
    }

    // pooled-then-rectified backbone feature
    ad::Var feat(const ad::Var& x) { return ad::relu(ad::global_sum_pool(backbone_.fwd_map(x))); }

    ad::Var score_from_feat(const ad::Var& f, const ad::Var& y) {
        nn::check_one_hot(y.val());
        ad::Var class_row = ad::matmul(y, nn::weight_var(proj_w_));      // [N,F]
        ad::Var proj = ad::reshape(ad::sum_rows(ad::mul(f, class_row)), // row dot
                                   {f.val().dim(0), 1});
        return ad::add(c_rf_.fwd(f), proj);
    }

    ad::Var rot_logits_from_feat(const ad::Var& f) { return rot_head_.fwd(f); }

    ImageCriticOutput fwd(const ad::Var& x, const ad::Var& y) {
        ImageCriticOutput out;
        out.feat = feat(x);
        out.score = score_from_feat(out.feat, y);
        out.rot_logits = rot_logits_from_feat(out.feat);
        return out;
    }

    std::vector<nn::Parameter*> params() {
        std::vector<nn::Parameter*> ps;
        backbone_.collect(ps);
        c_rf_.collect(ps);
        ps.push_back(&proj_w_);
        rot_head_.collect(ps);
        return ps;
    }

    nn::Parameter& projection() { return proj_w_; }

  private:
    ImageBackbone backbone_;
    nn::Linear c_rf_, rot_head_;
    nn::Parameter proj_w_;
};

// Rotate each sample by its quarter-turn index, score the rotation head, and
// return the logits plus the cross-entropy against those indices.
struct RotationPrediction {
    ad::Var logits; // [N,4]
    ad::Var ce;     // scalar
};

inline RotationPrediction rotation_predict(DImage& d, const ad::Var& x,
                                           const std::vector<int>& turns) {
    if ((int)turns.size() != x.val().dim(0)) throw ConfigError("rotation batch size mismatch");
    for (int t : turns)
        if (t < 0 || t > 3) throw ConfigError("rotation index must be in 0..3");
    RotationPrediction out;
    out.logits = d.rot_logits_from_feat(d.feat(ad::rotate90_batch(x, turns)));
    out.ce = ad::masked_nll(ad::log_softmax_rows(out.logits), turns,
                            std::vector<double>(turns.size(), 1.0));
    return out;
}

struct DReportConfig {
    int vocab_size = 0;
    int emb_dim = 64;
    int hidden = 64;
    int ff_hidden = 64;
    bool spectral = true;
};

class DReport {
  public:
    DReportConfig cfg;

    void init(const DReportConfig& c, Rng& rng) {
        if (c.vocab_size < 5) throw ConfigError("vocab_size must cover specials plus content");
        cfg = c;
        emb_.init("dr.emb", c.vocab_size, c.emb_dim, rng);
        cell_.init("dr.cell", c.emb_dim, c.hidden, rng, c.spectral);
        ff1_.init("dr.ff1", c.hidden, c.ff_hidden, rng, true, c.spectral);
        ff2_.init("dr.ff2", c.ff_hidden, 1, rng, true, c.spectral);
    }

    // ids: one row per sample, equal lengths (the fixed flattened layout)
    ad::Var score_ids(const std::vector<std::vector<int>>& ids) {
        const int n = (int)ids.size();
        if (n == 0 || ids[0].empty()) throw ConfigError("empty report");
        const int t_len = (int)ids[0].size();
        for (const auto& row : ids)
            if ((int)row.size() != t_len) throw ConfigError("ragged report batch");
        auto st = cell_.zero_state(n);
        std::vector<int> col((size_t)n);
        for (int t = 0; t < t_len; ++t) {
            for (int i = 0; i < n; ++i) col[(size_t)i] = ids[(size_t)i][(size_t)t];
            st = cell_.fwd(emb_.fwd_ids(col), st);
        }
        return head(st.h);
    }

    // probs: [N, T, vocab] token distributions sharing the hard path's table
    ad::Var score_soft(const ad::Var& probs) {
        if (probs.val().ndim() != 3 || probs.val().dim(1) < 1) throw ConfigError("empty report");
        const int n = probs.val().dim(0), t_len = probs.val().dim(1);
        auto st = cell_.zero_state(n);
        for (int t = 0; t < t_len; ++t)
            st = cell_.fwd(emb_.fwd_probs(ad::slice_step(probs, t)), st);
        return head(st.h);
    }

    std::vector<nn::Parameter*> params() {
        std::vector<nn::Parameter*> ps;
        emb_.collect(ps);
        cell_.collect(ps);
        ff1_.collect(ps);
        ff2_.collect(ps);
        return ps;
    }

    nn::LSTMCell& cell() { return cell_; }
    nn::Embedding& embedding() { return emb_; }
    nn::Linear& ff1() { return ff1_; }
    nn::Linear& ff2() { return ff2_; }

  private:
    ad::Var head(const ad::Var& h) { return ff2_.fwd(ad::relu(ff1_.fwd(h))); }

    nn::Embedding emb_;
    nn::LSTMCell cell_;
    nn::Linear ff1_, ff2_;
};

struct DJointConfig {
    int image_size = 128;
    int in_channels = 3;
    int base_channels = 32;
    int down_block_count = 5;
    int vocab_size = 0;
    int emb_dim = 64;
    int hidden = 64;
    int s_emb_dim = 64;
    int ff_hidden = 128;
    bool spectral = true;

    int i_emb_dim() const {
        const int side = image_size >> down_block_count;
        return (base_channels << (down_block_count - 1)) * side * side;
    }
};

class DJoint {
  public:
    DJointConfig cfg;

    void init(const DJointConfig& c, Rng& rng) {
        if (c.vocab_size < 5) throw ConfigError("vocab_size must cover specials plus content");
        cfg = c;
        backbone_.init("dj", c.image_size, c.in_channels, c.base_channels, c.down_block_count, rng,
                       c.spectral);
        emb_.init("dj.emb", c.vocab_size, c.emb_dim, rng);
        cell_.init("dj.cell", c.emb_dim, c.hidden, rng, c.spectral);
        s_lin_.init("dj.s_lin", c.hidden, c.s_emb_dim, rng, true, c.spectral);
        ff1_.init("dj.ff1", c.i_emb_dim() + c.s_emb_dim, c.ff_hidden, rng, true, c.spectral);
        ff2_.init("dj.ff2", c.ff_hidden, 1, rng, true, c.spectral);
    }

    // flattened pre-pooling convolutional feature
    ad::Var image_embedding(const ad::Var& x) {
        ad::Var map = backbone_.fwd_map(x);
        return ad::reshape(map, {x.val().dim(0), cfg.i_emb_dim()});
    }

    ad::Var report_embedding_ids(const std::vector<std::vector<int>>& ids) {
        const int n = (int)ids.size();
        if (n == 0 || ids[0].empty()) throw ConfigError("empty report");
        const int t_len = (int)ids[0].size();
        for (const auto& row : ids)
            if ((int)row.size() != t_len) throw ConfigError("ragged report batch");
        auto st = cell_.zero_state(n);
        std::vector<int> col((size_t)n);
        for (int t = 0; t < t_len; ++t) {
            for (int i = 0; i < n; ++i) col[(size_t)i] = ids[(size_t)i][(size_t)t];
            st = cell_.fwd(emb_.fwd_ids(col), st);
        }
        return s_lin_.fwd(st.h);
    }

    ad::Var report_embedding_soft(const ad::Var& probs) {
        if (probs.val().ndim() != 3 || probs.val().dim(1) < 1) throw ConfigError("empty report");
        const int n = probs.val().dim(0), t_len = probs.val().dim(1);
        auto st = cell_.zero_state(n);
        for (int t = 0; t < t_len; ++t)
            st = cell_.fwd(emb_.fwd_probs(ad::slice_step(probs, t)), st);
        return s_lin_.fwd(st.h);
    }

    ad::Var score_from_embeddings(const ad::Var& i_emb, const ad::Var& s_emb) {
        return ff2_.fwd(ad::relu(ff1_.fwd(ad::concat_cols({i_emb, s_emb}))));
    }

    ad::Var score_ids(const ad::Var& x, const std::vector<std::vector<int>>& ids) {
        return score_from_embeddings(image_embedding(x), report_embedding_ids(ids));
    }

    ad::Var score_soft(const ad::Var& x, const ad::Var& probs) {
        return score_from_embeddings(image_embedding(x), report_embedding_soft(probs));
    }

    std::vector<nn::Parameter*> params() {
        std::vector<nn::Parameter*> ps;
        backbone_.collect(ps);
        emb_.collect(ps);
        cell_.collect(ps);
        s_lin_.collect(ps);
        ff1_.collect(ps);
        ff2_.collect(ps);
        return ps;
    }

    nn::Linear& s_lin() { return s_lin_; }
    nn::Linear& ff1() { return ff1_; }
    nn::Linear& ff2() { return ff2_; }

  private:
    ImageBackbone backbone_;
    nn::Embedding emb_;
    nn::LSTMCell cell_;
    nn::Linear s_lin_, ff1_, ff2_;
};

} // namespace radsynth
