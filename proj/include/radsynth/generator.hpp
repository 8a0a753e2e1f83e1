#pragma once

// Conditional image generator: hierarchical noise injection (one chunk per
// stage), class-conditional normalization, residual upsampling blocks, one
// self-attention block before the last residual block, and a conditioned
// upsampling output stage ending in tanh.

#include <string>
#include <vector>

#include "radsynth/autodiff.hpp"
#include "radsynth/checkpoint.hpp"
#include "radsynth/errors.hpp"
#include "radsynth/nn.hpp"

namespace radsynth {

struct GeneratorConfig {
    int noise_dim = 120;
    int chunk_dim = 20;
    int class_emb_dim = 128;
    int class_count = 4;
    int base_channels = 64;
    int image_size = 128;   // output is [3, image_size, image_size]
    int up_block_count = 4; // residual upsampling blocks; attention precedes the last
    bool spectral = true;

    int chunk_count() const { return up_block_count + 2; } // initial + blocks + output stage

    void validate() const {
        if (noise_dim < 1 || chunk_dim < 1 || noise_dim % chunk_dim != 0)
            throw ConfigError("noise_dim must be a positive multiple of chunk_dim");
        if (noise_dim / chunk_dim != chunk_count())
            throw ConfigError("noise must split into one chunk per stage (" +
                              std::to_string(chunk_count()) + " chunks)");
        if (image_size != (4 << (up_block_count + 1)))
            throw ConfigError("image_size must equal 4 * 2^(up_block_count+1)");
        if (class_count < 2) throw ConfigError("class_count must be >= 2");
    }
};

// z: [N, noise_dim] -> contiguous chunks [N, chunk_dim], order-preserving.
inline std::vector<ad::Var> split_noise(const ad::Var& z, const GeneratorConfig& cfg) {
    std::vector<ad::Var> chunks;
    for (int c = 0; c < cfg.chunk_count(); ++c)
        chunks.push_back(ad::slice_cols(z, c * cfg.chunk_dim, (c + 1) * cfg.chunk_dim));
    return chunks;
}

struct ResBlockUp {
    nn::CondBatchNorm bn1, bn2;
    nn::Conv2d conv1, conv2, shortcut;

    void init(const std::string& name, int ci, int co, int cond_dim, Rng& rng, bool spectral) {
        bn1.init(name + ".bn1", cond_dim, ci, rng);
        bn2.init(name + ".bn2", cond_dim, co, rng);
        conv1.init(name + ".conv1", ci, co, 3, 1, rng, true, spectral);
        conv2.init(name + ".conv2", co, co, 3, 1, rng, true, spectral);
        shortcut.init(name + ".shortcut", ci, co, 1, 0, rng, true, spectral);
    }

    ad::Var fwd(const ad::Var& x, const ad::Var& cond, bool training) {
        ad::Var h = ad::relu(bn1.fwd(x, cond, training));
        h = conv1.fwd(ad::upsample2(h));
        h = ad::relu(bn2.fwd(h, cond, training));
        h = conv2.fwd(h);
        return ad::add(h, shortcut.fwd(ad::upsample2(x)));
    }

    void collect(std::vector<nn::Parameter*>& out) {
        bn1.collect(out);
        bn2.collect(out);
        conv1.collect(out);
        conv2.collect(out);
        shortcut.collect(out);
    }

    void collect_buffers(std::vector<std::pair<std::string, Tensor*>>& out, const std::string& p) {
        bn1.collect_buffers(out, p + ".bn1");
        bn2.collect_buffers(out, p + ".bn2");
    }
};

// x + gamma * attention(x); gamma starts at zero so the block begins as the
// identity map. Attention weights are a softmax over spatial positions.
struct SelfAttention {
    nn::Conv2d to_q, to_k, to_v;
    nn::Parameter gamma;

    void init(const std::string& name, int channels, Rng& rng, bool spectral) {
        const int inner = std::max(1, channels / 8);
        to_q.init(name + ".q", channels, inner, 1, 0, rng, false, spectral);
        to_k.init(name + ".k", channels, inner, 1, 0, rng, false, spectral);
        to_v.init(name + ".v", channels, channels, 1, 0, rng, false, spectral);
        gamma.alloc(name + ".gamma", {1});
    }

    ad::Var fwd(const ad::Var& x) {
        const int n = x.val().dim(0), c = x.val().dim(1), h = x.val().dim(2), w = x.val().dim(3);
        const int hw = h * w;
        const int inner = to_q.w.value.dim(0);
        ad::Var q = ad::transpose_last2(ad::reshape(to_q.fwd(x), {n, inner, hw})); // [N,HW,inner]
        ad::Var k = ad::reshape(to_k.fwd(x), {n, inner, hw});                      // [N,inner,HW]
        ad::Var scores = ad::bmm(q, k);                                            // [N,HW,HW]
        ad::Var weights =
            ad::reshape(ad::softmax_rows(ad::reshape(scores, {n * hw, hw})), {n, hw, hw});
        ad::Var v = ad::reshape(to_v.fwd(x), {n, c, hw});
        ad::Var attended = ad::bmm(v, ad::transpose_last2(weights)); // [N,C,HW]
        ad::Var o = ad::reshape(attended, {n, c, h, w});
        return ad::add(x, ad::mul_bscalar(o, ad::leaf_bound(gamma.value, gamma.grad)));
    }

    void collect(std::vector<nn::Parameter*>& out) {
        to_q.collect(out);
        to_k.collect(out);
        to_v.collect(out);
        out.push_back(&gamma);
    }
};

class Generator {
  public:
    GeneratorConfig cfg;

    void init(const GeneratorConfig& c, Rng& rng) {
        c.validate();
        cfg = c;
        const int c0 = c.base_channels << c.up_block_count;
        class_emb_.init("g.class_emb", c.class_count, c.class_emb_dim, rng);
        initial_.init("g.initial", c.chunk_dim, 4 * 4 * c0, rng, true, c.spectral);
        blocks_.resize((size_t)c.up_block_count);
        const int cond_dim = c.chunk_dim + c.class_emb_dim;
        for (int i = 0; i < c.up_block_count; ++i)
            blocks_[(size_t)i].init("g.block" + std::to_string(i), c0 >> i, c0 >> (i + 1), cond_dim,
                                    rng, c.spectral);
        // attention on the input of the last block
        attn_.init("g.attn", c.up_block_count >= 1 ? (c0 >> (c.up_block_count - 1)) : c0, rng,
                   c.spectral);
        bn_out_.init("g.bn_out", cond_dim, c.base_channels, rng);
        conv_out_.init("g.conv_out", c.base_channels, 3, 3, 1, rng, true, c.spectral);
    }

    // z: [N, noise_dim], y: one-hot [N, class_count] -> images [N,3,S,S] in [-1,1]
    ad::Var fwd(const ad::Var& z, const ad::Var& y, bool training) {
        if (z.val().dim(0) != y.val().dim(0)) throw ConfigError("z/y batch size mismatch");
        nn::check_one_hot(y.val());
        const int n = z.val().dim(0);
        auto chunks = split_noise(z, cfg);
        ad::Var y_emb = class_emb_.fwd_probs(y); // one-hot row selection
        const int c0 = cfg.base_channels << cfg.up_block_count;
        ad::Var h = ad::reshape(initial_.fwd(chunks[0]), {n, c0, 4, 4});
        for (int i = 0; i < cfg.up_block_count; ++i) {
            if (i == cfg.up_block_count - 1) h = attn_.fwd(h);
            h = blocks_[(size_t)i].fwd(h, ad::concat_cols({chunks[(size_t)i + 1], y_emb}), training);
        }
        ad::Var cond_out = ad::concat_cols({chunks.back(), y_emb});
        h = ad::relu(bn_out_.fwd(h, cond_out, training));
        h = conv_out_.fwd(ad::upsample2(h));
        return ad::tanh_v(h);
    }

    Tensor generate(const Tensor& z, const Tensor& y, bool training = false) {
        ad::NoGradGuard ng;
        return fwd(ad::leaf(z), ad::leaf(y), training).val();
    }

    ad::Var embed_label(const ad::Var& y) {
        nn::check_one_hot(y.val());
        return class_emb_.fwd_probs(y);
    }

    std::vector<nn::Parameter*> params() {
        std::vector<nn::Parameter*> ps;
        class_emb_.collect(ps);
        initial_.collect(ps);
        for (auto& b : blocks_) b.collect(ps);
        attn_.collect(ps);
        bn_out_.collect(ps);
        conv_out_.collect(ps);
        return ps;
    }

    std::vector<std::pair<std::string, Tensor*>> buffers() {
        std::vector<std::pair<std::string, Tensor*>> bufs;
        for (size_t i = 0; i < blocks_.size(); ++i)
            blocks_[i].collect_buffers(bufs, "g.block" + std::to_string(i));
        bn_out_.collect_buffers(bufs, "g.bn_out");
        return bufs;
    }

  private:
    nn::Embedding class_emb_;
    nn::Linear initial_;
    std::vector<ResBlockUp> blocks_;
    SelfAttention attn_;
    nn::CondBatchNorm bn_out_;
    nn::Conv2d conv_out_;
};

} // namespace radsynth
