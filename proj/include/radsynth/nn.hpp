#pragma once

// Neural-network building blocks over the autodiff engine: parameters with
// optional spectral normalization, standard layers, and Adam.

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "radsynth/autodiff.hpp"
#include "radsynth/errors.hpp"
#include "radsynth/rng.hpp"
#include "radsynth/tensor.hpp"

namespace radsynth::nn {

// Class labels travel as one-hot rows; anything else is a caller bug.
inline void check_one_hot(const Tensor& y) {
    if (y.ndim() != 2) throw ConfigError("label must be one-hot");
    for (int i = 0; i < y.dim(0); ++i) {
        int ones = 0;
        for (int j = 0; j < y.dim(1); ++j) {
            const double v = y.at({i, j});
            if (v == 1.0)
                ++ones;
            else if (v != 0.0)
                throw ConfigError("label must be one-hot");
        }
        if (ones != 1) throw ConfigError("label must be one-hot");
    }
}

struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    bool spectral = false;
    Tensor sn_u, sn_v; // power-iteration state, unit vectors over the 2-D view

    void alloc(std::string nm, std::vector<int> shape) {
        name = std::move(nm);
        value = Tensor(std::move(shape));
        grad = Tensor(value.shape());
    }
};

// 2-D view of a weight: first dim = rows, remaining dims collapsed.
inline int sn_rows(const Tensor& w) { return w.dim(0); }
inline int sn_cols(const Tensor& w) { return static_cast<int>(w.size() / w.dim(0)); }

inline void normal_init(Tensor& w, Rng& rng, double stddev) { rng.fill_normal(w, 0.0, stddev); }

// Orthogonal init on the out×rest view (gain-scaled, Haar-distributed sign fix).
inline void orthogonal_init(Tensor& w, Rng& rng, double gain = 1.0) {
    const int r = sn_rows(w), c = sn_cols(w);
    const int big = std::max(r, c), small = std::min(r, c);
    Eigen::MatrixXd a(big, small);
    for (int i = 0; i < big; ++i)
        for (int j = 0; j < small; ++j) a(i, j) = rng.normal();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(big, small);
    Eigen::MatrixXd rm = qr.matrixQR().topRows(small).triangularView<Eigen::Upper>();
    for (int j = 0; j < small; ++j)
        if (rm(j, j) < 0) q.col(j) = -q.col(j);
    double* p = w.data();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) p[(long long)i * c + j] = gain * (r >= c ? q(i, j) : q(j, i));
}

inline void sn_attach(Parameter& p, Rng& rng) {
    p.spectral = true;
    p.sn_u = Tensor({sn_rows(p.value)});
    p.sn_v = Tensor({sn_cols(p.value)});
    rng.fill_normal(p.sn_u);
    rng.fill_normal(p.sn_v);
    auto normalize = [](Tensor& t) {
        double n = 0;
        for (long long i = 0; i < t.size(); ++i) n += t[i] * t[i];
        n = std::sqrt(n);
        if (n > 1e-20)
            for (long long i = 0; i < t.size(); ++i) t[i] /= n;
    };
    normalize(p.sn_u);
    // start v at W^T u when the weight is nonzero, random unit otherwise
    const int r = sn_rows(p.value), c = sn_cols(p.value);
    Eigen::VectorXd vt =
        ad::CMap(p.value.data(), r, c).transpose() * Eigen::Map<const Eigen::VectorXd>(p.sn_u.data(), r);
    if (vt.norm() > 1e-20) {
        vt.normalize();
        for (int i = 0; i < c; ++i) p.sn_v[i] = vt(i);
    } else {
        normalize(p.sn_v);
    }
}

// One (or more) power-iteration steps on the stored u,v; returns the current
// spectral-norm estimate u^T W v. Pure data-level, no graph.
inline double power_iterate(Parameter& p, int iters = 1) {
    const int r = sn_rows(p.value), c = sn_cols(p.value);
    ad::CMap w(p.value.data(), r, c);
    Eigen::Map<Eigen::VectorXd> u(p.sn_u.data(), r), v(p.sn_v.data(), c);
    for (int it = 0; it < iters; ++it) {
        Eigen::VectorXd vt = w.transpose() * u;
        double nv = vt.norm();
        if (nv > 1e-20) v = vt / nv;
        Eigen::VectorXd ut = w * v;
        double nu = ut.norm();
        if (nu > 1e-20) u = ut / nu;
    }
    return u.dot(w * v);
}

inline double spectral_sigma(const Parameter& p) {
    const int r = sn_rows(p.value), c = sn_cols(p.value);
    ad::CMap w(p.value.data(), r, c);
    Eigen::Map<const Eigen::VectorXd> u(p.sn_u.data(), r), v(p.sn_v.data(), c);
    return u.dot(w * v);
}

// Differentiable view of a parameter: raw weight, or W/σ̂ with σ̂ = u^T W v
// (u,v treated as constants, so gradient flows through both numerator and σ̂).
inline ad::Var weight_var(Parameter& p) {
    ad::Var w = ad::leaf_bound(p.value, p.grad);
    if (!p.spectral) return w;
    const int r = sn_rows(p.value), c = sn_cols(p.value);
    ad::Var w2 = ad::reshape(w, {r, c});
    ad::Var u = ad::leaf(p.sn_u.reshaped({1, r}));
    ad::Var v = ad::leaf(p.sn_v.reshaped({c, 1}));
    ad::Var sigma = ad::reshape(ad::matmul(ad::matmul(u, w2), v), {1});
    sigma = ad::clamp_min_const(sigma, 1e-12);
    ad::Var scaled = ad::mul_bscalar(w2, ad::reciprocal(sigma));
    return ad::reshape(scaled, p.value.shape());
}

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

struct Linear {
    Parameter w; // [out, in]
    Parameter b; // [out]
    bool has_bias = true;

    void init(const std::string& name, int in, int out, Rng& rng, bool bias = true,
              bool spectral = false, double gain = 1.0) {
        has_bias = bias;
        w.alloc(name + ".w", {out, in});
        orthogonal_init(w.value, rng, gain);
        if (spectral) sn_attach(w, rng);
        if (has_bias) b.alloc(name + ".b", {out});
    }

    ad::Var fwd(const ad::Var& x) { // x: [N, in]
        ad::Var out = ad::matmul(x, ad::transpose2d(weight_var(w)));
        if (has_bias) out = ad::add_rowvec(out, ad::leaf_bound(b.value, b.grad));
        return out;
    }

    void collect(std::vector<Parameter*>& out) {
        out.push_back(&w);
        if (has_bias) out.push_back(&b);
    }
};

struct Conv2d {
    Parameter w; // [co, ci, k, k]
    Parameter b; // [co]
    bool has_bias = true;
    int pad = 0;

    void init(const std::string& name, int ci, int co, int k, int padding, Rng& rng,
              bool bias = true, bool spectral = false) {
        has_bias = bias;
        pad = padding;
        w.alloc(name + ".w", {co, ci, k, k});
        orthogonal_init(w.value, rng);
        if (spectral) sn_attach(w, rng);
        if (has_bias) b.alloc(name + ".b", {co});
    }

    ad::Var fwd(const ad::Var& x) {
        return ad::conv2d(x, weight_var(w), has_bias ? ad::leaf_bound(b.value, b.grad) : ad::Var(), pad);
    }

    void collect(std::vector<Parameter*>& out) {
        out.push_back(&w);
        if (has_bias) out.push_back(&b);
    }
};

struct Embedding {
    Parameter table; // [count, dim]

    void init(const std::string& name, int count, int dim, Rng& rng) {
        table.alloc(name + ".table", {count, dim});
        orthogonal_init(table.value, rng);
    }

    ad::Var fwd_ids(const std::vector<int>& ids) {
        return ad::embedding(ad::leaf_bound(table.value, table.grad), ids);
    }

    // probs: [N, count] rows summing to 1 -> expected embeddings [N, dim]
    ad::Var fwd_probs(const ad::Var& probs) {
        return ad::matmul(probs, ad::leaf_bound(table.value, table.grad));
    }

    void collect(std::vector<Parameter*>& out) { out.push_back(&table); }
};

// Batch normalization whose per-channel scale/shift are affine functions of a
// conditioning vector; batch statistics at train time, running averages at eval.
struct CondBatchNorm {
    Linear to_gain, to_bias; // cond_dim -> channels
    Tensor running_mean, running_var;
    int channels = 0;
    double momentum = 0.1;
    double eps = 1e-5;

    void init(const std::string& name, int cond_dim, int ch, Rng& rng) {
        channels = ch;
        to_gain.init(name + ".gain", cond_dim, ch, rng, true, false, 0.1);
        to_bias.init(name + ".bias", cond_dim, ch, rng, true, false, 0.1);
        running_mean = Tensor({ch});
        running_var = Tensor::full({ch}, 1.0);
    }

    ad::Var fwd(const ad::Var& x, const ad::Var& cond, bool training) {
        ad::Var xhat;
        if (training) {
            ad::Var mean = ad::channel_mean(x);
            ad::Var centered = ad::add_chan(x, ad::neg(mean));
            ad::Var var = ad::channel_mean(ad::square(centered));
            xhat = ad::mul_chan(centered, ad::reciprocal(ad::sqrt_v(ad::add_const(var, eps))));
            const long long n = (long long)x.val().dim(0) * x.val().dim(2) * x.val().dim(3);
            const double unbias = n > 1 ? (double)n / (double)(n - 1) : 1.0;
            for (int c = 0; c < channels; ++c) {
                running_mean[c] = (1 - momentum) * running_mean[c] + momentum * mean.val()[c];
                running_var[c] = (1 - momentum) * running_var[c] + momentum * var.val()[c] * unbias;
            }
        } else {
            Tensor rs({channels});
            for (int c = 0; c < channels; ++c) rs[c] = 1.0 / std::sqrt(running_var[c] + eps);
            xhat = ad::mul_chan(ad::add_chan(x, ad::neg(ad::leaf(running_mean))), ad::leaf(rs));
        }
        ad::Var gamma = ad::add_const(to_gain.fwd(cond), 1.0); // [N, C]
        ad::Var beta = to_bias.fwd(cond);
        return ad::affine_nc(xhat, gamma, beta);
    }

    void collect(std::vector<Parameter*>& out) {
        to_gain.collect(out);
        to_bias.collect(out);
    }

    void collect_buffers(std::vector<std::pair<std::string, Tensor*>>& out, const std::string& prefix) {
        out.emplace_back(prefix + ".running_mean", &running_mean);
        out.emplace_back(prefix + ".running_var", &running_var);
    }
};

struct LSTMCell {
    Linear wx; // in -> 4H, with bias
    Linear wh; // H -> 4H, no bias
    int hidden = 0;

    void init(const std::string& name, int in, int h, Rng& rng, bool spectral = false) {
        hidden = h;
        wx.init(name + ".wx", in, 4 * h, rng, true, spectral);
        wh.init(name + ".wh", h, 4 * h, rng, false, spectral);
        // forget-gate bias starts at 1
        for (int i = h; i < 2 * h; ++i) wx.b.value[i] = 1.0;
    }

    struct State {
        ad::Var h, c;
    };

    State zero_state(int batch) const {
        return {ad::leaf(Tensor({batch, hidden})), ad::leaf(Tensor({batch, hidden}))};
    }

    State fwd(const ad::Var& x, const State& s) {
        ad::Var z = ad::add(wx.fwd(x), wh.fwd(s.h));
        const int h = hidden;
        ad::Var i = ad::sigmoid_v(ad::slice_cols(z, 0, h));
        ad::Var f = ad::sigmoid_v(ad::slice_cols(z, h, 2 * h));
        ad::Var g = ad::tanh_v(ad::slice_cols(z, 2 * h, 3 * h));
        ad::Var o = ad::sigmoid_v(ad::slice_cols(z, 3 * h, 4 * h));
        ad::Var c = ad::add(ad::mul(f, s.c), ad::mul(i, g));
        return {ad::mul(o, ad::tanh_v(c)), c};
    }

    void collect(std::vector<Parameter*>& out) {
        wx.collect(out);
        wh.collect(out);
    }
};

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

struct Adam {
    double lr = 1e-4, beta1 = 0.0, beta2 = 0.999, eps = 1e-8;
    long long t = 0;
    std::vector<Tensor> m, v;

    void init(const std::vector<Parameter*>& ps) {
        t = 0;
        m.clear();
        v.clear();
        for (const auto* p : ps) {
            m.emplace_back(p->value.shape());
            v.emplace_back(p->value.shape());
        }
    }

    void zero_grad(const std::vector<Parameter*>& ps) {
        for (auto* p : ps) p->grad.fill(0.0);
    }

    void step(const std::vector<Parameter*>& ps) {
        if (m.size() != ps.size()) throw std::logic_error("Adam: not initialized for this parameter set");
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, (double)t);
        const double bc2 = 1.0 - std::pow(beta2, (double)t);
        for (size_t k = 0; k < ps.size(); ++k) {
            Parameter& p = *ps[k];
            double* pm = m[k].data();
            double* pv = v[k].data();
            double* pw = p.value.data();
            const double* pg = p.grad.data();
            for (long long i = 0; i < p.value.size(); ++i) {
                pm[i] = beta1 * pm[i] + (1 - beta1) * pg[i];
                pv[i] = beta2 * pv[i] + (1 - beta2) * pg[i] * pg[i];
                pw[i] -= lr * (pm[i] / bc1) / (std::sqrt(pv[i] / bc2) + eps);
            }
        }
    }
};

// Hash of parameter values in declaration order (step-isolation checks).
inline std::uint64_t params_hash(const std::vector<Parameter*>& ps) {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto* p : ps) {
        h = fnv1a64(p->name.data(), p->name.size(), h);
        h = fnv1a64(p->value.data(), sizeof(double) * (size_t)p->value.size(), h);
    }
    return h;
}

inline long long params_count(const std::vector<Parameter*>& ps) {
    long long n = 0;
    for (const auto* p : ps) n += p->value.size();
    return n;
}

inline void power_iterate_all(const std::vector<Parameter*>& ps, int iters = 1) {
    for (auto* p : ps)
        if (p->spectral) power_iterate(*p, iters);
}

} // namespace radsynth::nn
