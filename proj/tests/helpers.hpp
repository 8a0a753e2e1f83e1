#pragma once

// Shared test utilities: finite-difference gradient checking against the
// autodiff engine, plus small comparison helpers.

#include <cmath>
#include <functional>
#include <vector>

#include "radsynth/autodiff.hpp"
#include "radsynth/nn.hpp"
#include "radsynth/rng.hpp"
#include "radsynth/tensor.hpp"

namespace radsynth::testing {

inline double rel_err(double a, double b) {
    return std::fabs(a - b) / std::max({1.0, std::fabs(a), std::fabs(b)});
}

// Builds the scalar loss from differentiable leaves created over `inputs`
// (storage is shared, so perturbing an input re-evaluates the function).
using GraphFn = std::function<ad::Var(const std::vector<ad::Var>&)>;

struct FdCheck {
    double max_rel_err = 0.0;
    long long checked = 0;
};

inline double eval_forward(const GraphFn& fn, const std::vector<Tensor>& inputs) {
    ad::NoGradGuard ng;
    std::vector<ad::Var> leaves;
    leaves.reserve(inputs.size());
    for (const auto& t : inputs) leaves.push_back(ad::leaf(t));
    return fn(leaves).val()[0];
}

// Central-difference check of d(loss)/d(input element) for a sample of
// elements from every input tensor.
inline FdCheck fd_check(const GraphFn& fn, std::vector<Tensor> inputs, Rng& rng,
                        int max_elems_per_input = 24, double h = 1e-5) {
    std::vector<Tensor> analytic;
    {
        std::vector<ad::Var> leaves;
        leaves.reserve(inputs.size());
        for (const auto& t : inputs) leaves.push_back(ad::leaf(t, true));
        ad::Var loss = fn(leaves);
        ad::backward(loss);
        for (const auto& l : leaves) {
            ad::ensure_grad(*l.node());
            analytic.push_back(l.node()->grad.clone());
        }
    }
    FdCheck rep;
    for (size_t k = 0; k < inputs.size(); ++k) {
        Tensor& t = inputs[k];
        const long long n = t.size();
        std::vector<long long> idx;
        if (n <= max_elems_per_input) {
            for (long long i = 0; i < n; ++i) idx.push_back(i);
        } else {
            for (int i = 0; i < max_elems_per_input; ++i)
                idx.push_back((long long)rng.uniform_u64((std::uint64_t)n));
        }
        for (long long i : idx) {
            const double orig = t[i];
            t[i] = orig + h;
            const double fp = eval_forward(fn, inputs);
            t[i] = orig - h;
            const double fm = eval_forward(fn, inputs);
            t[i] = orig;
            const double fd = (fp - fm) / (2.0 * h);
            rep.max_rel_err = std::max(rep.max_rel_err, rel_err(analytic[k][i], fd));
            ++rep.checked;
        }
    }
    return rep;
}

// Finite-difference check of d(loss)/d(parameter element) for whole networks.
// `fn` builds a fresh scalar-loss graph from the networks' current parameter
// values; parameters are perturbed in place between evaluations.
inline FdCheck param_fd_check(const std::function<ad::Var()>& fn,
                              const std::vector<nn::Parameter*>& ps, Rng& rng,
                              int elems_per_param = 2, double h = 1e-5) {
    for (auto* p : ps) p->grad.fill(0.0);
    {
        ad::Var loss = fn();
        ad::backward(loss);
    }
    auto eval = [&]() {
        ad::NoGradGuard ng;
        return fn().val()[0];
    };
    FdCheck rep;
    for (auto* p : ps) {
        const long long n = p->value.size();
        for (int e = 0; e < elems_per_param; ++e) {
            const long long i = n <= elems_per_param ? (e < n ? e : -1)
                                                     : (long long)rng.uniform_u64((std::uint64_t)n);
            if (i < 0) break;
            const double orig = p->value[i];
            p->value[i] = orig + h;
            const double fp = eval();
            p->value[i] = orig - h;
            const double fm = eval();
            p->value[i] = orig;
            const double fd = (fp - fm) / (2.0 * h);
            rep.max_rel_err = std::max(rep.max_rel_err, rel_err(p->grad[i], fd));
            ++rep.checked;
        }
    }
    return rep;
}

inline Tensor random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    rng.fill_normal(t, 0.0, scale);
    return t;
}

// Random tensor bounded away from zero (for ops with kinks or poles there).
inline Tensor random_tensor_offset(std::vector<int> shape, Rng& rng, double offset) {
    Tensor t(std::move(shape));
    rng.fill_normal(t, 0.0, 1.0);
    for (long long i = 0; i < t.size(); ++i) {
        double v = t[i];
        t[i] = v >= 0 ? v + offset : v - offset;
    }
    return t;
}

inline Tensor random_positive(std::vector<int> shape, Rng& rng, double lo = 0.5, double hi = 2.0) {
    Tensor t(std::move(shape));
    for (long long i = 0; i < t.size(); ++i) t[i] = lo + (hi - lo) * rng.uniform();
    return t;
}

} // namespace radsynth::testing
