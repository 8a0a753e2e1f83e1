#pragma once

// Define-by-run reverse-mode automatic differentiation over Tensor.
// Each op builds a Node holding the result value plus a closure that maps the
// output gradient to input gradients. backward() walks the recorded graph in
// reverse topological order. GEMM-shaped work is delegated to Eigen.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <utility>
#include <vector>

#include "radsynth/tensor.hpp"

namespace radsynth::ad {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const EMat>;
using MMap = Eigen::Map<EMat>;

struct Node {
    Tensor val;
    Tensor grad; // lazily allocated; may alias external storage for leaves
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backfn;
    bool needs_grad = false;
};

class Var {
  public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> n) : n_(std::move(n)) {}
    Node* node() const { return n_.get(); }
    const std::shared_ptr<Node>& ptr() const { return n_; }
    const Tensor& val() const { return n_->val; }
    const std::vector<int>& shape() const { return n_->val.shape(); }
    bool defined() const { return static_cast<bool>(n_); }

  private:
    std::shared_ptr<Node> n_;
};

inline bool& grad_mode_flag() {
    thread_local bool f = true;
    return f;
}
inline bool grad_enabled() { return grad_mode_flag(); }

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = prev; }
};

inline void ensure_grad(Node& n) {
    if (!n.grad.defined()) n.grad = Tensor(n.val.shape());
}

// Gradient buffer of input i of `out`, or nullptr if that input is constant.
inline Tensor* grad_of(Node& out, size_t i) {
    Node& in = *out.inputs[i];
    if (!in.needs_grad) return nullptr;
    ensure_grad(in);
    return &in.grad;
}

inline Var leaf(Tensor value, bool needs_grad = false) {
    auto n = std::make_shared<Node>();
    n->val = std::move(value);
    n->needs_grad = needs_grad && grad_enabled();
    return Var(n);
}

// Leaf whose gradient accumulates into externally owned storage.
inline Var leaf_bound(const Tensor& value, const Tensor& grad_sink) {
    auto n = std::make_shared<Node>();
    n->val = value;
    if (grad_enabled()) {
        n->needs_grad = true;
        n->grad = grad_sink;
    }
    return Var(n);
}

inline Var make_op(Tensor val, std::vector<Var> inputs, std::function<void(Node&)> back) {
    auto n = std::make_shared<Node>();
    n->val = std::move(val);
    if (grad_enabled()) {
        bool ng = false;
        for (const auto& i : inputs) ng = ng || i.node()->needs_grad;
        if (ng) {
            n->needs_grad = true;
            n->inputs.reserve(inputs.size());
            for (const auto& i : inputs) n->inputs.push_back(i.ptr());
            n->backfn = std::move(back);
        }
    }
    return Var(n);
}

inline Var detach(const Var& x) { return leaf(x.val(), false); }

inline void backward(const Var& root) {
    Node* r = root.node();
    if (r->val.size() != 1) throw std::logic_error("backward: root must be scalar");
    if (!r->needs_grad) return;

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    struct Frame {
        Node* n;
        size_t next;
    };
    std::vector<Frame> stack;
    stack.push_back({r, 0});
    seen.insert(r);
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.n->inputs.size()) {
            Node* c = f.n->inputs[f.next++].get();
            if (c->needs_grad && !seen.count(c)) {
                seen.insert(c);
                stack.push_back({c, 0});
            }
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }
    ensure_grad(*r);
    r->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backfn) (*it)->backfn(**it);
    }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

inline void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (!a.val().same_shape(b.val()))
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    Tensor::shape_str(a.shape()) + " vs " + Tensor::shape_str(b.shape()));
}

inline Var add(const Var& a, const Var& b) {
    check_same_shape(a, b, "add");
    Tensor out = a.val().clone();
    const double* pb = b.val().data();
    double* po = out.data();
    for (long long i = 0; i < out.size(); ++i) po[i] += pb[i];
    return make_op(std::move(out), {a, b}, [](Node& o) {
        for (size_t k = 0; k < 2; ++k)
            if (Tensor* g = grad_of(o, k)) {
                double* pg = g->data();
                const double* og = o.grad.data();
                for (long long i = 0; i < o.grad.size(); ++i) pg[i] += og[i];
            }
    });
}

inline Var sub(const Var& a, const Var& b) {
    check_same_shape(a, b, "sub");
    Tensor out = a.val().clone();
    const double* pb = b.val().data();
    double* po = out.data();
    for (long long i = 0; i < out.size(); ++i) po[i] -= pb[i];
    return make_op(std::move(out), {a, b}, [](Node& o) {
        const double* og = o.grad.data();
        if (Tensor* g = grad_of(o, 0)) {
            double* pg = g->data();
            for (long long i = 0; i < o.grad.size(); ++i) pg[i] += og[i];
        }
        if (Tensor* g = grad_of(o, 1)) {
            double* pg = g->data();
            for (long long i = 0; i < o.grad.size(); ++i) pg[i] -= og[i];
        }
    });
}

inline Var mul(const Var& a, const Var& b) {
    check_same_shape(a, b, "mul");
    Tensor out = a.val().clone();
    const double* pb = b.val().data();
    double* po = out.data();
    for (long long i = 0; i < out.size(); ++i) po[i] *= pb[i];
    return make_op(std::move(out), {a, b}, [](Node& o) {
        const double* og = o.grad.data();
        const double* pa = o.inputs[0]->val.data();
        const double* pb2 = o.inputs[1]->val.data();
        if (Tensor* g = grad_of(o, 0)) {
            double* pg = g->data();
            for (long long i = 0; i < o.grad.size(); ++i) pg[i] += og[i] * pb2[i];
        }
        if (Tensor* g = grad_of(o, 1)) {
            double* pg = g->data();
            for (long long i = 0; i < o.grad.size(); ++i) pg[i] += og[i] * pa[i];
        }
    });
}

inline Var add_const(const Var& a, double c) {
    Tensor out = a.val().clone();
    double* po = out.data();
    for (long long i = 0; i < out.size(); ++i) po[i] += c;
    return make_op(std::move(out), {a}, [](Node& o) {
        if (Tensor* g = grad_of(o, 0)) {
            double* pg = g->data();
            const double* og = o.grad.data();
            for (long long i = 0; i < o.grad.size(); ++i) pg[i] += og[i];
        }
    });
}

inline Var mul_const(const Var& a, double c) {
    Tensor out = a.val().clone();
    double* po = out.data();
    for (long long i = 0; i < out.size(); ++i) po[i] *= c;
    return make_op(std::move(out), {a}, [c](Node& o) {
        if (Tensor* g = grad_of(o, 0)) {
            double* pg = g->data();
            const double* og = o.grad.data();
            for (long long i = 0; i < o.grad.size(); ++i) pg[i] += c * og[i];
        }
    });
}

inline Var neg(const Var& a) { return mul_const(a, -1.0); }

// out = a * s where s is a 1-element tensor
inline Var mul_bscalar(const Var& a, const Var& s) {
    if (s.val().size() != 1) throw std::invalid_argument("mul_bscalar: s must be scalar");
    const double sv = s.val()[0];
    Tensor out = a.val().clone();
    double* po = out.data();
    for (long long i = 0; i < out.size(); ++i) po[i] *= sv;
    return make_op(std::move(out), {a, s}, [sv](Node& o) {
        const double* og = o.grad.data();
        if (Tensor* g = grad_of(o, 0)) {
            double* pg = g->data();
            for (long long i = 0; i < o.grad.size(); ++i) pg[i] += sv * og[i];
        }
        if (Tensor* g = grad_of(o, 1)) {
            const double* pa = o.inputs[0]->val.data();
            double acc = 0;
            for (long long i = 0; i < o.grad.size(); ++i) acc += og[i] * pa[i];
            g->data()[0] += acc;
        }
    });
}

template <class F, class DF>
inline Var unary_op(const Var& a, F f, DF df) {
    Tensor out(a.val().shape());
    const double* pa = a.val().data();
    double* po = out.data();
    for (long long i = 0; i < out.size(); ++i) po[i] = f(pa[i]);
    return make_op(std::move(out), {a}, [df](Node& o) {
        if (Tensor* g = grad_of(o, 0)) {
            const double* og = o.grad.data();
            const double* pa2 = o.inputs[0]->val.data();
            const double* po2 = o.val.data();
            double* pg = g->data();
            for (long long i = 0; i < o.grad.size(); ++i) pg[i] += og[i] * df(pa2[i], po2[i]);
        }
    });
}

inline Var exp_v(const Var& a) {
    return unary_op(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}
inline Var log_v(const Var& a) {
    return unary_op(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}
inline Var sqrt_v(const Var& a) {
    return unary_op(a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}
inline Var square(const Var& a) {
    return unary_op(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}
inline Var reciprocal(const Var& a) {
    return unary_op(a, [](double x) { return 1.0 / x; }, [](double, double y) { return -y * y; });
}
inline Var tanh_v(const Var& a) {
    return unary_op(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}
inline Var sigmoid_v(const Var& a) {
    return unary_op(
        a, [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
        [](double, double y) { return y * (1.0 - y); });
}
inline Var relu(const Var& a) {
    // 0.0 * x on the non-positive branch keeps NaN propagating instead of
    // silently flushing it to zero
    return unary_op(a, [](double x) { return x > 0 ? x : 0.0 * x; },
                    [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}
inline Var softplus(const Var& a) {
    return unary_op(
        a, [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x))); },
        [](double x, double) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); });
}
inline Var clamp_min_const(const Var& a, double c) {
    return unary_op(a, [c](double x) { return x < c ? c : x; },
                    [c](double x, double) { return x > c ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

inline Var reshape(const Var& a, std::vector<int> shape) {
    Tensor out = a.val().reshaped(std::move(shape));
    return make_op(std::move(out), {a}, [](Node& o) {
        if (Tensor* g = grad_of(o, 0)) {
            double* pg = g->data();
            const double* og = o.grad.data();
            for (long long i = 0; i < o.grad.size(); ++i) pg[i] += og[i];
        }
    });
}

inline Var concat_cols(const std::vector<Var>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_cols: empty");
    const int m = xs[0].val().dim(0);
    int total = 0;
    std::vector<int> widths;
    for (const auto& x : xs) {
        if (x.val().ndim() != 2 || x.val().dim(0) != m)
            throw std::invalid_argument("concat_cols: expects 2-D inputs with equal row count");
        widths.push_back(x.val().dim(1));
        total += x.val().dim(1);
    }
    Tensor out({m, total});
    double* po = out.data();
    int off = 0;
    for (size_t s = 0; s < xs.size(); ++s) {
        const double* px = xs[s].val().data();
        const int w = widths[s];
        for (int i = 0; i < m; ++i)
            std::memcpy(po + (long long)i * total + off, px + (long long)i * w, sizeof(double) * (size_t)w);
        off += w;
    }
    return make_op(std::move(out), xs, [widths, total, m](Node& o) {
        const double* og = o.grad.data();
        int off2 = 0;
        for (size_t s = 0; s < o.inputs.size(); ++s) {
            const int w = widths[s];
            if (Tensor* g = grad_of(o, s)) {
                double* pg = g->data();
                for (int i = 0; i < m; ++i) {
                    const double* src = og + (long long)i * total + off2;
                    double* dst = pg + (long long)i * w;
                    for (int j = 0; j < w; ++j) dst[j] += src[j];
                }
            }
            off2 += w;
        }
    });
}

inline Var slice_cols(const Var& a, int c0, int c1) {
    const int m = a.val().dim(0), n = a.val().dim(1), w = c1 - c0;
    if (c0 < 0 || c1 > n || w <= 0) throw std::invalid_argument("slice_cols: bad range");
    Tensor out({m, w});
    const double* pa = a.val().data();
    double* po = out.data();
    for (int i = 0; i < m; ++i)
        std::memcpy(po + (long long)i * w, pa + (long long)i * n + c0, sizeof(double) * (size_t)w);
    return make_op(std::move(out), {a}, [m, n, w, c0](Node& o) {
        if (Tensor* g = grad_of(o, 0)) {
            double* pg = g->data();
            const double* og = o.grad.data();
            for (int i = 0; i < m; ++i) {
                double* dst = pg + (long long)i * n + c0;
                const double* src = og + (long long)i * w;
                for (int j = 0; j < w; ++j) dst[j] += src[j];
            }
        }
    });
}

// steps: T tensors of shape [N,D] stacked into [N,T,D]
inline Var stack_steps(const std::vector<Var>& steps) {
    if (steps.empty()) throw std::invalid_argument("stack_steps: empty");
    const int n = steps[0].val().dim(0), d = steps[0].val().dim(1);
    const int t = static_cast<int>(steps.size());
    Tensor out({n, t, d});
    double* po = out.data();
    for (int s = 0; s < t; ++s) {
        const double* px = steps[(size_t)s].val().data();
        for (int i = 0; i < n; ++i)
            std::memcpy(po + ((long long)i * t + s) * d, px + (long long)i * d, sizeof(double) * (size_t)d);
    }
    return make_op(std::move(out), steps, [n, t, d](Node& o) {
        const double* og = o.grad.data();
        for (int s = 0; s < t; ++s) {
            if (Tensor* g = grad_of(o, (size_t)s)) {
                double* pg = g->data();
                for (int i = 0; i < n; ++i) {
                    const double* src = og + ((long long)i * t + s) * d;
                    double* dst = pg + (long long)i * d;
                    for (int j = 0; j < d; ++j) dst[j] += src[j];
                }
            }
        }
    });
}

// x: [N,T,D] -> [N,D] at step t
inline Var slice_step(const Var& x, int t) {
    const int n = x.val().dim(0), tt = x.val().dim(1), d = x.val().dim(2);
    Tensor out({n, d});
    const double* px = x.val().data();
    double* po = out.data();
    for (int i = 0; i < n; ++i)
        std::memcpy(po + (long long)i * d, px + ((long long)i * tt + t) * d, sizeof(double) * (size_t)d);
    return make_op(std::move(out), {x}, [n, tt, d, t](Node& o) {
        if (Tensor* g = grad_of(o, 0)) {
            double* pg = g->data();
            const double* og = o.grad.data();
            for (int i = 0; i < n; ++i) {
                double* dst = pg + ((long long)i * tt + t) * d;
                const double* src = og + (long long)i * d;
                for (int j = 0; j < d; ++j) dst[j] += src[j];
            }
        }
    });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

inline Var matmul(const Var& a, const Var& b) {
    if (a.val().ndim() != 2 || b.val().ndim() != 2 || a.val().dim(1) != b.val().dim(0))
        throw std::invalid_argument("matmul: bad shapes " + Tensor::shape_str(a.shape()) + " x " +
                                    Tensor::shape_str(b.shape()));
    const int m = a.val().dim(0), k = a.val().dim(1), n = b.val().dim(1);
    Tensor out({m, n});
    MMap(out.data(), m, n).noalias() = CMap(a.val().data(), m, k) * CMap(b.val().data(), k, n);
    return make_op(std::move(out), {a, b}, [m, k, n](Node& o) {
        CMap g(o.grad.data(), m, n);
        if (Tensor* ga = grad_of(o, 0))
            MMap(ga->data(), m, k).noalias() += g * CMap(o.inputs[1]->val.data(), k, n).transpose();
        if (Tensor* gb = grad_of(o, 1))
            MMap(gb->data(), k, n).noalias() += CMap(o.inputs[0]->val.data(), m, k).transpose() * g;
    });
}

inline Var transpose2d(const Var& a) {
    const int m = a.val().dim(0), n = a.val().dim(1);
    Tensor out({n, m});
    MMap(out.data(), n, m) = CMap(a.val().data(), m, n).transpose();
    return make_op(std::move(out), {a}, [m, n](Node& o) {
        if (Tensor* g = grad_of(o, 0))
            MMap(g->data(), m, n) += CMap(o.grad.data(), n, m).transpose();
    });
}

inline Var bmm(const Var& a, const Var& b) {
    if (a.val().ndim() != 3 || b.val().ndim() != 3 || a.val().dim(0) != b.val().dim(0) ||
        a.val().dim(2) != b.val().dim(1))
        throw std::invalid_argument("bmm: bad shapes");
    const int bs = a.val().dim(0), m = a.val().dim(1), k = a.val().dim(2), n = b.val().dim(2);
    Tensor out({bs, m, n});
    for (int i = 0; i < bs; ++i)
        MMap(out.data() + (long long)i * m * n, m, n).noalias() =
            CMap(a.val().data() + (long long)i * m * k, m, k) * CMap(b.val().data() + (long long)i * k * n, k, n);
    return make_op(std::move(out), {a, b}, [bs, m, k, n](Node& o) {
        for (int i = 0; i < bs; ++i) {
            CMap g(o.grad.data() + (long long)i * m * n, m, n);
            if (Tensor* ga = grad_of(o, 0))
                MMap(ga->data() + (long long)i * m * k, m, k).noalias() +=
                    g * CMap(o.inputs[1]->val.data() + (long long)i * k * n, k, n).transpose();
            if (Tensor* gb = grad_of(o, 1))
                MMap(gb->data() + (long long)i * k * n, k, n).noalias() +=
                    CMap(o.inputs[0]->val.data() + (long long)i * m * k, m, k).transpose() * g;
        }
    });
}

inline Var transpose_last2(const Var& a) {
    const int bs = a.val().dim(0), m = a.val().dim(1), n = a.val().dim(2);
    Tensor out({bs, n, m});
    for (int i = 0; i < bs; ++i)
        MMap(out.data() + (long long)i * m * n, n, m) =
            CMap(a.val().data() + (long long)i * m * n, m, n).transpose();
    return make_op(std::move(out), {a}, [bs, m, n](Node& o) {
        if (Tensor* g = grad_of(o, 0))
            for (int i = 0; i < bs; ++i)
                MMap(g->data() + (long long)i * m * n, m, n) +=
                    CMap(o.grad.data() + (long long)i * m * n, n, m).transpose();
    });
}

inline Var add_rowvec(const Var& x, const Var& b) {
    const int m = x.val().dim(0), n = x.val().dim(1);
    if (b.val().size() != n) throw std::invalid_argument("add_rowvec: width mismatch");
    Tensor out = x.val().clone();
    double* po = out.data();
    const double* pb = b.val().data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) po[(long long)i * n + j] += pb[j];
    return make_op(std::move(out), {x, b}, [m, n](Node& o) {
        const double* og = o.grad.data();
        if (Tensor* g = grad_of(o, 0)) {
            double* pg = g->data();
            for (long long i = 0; i < o.grad.size(); ++i) pg[i] += og[i];
        }
        if (Tensor* g = grad_of(o, 1)) {
            double* pg = g->data();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) pg[j] += og[(long long)i * n + j];
        }
    });
}

inline Var sum_rows(const Var& x) { // [m,n] -> [m]
    const int m = x.val().dim(0), n = x.val().dim(1);
    Tensor out({m});
    const double* px = x.val().data();
    for (int i = 0; i < m; ++i) {
        double s = 0;
        for (int j = 0; j < n; ++j) s += px[(long long)i * n + j];
        out[i] = s;
    }
    return make_op(std::move(out), {x}, [m, n](Node& o) {
        if (Tensor* g = grad_of(o, 0)) {
            double* pg = g->data();
            const double* og = o.grad.data();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) pg[(long long)i * n + j] += og[i];
        }
    });
}

inline Var sum_all(const Var& x) {
    Tensor out({1});
    out[0] = x.val().sum();
    return make_op(std::move(out), {x}, [](Node& o) {
        if (Tensor* g = grad_of(o, 0)) {
            double* pg = g->data();
            const double s = o.grad[0];
            for (long long i = 0; i < g->size(); ++i) pg[i] += s;
        }
    });
}

inline Var mean_all(const Var& x) {
    const double inv = 1.0 / static_cast<double>(x.val().size());
    return mul_const(sum_all(x), inv);
}

inline Var dot(const Var& a, const Var& b) {
    if (a.val().size() != b.val().size()) throw std::invalid_argument("dot: size mismatch");
    Tensor out({1});
    const double* pa = a.val().data();
    const double* pb = b.val().data();
    double s = 0;
    for (long long i = 0; i < a.val().size(); ++i) s += pa[i] * pb[i];
    out[0] = s;
    return make_op(std::move(out), {a, b}, [](Node& o) {
        const double s = o.grad[0];
        if (Tensor* g = grad_of(o, 0)) {
            double* pg = g->data();
            const double* pb2 = o.inputs[1]->val.data();
            for (long long i = 0; i < g->size(); ++i) pg[i] += s * pb2[i];
        }
        if (Tensor* g = grad_of(o, 1)) {
            double* pg = g->data();
            const double* pa2 = o.inputs[0]->val.data();
            for (long long i = 0; i < g->size(); ++i) pg[i] += s * pa2[i];
        }
    });
}

// ---------------------------------------------------------------------------
// softmax family
// ---------------------------------------------------------------------------

inline Var softmax_rows(const Var& x) {
    const int m = x.val().dim(0), n = x.val().dim(1);
    Tensor out({m, n});
    const double* px = x.val().data();
    double* po = out.data();
    for (int i = 0; i < m; ++i) {
        const double* r = px + (long long)i * n;
        double* w = po + (long long)i * n;
        double mx = r[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, r[j]);
        double z = 0;
        for (int j = 0; j < n; ++j) {
            w[j] = std::exp(r[j] - mx);
            z += w[j];
        }
        const double iz = 1.0 / z;
        for (int j = 0; j < n; ++j) w[j] *= iz;
    }
    return make_op(std::move(out), {x}, [m, n](Node& o) {
        if (Tensor* g = grad_of(o, 0)) {
            double* pg = g->data();
            const double* og = o.grad.data();
            const double* y = o.val.data();
            for (int i = 0; i < m; ++i) {
                const double* gr = og + (long long)i * n;
                const double* yr = y + (long long)i * n;
                double dsum = 0;
                for (int j = 0; j < n; ++j) dsum += gr[j] * yr[j];
                double* dst = pg + (long long)i * n;
                for (int j = 0; j < n; ++j) dst[j] += yr[j] * (gr[j] - dsum);
            }
        }
    });
}

inline Var log_softmax_rows(const Var& x) {
    const int m = x.val().dim(0), n = x.val().dim(1);
    Tensor out({m, n});
    const double* px = x.val().data();
    double* po = out.data();
    for (int i = 0; i < m; ++i) {
        const double* r = px + (long long)i * n;
        double* w = po + (long long)i * n;
        double mx = r[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, r[j]);
        double z = 0;
        for (int j = 0; j < n; ++j) z += std::exp(r[j] - mx);
        const double lse = mx + std::log(z);
        for (int j = 0; j < n; ++j) w[j] = r[j] - lse;
    }
    return make_op(std::move(out), {x}, [m, n](Node& o) {
        if (Tensor* g = grad_of(o, 0)) {
            double* pg = g->data();
            const double* og = o.grad.data();
            const double* y = o.val.data();
            for (int i = 0; i < m; ++i) {
                const double* gr = og + (long long)i * n;
                const double* yr = y + (long long)i * n;
                double gsum = 0;
                for (int j = 0; j < n; ++j) gsum += gr[j];
                double* dst = pg + (long long)i * n;
                for (int j = 0; j < n; ++j) dst[j] += gr[j] - std::exp(yr[j]) * gsum;
            }
        }
    });
}

// Mean negative log-likelihood of target entries over masked rows.
// logp: [m,n] log-probabilities; targets/mask: length m. Zero mask sum -> 0.
inline Var masked_nll(const Var& logp, std::vector<int> targets, std::vector<double> mask) {
    const int m = logp.val().dim(0), n = logp.val().dim(1);
    if ((int)targets.size() != m || (int)mask.size() != m)
        throw std::invalid_argument("masked_nll: length mismatch");
    double denom = 0;
    for (double v : mask) denom += v;
    Tensor out({1});
    if (denom > 0) {
        const double* p = logp.val().data();
        double s = 0;
        for (int i = 0; i < m; ++i)
            if (mask[(size_t)i] != 0.0) s -= mask[(size_t)i] * p[(long long)i * n + targets[(size_t)i]];
        out[0] = s / denom;
    }
    return make_op(std::move(out), {logp},
                   [m, n, targets = std::move(targets), mask = std::move(mask), denom](Node& o) {
                       if (denom <= 0) return;
                       if (Tensor* g = grad_of(o, 0)) {
                           const double s = o.grad[0] / denom;
                           double* pg = g->data();
                           for (int i = 0; i < m; ++i)
                               if (mask[(size_t)i] != 0.0)
                                   pg[(long long)i * n + targets[(size_t)i]] -= s * mask[(size_t)i];
                       }
                   });
}

// Mean of a vector under a 0/1 mask; zero mask sum -> 0.
inline Var masked_mean(const Var& x, std::vector<double> mask) {
    const int m = static_cast<int>(x.val().size());
    if ((int)mask.size() != m) throw std::invalid_argument("masked_mean: length mismatch");
    double denom = 0;
    for (double v : mask) denom += v;
    Tensor out({1});
    if (denom > 0) {
        const double* p = x.val().data();
        double s = 0;
        for (int i = 0; i < m; ++i) s += mask[(size_t)i] * p[i];
        out[0] = s / denom;
    }
    return make_op(std::move(out), {x}, [m, mask = std::move(mask), denom](Node& o) {
        if (denom <= 0) return;
        if (Tensor* g = grad_of(o, 0)) {
            const double s = o.grad[0] / denom;
            double* pg = g->data();
            for (int i = 0; i < m; ++i) pg[i] += s * mask[(size_t)i];
        }
    });
}

// ---------------------------------------------------------------------------
// embeddings
// ---------------------------------------------------------------------------

inline Var embedding(const Var& table, std::vector<int> ids) {
    const int v = table.val().dim(0), d = table.val().dim(1);
    const int t = static_cast<int>(ids.size());
    Tensor out({t, d});
    const double* pe = table.val().data();
    double* po = out.data();
    for (int i = 0; i < t; ++i) {
        const int id = ids[(size_t)i];
        if (id < 0 || id >= v) throw std::out_of_range("embedding: id out of range");
        std::memcpy(po + (long long)i * d, pe + (long long)id * d, sizeof(double) * (size_t)d);
    }
    return make_op(std::move(out), {table}, [d, ids = std::move(ids)](Node& o) {
        if (Tensor* g = grad_of(o, 0)) {
            double* pg = g->data();
            const double* og = o.grad.data();
            for (size_t i = 0; i < ids.size(); ++i) {
                double* dst = pg + (long long)ids[i] * d;
                const double* src = og + (long long)i * d;
                for (int j = 0; j < d; ++j) dst[j] += src[j];
            }
        }
    });
}

// ---------------------------------------------------------------------------
// image ops on [N,C,H,W]
// ---------------------------------------------------------------------------

namespace detail {

inline void im2col(const double* x, int c, int h, int w, int k, int pad, double* col) {
    // col: [h_out*w_out, c*k*k] for stride 1
    const int ho = h + 2 * pad - k + 1, wo = w + 2 * pad - k + 1;
    for (int i = 0; i < ho; ++i) {
        for (int j = 0; j < wo; ++j) {
            double* row = col + ((long long)i * wo + j) * c * k * k;
            for (int cc = 0; cc < c; ++cc) {
                const double* xc = x + (long long)cc * h * w;
                for (int a = 0; a < k; ++a) {
                    const int yi = i + a - pad;
                    double* dst = row + ((long long)cc * k + a) * k;
                    if (yi < 0 || yi >= h) {
                        for (int b = 0; b < k; ++b) dst[b] = 0.0;
                        continue;
                    }
                    for (int b = 0; b < k; ++b) {
                        const int xj = j + b - pad;
                        dst[b] = (xj < 0 || xj >= w) ? 0.0 : xc[(long long)yi * w + xj];
                    }
                }
            }
        }
    }
}

inline void col2im_add(const double* col, int c, int h, int w, int k, int pad, double* x) {
    const int ho = h + 2 * pad - k + 1, wo = w + 2 * pad - k + 1;
    for (int i = 0; i < ho; ++i) {
        for (int j = 0; j < wo; ++j) {
            const double* row = col + ((long long)i * wo + j) * c * k * k;
            for (int cc = 0; cc < c; ++cc) {
                double* xc = x + (long long)cc * h * w;
                for (int a = 0; a < k; ++a) {
                    const int yi = i + a - pad;
                    if (yi < 0 || yi >= h) continue;
                    const double* src = row + ((long long)cc * k + a) * k;
                    for (int b = 0; b < k; ++b) {
                        const int xj = j + b - pad;
                        if (xj >= 0 && xj < w) xc[(long long)yi * w + xj] += src[b];
                    }
                }
            }
        }
    }
}

} // namespace detail

// 2-D convolution, stride 1. x: [N,Ci,H,W], w: [Co,Ci,k,k], b: [Co] or empty.
inline Var conv2d(const Var& x, const Var& w, const Var& b, int pad) {
    const int n = x.val().dim(0), ci = x.val().dim(1), h = x.val().dim(2), wd = x.val().dim(3);
    const int co = w.val().dim(0), k = w.val().dim(2);
    if (w.val().dim(1) != ci || w.val().dim(3) != k)
        throw std::invalid_argument("conv2d: weight/input channel mismatch");
    const int ho = h + 2 * pad - k + 1, wo = wd + 2 * pad - k + 1;
    const int ck2 = ci * k * k, hw = ho * wo;
    const bool bias = b.defined();

    Tensor out({n, co, ho, wo});
    std::vector<double> col((size_t)hw * ck2);
    for (int i = 0; i < n; ++i) {
        detail::im2col(x.val().data() + (long long)i * ci * h * wd, ci, h, wd, k, pad, col.data());
        MMap(out.data() + (long long)i * co * hw, co, hw).noalias() =
            CMap(w.val().data(), co, ck2) * CMap(col.data(), hw, ck2).transpose();
    }
    if (bias) {
        double* po = out.data();
        const double* pb = b.val().data();
        for (int i = 0; i < n; ++i)
            for (int c = 0; c < co; ++c) {
                double* base = po + ((long long)i * co + c) * hw;
                const double bv = pb[c];
                for (int p = 0; p < hw; ++p) base[p] += bv;
            }
    }
    std::vector<Var> ins = bias ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
    return make_op(std::move(out), std::move(ins), [n, ci, h, wd, co, k, pad, ck2, hw, bias](Node& o) {
        std::vector<double> col((size_t)hw * ck2);
        std::vector<double> dcol((size_t)hw * ck2);
        const Tensor& xv = o.inputs[0]->val;
        const Tensor& wv = o.inputs[1]->val;
        Tensor* gx = grad_of(o, 0);
        Tensor* gw = grad_of(o, 1);
        Tensor* gb = bias ? grad_of(o, 2) : nullptr;
        for (int i = 0; i < n; ++i) {
            CMap g(o.grad.data() + (long long)i * co * hw, co, hw);
            if (gw) {
                detail::im2col(xv.data() + (long long)i * ci * h * wd, ci, h, wd, k, pad, col.data());
                MMap(gw->data(), co, ck2).noalias() += g * CMap(col.data(), hw, ck2);
            }
            if (gx) {
                MMap(dcol.data(), hw, ck2).noalias() = g.transpose() * CMap(wv.data(), co, ck2);
                detail::col2im_add(dcol.data(), ci, h, wd, k, pad, gx->data() + (long long)i * ci * h * wd);
            }
            if (gb) {
                double* pgb = gb->data();
                for (int c = 0; c < co; ++c) {
                    const double* row = o.grad.data() + ((long long)i * co + c) * hw;
                    double s = 0;
                    for (int p = 0; p < hw; ++p) s += row[p];
                    pgb[c] += s;
                }
            }
        }
    });
}

inline Var avg_pool2(const Var& x) {
    const int n = x.val().dim(0), c = x.val().dim(1), h = x.val().dim(2), w = x.val().dim(3);
    const int ho = h / 2, wo = w / 2;
    Tensor out({n, c, ho, wo});
    const double* px = x.val().data();
    double* po = out.data();
    for (int nc = 0; nc < n * c; ++nc) {
        const double* xi = px + (long long)nc * h * w;
        double* oi = po + (long long)nc * ho * wo;
        for (int i = 0; i < ho; ++i)
            for (int j = 0; j < wo; ++j)
                oi[(long long)i * wo + j] = 0.25 * (xi[(long long)(2 * i) * w + 2 * j] +
                                                    xi[(long long)(2 * i) * w + 2 * j + 1] +
                                                    xi[(long long)(2 * i + 1) * w + 2 * j] +
                                                    xi[(long long)(2 * i + 1) * w + 2 * j + 1]);
    }
    return make_op(std::move(out), {x}, [n, c, h, w, ho, wo](Node& o) {
        if (Tensor* g = grad_of(o, 0)) {
            double* pg = g->data();
            const double* og = o.grad.data();
            for (int nc = 0; nc < n * c; ++nc) {
                double* gi = pg + (long long)nc * h * w;
                const double* oi = og + (long long)nc * ho * wo;
                for (int i = 0; i < ho; ++i)
                    for (int j = 0; j < wo; ++j) {
                        const double v = 0.25 * oi[(long long)i * wo + j];
                        gi[(long long)(2 * i) * w + 2 * j] += v;
                        gi[(long long)(2 * i) * w + 2 * j + 1] += v;
                        gi[(long long)(2 * i + 1) * w + 2 * j] += v;
                        gi[(long long)(2 * i + 1) * w + 2 * j + 1] += v;
                    }
            }
        }
    });
}

inline Var upsample2(const Var& x) {
    const int n = x.val().dim(0), c = x.val().dim(1), h = x.val().dim(2), w = x.val().dim(3);
    Tensor out({n, c, 2 * h, 2 * w});
    const double* px = x.val().data();
    double* po = out.data();
    for (int nc = 0; nc < n * c; ++nc) {
        const double* xi = px + (long long)nc * h * w;
        double* oi = po + (long long)nc * 4 * h * w;
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                const double v = xi[(long long)i * w + j];
                double* base = oi + (long long)(2 * i) * 2 * w + 2 * j;
                base[0] = v;
                base[1] = v;
                base[2 * w] = v;
                base[2 * w + 1] = v;
            }
    }
    return make_op(std::move(out), {x}, [n, c, h, w](Node& o) {
        if (Tensor* g = grad_of(o, 0)) {
            double* pg = g->data();
            const double* og = o.grad.data();
            for (int nc = 0; nc < n * c; ++nc) {
                double* gi = pg + (long long)nc * h * w;
                const double* oi = og + (long long)nc * 4 * h * w;
                for (int i = 0; i < h; ++i)
                    for (int j = 0; j < w; ++j) {
                        const double* base = oi + (long long)(2 * i) * 2 * w + 2 * j;
                        gi[(long long)i * w + j] += base[0] + base[1] + base[2 * w] + base[2 * w + 1];
                    }
            }
        }
    });
}

inline Var global_sum_pool(const Var& x) { // [N,C,H,W] -> [N,C]
    const int n = x.val().dim(0), c = x.val().dim(1), hw = x.val().dim(2) * x.val().dim(3);
    Tensor out({n, c});
    const double* px = x.val().data();
    for (int nc = 0; nc < n * c; ++nc) {
        const double* xi = px + (long long)nc * hw;
        double s = 0;
        for (int p = 0; p < hw; ++p) s += xi[p];
        out[nc] = s;
    }
    return make_op(std::move(out), {x}, [n, c, hw](Node& o) {
        if (Tensor* g = grad_of(o, 0)) {
            double* pg = g->data();
            const double* og = o.grad.data();
            for (int nc = 0; nc < n * c; ++nc) {
                const double v = og[nc];
                double* gi = pg + (long long)nc * hw;
                for (int p = 0; p < hw; ++p) gi[p] += v;
            }
        }
    });
}

inline Var channel_mean(const Var& x) { // [N,C,H,W] -> [C], mean over N,H,W
    const int n = x.val().dim(0), c = x.val().dim(1), hw = x.val().dim(2) * x.val().dim(3);
    const double inv = 1.0 / ((double)n * hw);
    Tensor out({c});
    const double* px = x.val().data();
    for (int i = 0; i < n; ++i)
        for (int cc = 0; cc < c; ++cc) {
            const double* xi = px + ((long long)i * c + cc) * hw;
            double s = 0;
            for (int p = 0; p < hw; ++p) s += xi[p];
            out[cc] += s * inv;
        }
    return make_op(std::move(out), {x}, [n, c, hw, inv](Node& o) {
        if (Tensor* g = grad_of(o, 0)) {
            double* pg = g->data();
            const double* og = o.grad.data();
            for (int i = 0; i < n; ++i)
                for (int cc = 0; cc < c; ++cc) {
                    const double v = og[cc] * inv;
                    double* gi = pg + ((long long)i * c + cc) * hw;
                    for (int p = 0; p < hw; ++p) gi[p] += v;
                }
        }
    });
}

inline Var add_chan(const Var& x, const Var& v) { // x[N,C,H,W] + v[C]
    const int n = x.val().dim(0), c = x.val().dim(1), hw = x.val().dim(2) * x.val().dim(3);
    if (v.val().size() != c) throw std::invalid_argument("add_chan: channel mismatch");
    Tensor out = x.val().clone();
    double* po = out.data();
    const double* pv = v.val().data();
    for (int i = 0; i < n; ++i)
        for (int cc = 0; cc < c; ++cc) {
            double* oi = po + ((long long)i * c + cc) * hw;
            const double b = pv[cc];
            for (int p = 0; p < hw; ++p) oi[p] += b;
        }
    return make_op(std::move(out), {x, v}, [n, c, hw](Node& o) {
        const double* og = o.grad.data();
        if (Tensor* g = grad_of(o, 0)) {
            double* pg = g->data();
            for (long long i = 0; i < o.grad.size(); ++i) pg[i] += og[i];
        }
        if (Tensor* g = grad_of(o, 1)) {
            double* pg = g->data();
            for (int i = 0; i < n; ++i)
                for (int cc = 0; cc < c; ++cc) {
                    const double* oi = og + ((long long)i * c + cc) * hw;
                    double s = 0;
                    for (int p = 0; p < hw; ++p) s += oi[p];
                    pg[cc] += s;
                }
        }
    });
}

inline Var mul_chan(const Var& x, const Var& v) { // x[N,C,H,W] * v[C]
    const int n = x.val().dim(0), c = x.val().dim(1), hw = x.val().dim(2) * x.val().dim(3);
    if (v.val().size() != c) throw std::invalid_argument("mul_chan: channel mismatch");
    Tensor out = x.val().clone();
    double* po = out.data();
    const double* pv = v.val().data();
    for (int i = 0; i < n; ++i)
        for (int cc = 0; cc < c; ++cc) {
            double* oi = po + ((long long)i * c + cc) * hw;
            const double m = pv[cc];
            for (int p = 0; p < hw; ++p) oi[p] *= m;
        }
    return make_op(std::move(out), {x, v}, [n, c, hw](Node& o) {
        const double* og = o.grad.data();
        const double* px = o.inputs[0]->val.data();
        const double* pv2 = o.inputs[1]->val.data();
        if (Tensor* g = grad_of(o, 0)) {
            double* pg = g->data();
            for (int i = 0; i < n; ++i)
                for (int cc = 0; cc < c; ++cc) {
                    const long long base = ((long long)i * c + cc) * hw;
                    const double m = pv2[cc];
                    for (int p = 0; p < hw; ++p) pg[base + p] += og[base + p] * m;
                }
        }
        if (Tensor* g = grad_of(o, 1)) {
            double* pg = g->data();
            for (int i = 0; i < n; ++i)
                for (int cc = 0; cc < c; ++cc) {
                    const long long base = ((long long)i * c + cc) * hw;
                    double s = 0;
                    for (int p = 0; p < hw; ++p) s += og[base + p] * px[base + p];
                    pg[cc] += s;
                }
        }
    });
}

// y = x * gamma[n,c] + beta[n,c], broadcast over spatial dims
inline Var affine_nc(const Var& x, const Var& gamma, const Var& beta) {
    const int n = x.val().dim(0), c = x.val().dim(1), hw = x.val().dim(2) * x.val().dim(3);
    if (gamma.val().dim(0) != n || gamma.val().dim(1) != c || !gamma.val().same_shape(beta.val()))
        throw std::invalid_argument("affine_nc: bad gamma/beta shapes");
    Tensor out(x.val().shape());
    const double* px = x.val().data();
    const double* pgm = gamma.val().data();
    const double* pbt = beta.val().data();
    double* po = out.data();
    for (int nc = 0; nc < n * c; ++nc) {
        const double g = pgm[nc], b = pbt[nc];
        const double* xi = px + (long long)nc * hw;
        double* oi = po + (long long)nc * hw;
        for (int p = 0; p < hw; ++p) oi[p] = xi[p] * g + b;
    }
    return make_op(std::move(out), {x, gamma, beta}, [n, c, hw](Node& o) {
        const double* og = o.grad.data();
        const double* px2 = o.inputs[0]->val.data();
        const double* pgm2 = o.inputs[1]->val.data();
        if (Tensor* g = grad_of(o, 0)) {
            double* pg = g->data();
            for (int nc = 0; nc < n * c; ++nc) {
                const double m = pgm2[nc];
                const long long base = (long long)nc * hw;
                for (int p = 0; p < hw; ++p) pg[base + p] += og[base + p] * m;
            }
        }
        if (Tensor* g = grad_of(o, 1)) {
            double* pg = g->data();
            for (int nc = 0; nc < n * c; ++nc) {
                const long long base = (long long)nc * hw;
                double s = 0;
                for (int p = 0; p < hw; ++p) s += og[base + p] * px2[base + p];
                pg[nc] += s;
            }
        }
        if (Tensor* g = grad_of(o, 2)) {
            double* pg = g->data();
            for (int nc = 0; nc < n * c; ++nc) {
                const long long base = (long long)nc * hw;
                double s = 0;
                for (int p = 0; p < hw; ++p) s += og[base + p];
                pg[nc] += s;
            }
        }
    });
}

namespace detail {
// CCW quarter-turn rotation of a square [h,h] plane, turns in {0,1,2,3}.
inline void rot_plane(const double* in, int s, int turns, double* out) {
    switch (turns & 3) {
        case 0:
            std::memcpy(out, in, sizeof(double) * (size_t)s * s);
            break;
        case 1: // out[i][j] = in[j][s-1-i]
            for (int i = 0; i < s; ++i)
                for (int j = 0; j < s; ++j) out[(long long)i * s + j] = in[(long long)j * s + (s - 1 - i)];
            break;
        case 2:
            for (int i = 0; i < s; ++i)
                for (int j = 0; j < s; ++j)
                    out[(long long)i * s + j] = in[(long long)(s - 1 - i) * s + (s - 1 - j)];
            break;
        default: // 3: out[i][j] = in[s-1-j][i]
            for (int i = 0; i < s; ++i)
                for (int j = 0; j < s; ++j) out[(long long)i * s + j] = in[(long long)(s - 1 - j) * s + i];
            break;
    }
}
} // namespace detail

// Per-sample CCW quarter-turn rotation of a square [N,C,S,S] batch.
inline Var rotate90_batch(const Var& x, std::vector<int> turns) {
    const int n = x.val().dim(0), c = x.val().dim(1), s = x.val().dim(2);
    if (x.val().dim(3) != s) throw std::invalid_argument("rotate90_batch: rotation requires square image");
    if ((int)turns.size() != n) throw std::invalid_argument("rotate90_batch: turns length mismatch");
    Tensor out(x.val().shape());
    const double* px = x.val().data();
    double* po = out.data();
    for (int i = 0; i < n; ++i)
        for (int cc = 0; cc < c; ++cc)
            detail::rot_plane(px + ((long long)i * c + cc) * s * s, s, turns[(size_t)i],
                              po + ((long long)i * c + cc) * s * s);
    return make_op(std::move(out), {x}, [n, c, s, turns = std::move(turns)](Node& o) {
        if (Tensor* g = grad_of(o, 0)) {
            std::vector<double> tmp((size_t)s * s);
            double* pg = g->data();
            const double* og = o.grad.data();
            for (int i = 0; i < n; ++i)
                for (int cc = 0; cc < c; ++cc) {
                    detail::rot_plane(og + ((long long)i * c + cc) * s * s, s, (4 - turns[(size_t)i]) & 3,
                                      tmp.data());
                    double* dst = pg + ((long long)i * c + cc) * s * s;
                    for (int p = 0; p < s * s; ++p) dst[p] += tmp[p];
                }
        }
    });
}

// ---------------------------------------------------------------------------
// non-differentiable helpers
// ---------------------------------------------------------------------------

inline std::vector<int> argmax_rows(const Tensor& x) {
    const int m = x.dim(0), n = x.dim(1);
    std::vector<int> out((size_t)m);
    const double* p = x.data();
    for (int i = 0; i < m; ++i) {
        const double* r = p + (long long)i * n;
        int best = 0;
        for (int j = 1; j < n; ++j)
            if (r[j] > r[best]) best = j;
        out[(size_t)i] = best;
    }
    return out;
}

} // namespace radsynth::ad
