#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "helpers.hpp"
#include "radsynth/autodiff.hpp"
#include "radsynth/rng.hpp"

using namespace radsynth;
using namespace radsynth::testing;
namespace A = radsynth::ad;

namespace {

// Reduce any output to a scalar via a fixed random weighting so gradients
// reach every element.
A::Var weigh(const A::Var& x, Rng& rng) {
    Tensor w(x.val().shape());
    rng.fill_normal(w);
    return A::dot(x, A::leaf(w));
}

void check_op(const char* name, const GraphFn& fn, std::vector<Tensor> inputs, double tol = 2e-7) {
    Rng rng(99);
    auto rep = fd_check(fn, std::move(inputs), rng);
    INFO(name << ": max rel err " << rep.max_rel_err << " over " << rep.checked << " elements");
    REQUIRE(rep.checked > 0);
    REQUIRE(rep.max_rel_err < tol);
}

} // namespace

TEST_CASE("elementwise op gradients match finite differences", "[autodiff]") {
    Rng rng(7);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({3, 4}, rng);
    Rng wrng(11);
    Tensor w = random_tensor({3, 4}, wrng);
    auto weighted = [&](const A::Var& v) { return A::dot(v, A::leaf(w)); };

    check_op("add", [&](const std::vector<A::Var>& in) { return weighted(A::add(in[0], in[1])); }, {a, b});
    check_op("sub", [&](const std::vector<A::Var>& in) { return weighted(A::sub(in[0], in[1])); }, {a, b});
    check_op("mul", [&](const std::vector<A::Var>& in) { return weighted(A::mul(in[0], in[1])); }, {a, b});
    check_op("add_const",
             [&](const std::vector<A::Var>& in) { return weighted(A::add_const(in[0], 1.7)); }, {a});
    check_op("mul_const",
             [&](const std::vector<A::Var>& in) { return weighted(A::mul_const(in[0], -2.3)); }, {a});
    check_op("neg", [&](const std::vector<A::Var>& in) { return weighted(A::neg(in[0])); }, {a});

    Tensor s({1});
    s[0] = 0.8;
    check_op("mul_bscalar",
             [&](const std::vector<A::Var>& in) { return weighted(A::mul_bscalar(in[0], in[1])); }, {a, s});
}

TEST_CASE("unary op gradients match finite differences", "[autodiff]") {
    Rng rng(13);
    Tensor x = random_tensor({2, 5}, rng, 0.8);
    Tensor pos = random_positive({2, 5}, rng);
    Tensor off = random_tensor_offset({2, 5}, rng, 0.2);
    Rng wrng(17);
    Tensor w = random_tensor({2, 5}, wrng);
    auto weighted = [&](const A::Var& v) { return A::dot(v, A::leaf(w)); };

    check_op("exp", [&](const std::vector<A::Var>& in) { return weighted(A::exp_v(in[0])); }, {x});
    check_op("log", [&](const std::vector<A::Var>& in) { return weighted(A::log_v(in[0])); }, {pos});
    check_op("sqrt", [&](const std::vector<A::Var>& in) { return weighted(A::sqrt_v(in[0])); }, {pos});
    check_op("square", [&](const std::vector<A::Var>& in) { return weighted(A::square(in[0])); }, {x});
    check_op("reciprocal",
             [&](const std::vector<A::Var>& in) { return weighted(A::reciprocal(in[0])); }, {off});
    check_op("tanh", [&](const std::vector<A::Var>& in) { return weighted(A::tanh_v(in[0])); }, {x});
    check_op("sigmoid", [&](const std::vector<A::Var>& in) { return weighted(A::sigmoid_v(in[0])); }, {x});
    check_op("relu", [&](const std::vector<A::Var>& in) { return weighted(A::relu(in[0])); }, {off});
    check_op("softplus", [&](const std::vector<A::Var>& in) { return weighted(A::softplus(in[0])); }, {x});
    check_op("clamp_min",
             [&](const std::vector<A::Var>& in) { return weighted(A::clamp_min_const(in[0], 0.0)); }, {off});
}

TEST_CASE("shape op gradients match finite differences", "[autodiff]") {
    Rng rng(19);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({3, 2}, rng);
    Tensor seq0 = random_tensor({2, 3}, rng);
    Tensor seq1 = random_tensor({2, 3}, rng);
    Tensor nt = random_tensor({2, 4, 3}, rng);
    Rng wrng(23);

    check_op("reshape",
             [&](const std::vector<A::Var>& in) {
                 Rng r(23);
                 return weigh(A::reshape(in[0], {2, 6}), r);
             },
             {a});
    check_op("concat_cols",
             [&](const std::vector<A::Var>& in) {
                 Rng r(29);
                 return weigh(A::concat_cols({in[0], in[1]}), r);
             },
             {a, b});
    check_op("slice_cols",
             [&](const std::vector<A::Var>& in) {
                 Rng r(31);
                 return weigh(A::slice_cols(in[0], 1, 3), r);
             },
             {a});
    check_op("stack_steps",
             [&](const std::vector<A::Var>& in) {
                 Rng r(37);
                 return weigh(A::stack_steps({in[0], in[1]}), r);
             },
             {seq0, seq1});
    check_op("slice_step",
             [&](const std::vector<A::Var>& in) {
                 Rng r(41);
                 return weigh(A::slice_step(in[0], 2), r);
             },
             {nt});
}

TEST_CASE("linear algebra gradients match finite differences", "[autodiff]") {
    Rng rng(43);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 2}, rng);
    Tensor ba = random_tensor({2, 3, 4}, rng);
    Tensor bb = random_tensor({2, 4, 2}, rng);
    Tensor vec = random_tensor({4}, rng);

    check_op("matmul",
             [&](const std::vector<A::Var>& in) {
                 Rng r(47);
                 return weigh(A::matmul(in[0], in[1]), r);
             },
             {a, b});
    check_op("transpose2d",
             [&](const std::vector<A::Var>& in) {
                 Rng r(53);
                 return weigh(A::transpose2d(in[0]), r);
             },
             {a});
    check_op("bmm",
             [&](const std::vector<A::Var>& in) {
                 Rng r(59);
                 return weigh(A::bmm(in[0], in[1]), r);
             },
             {ba, bb});
    check_op("transpose_last2",
             [&](const std::vector<A::Var>& in) {
                 Rng r(61);
                 return weigh(A::transpose_last2(in[0]), r);
             },
             {ba});
    check_op("add_rowvec",
             [&](const std::vector<A::Var>& in) {
                 Rng r(67);
                 return weigh(A::add_rowvec(in[0], in[1]), r);
             },
             {a, vec});
    check_op("sum_rows",
             [&](const std::vector<A::Var>& in) {
                 Rng r(71);
                 return weigh(A::sum_rows(in[0]), r);
             },
             {a});
    check_op("sum_all", [&](const std::vector<A::Var>& in) { return A::sum_all(in[0]); }, {a});
    check_op("mean_all", [&](const std::vector<A::Var>& in) { return A::mean_all(in[0]); }, {a});
    check_op("dot", [&](const std::vector<A::Var>& in) { return A::dot(in[0], in[1]); },
             {a, random_tensor({3, 4}, rng)});
}

TEST_CASE("softmax family gradients match finite differences", "[autodiff]") {
    Rng rng(73);
    Tensor x = random_tensor({4, 6}, rng);
    std::vector<int> tgt{1, 5, 0, 3};
    std::vector<double> mask{1, 0, 1, 1};
    std::vector<double> mask0{0, 0, 0, 0};
    Tensor vecx = random_tensor({5}, rng);

    check_op("softmax_rows",
             [&](const std::vector<A::Var>& in) {
                 Rng r(79);
                 return weigh(A::softmax_rows(in[0]), r);
             },
             {x});
    check_op("log_softmax_rows",
             [&](const std::vector<A::Var>& in) {
                 Rng r(83);
                 return weigh(A::log_softmax_rows(in[0]), r);
             },
             {x});
    check_op("masked_nll",
             [&](const std::vector<A::Var>& in) {
                 return A::masked_nll(A::log_softmax_rows(in[0]), tgt, mask);
             },
             {x});
    check_op("masked_mean",
             [&](const std::vector<A::Var>& in) {
                 return A::masked_mean(in[0], {1, 0, 1, 0, 1});
             },
             {vecx});

    // all-masked edge: value 0, gradient 0
    auto z = A::masked_nll(A::log_softmax_rows(A::leaf(x, true)), tgt, mask0);
    REQUIRE(z.val()[0] == 0.0);
}

TEST_CASE("softmax rows sum to one and log_softmax agrees", "[autodiff]") {
    Rng rng(89);
    Tensor x = random_tensor({5, 7}, rng, 3.0);
    auto sm = A::softmax_rows(A::leaf(x));
    auto lsm = A::log_softmax_rows(A::leaf(x));
    for (int i = 0; i < 5; ++i) {
        double s = 0;
        for (int j = 0; j < 7; ++j) s += sm.val().at({i, j});
        REQUIRE(s == Catch::Approx(1.0).epsilon(1e-12));
        for (int j = 0; j < 7; ++j)
            REQUIRE(std::log(sm.val().at({i, j})) == Catch::Approx(lsm.val().at({i, j})).margin(1e-9));
    }
}

TEST_CASE("embedding gradients scatter-add into the table", "[autodiff]") {
    Rng rng(97);
    Tensor table = random_tensor({6, 3}, rng);
    std::vector<int> ids{2, 0, 2, 5};
    check_op("embedding",
             [&](const std::vector<A::Var>& in) {
                 Rng r(101);
                 return weigh(A::embedding(in[0], ids), r);
             },
             {table});

    // duplicate ids accumulate
    auto t = A::leaf(table, true);
    auto out = A::embedding(t, ids);
    A::backward(A::sum_all(out));
    const Tensor& g = t.node()->grad;
    for (int j = 0; j < 3; ++j) {
        REQUIRE(g.at({2, j}) == Catch::Approx(2.0));
        REQUIRE(g.at({0, j}) == Catch::Approx(1.0));
        REQUIRE(g.at({1, j}) == Catch::Approx(0.0));
    }
}

TEST_CASE("conv2d matches a direct convolution oracle", "[autodiff]") {
    Rng rng(103);
    const int n = 2, ci = 3, h = 5, w = 4, co = 2, k = 3, pad = 1;
    Tensor x = random_tensor({n, ci, h, w}, rng);
    Tensor wt = random_tensor({co, ci, k, k}, rng);
    Tensor bias = random_tensor({co}, rng);

    auto out = A::conv2d(A::leaf(x), A::leaf(wt), A::leaf(bias), pad);
    REQUIRE(out.shape() == std::vector<int>{n, co, h, w});

    for (int i = 0; i < n; ++i)
        for (int c = 0; c < co; ++c)
            for (int yi = 0; yi < h; ++yi)
                for (int xj = 0; xj < w; ++xj) {
                    double acc = bias[c];
                    for (int cc = 0; cc < ci; ++cc)
                        for (int a = 0; a < k; ++a)
                            for (int b2 = 0; b2 < k; ++b2) {
                                const int sy = yi + a - pad, sx = xj + b2 - pad;
                                if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
                                acc += x.at({i, cc, sy, sx}) * wt.at({c, cc, a, b2});
                            }
                    REQUIRE(out.val().at({i, c, yi, xj}) == Catch::Approx(acc).margin(1e-10));
                }
}

TEST_CASE("image op gradients match finite differences", "[autodiff]") {
    Rng rng(107);
    Tensor x = random_tensor({2, 3, 4, 4}, rng);
    Tensor wt = random_tensor({2, 3, 3, 3}, rng, 0.5);
    Tensor w1 = random_tensor({2, 3, 1, 1}, rng, 0.5);
    Tensor bias = random_tensor({2}, rng);
    Tensor chan = random_tensor({3}, rng);
    Tensor gamma = random_tensor({2, 3}, rng);
    Tensor beta = random_tensor({2, 3}, rng);

    check_op("conv2d",
             [&](const std::vector<A::Var>& in) {
                 Rng r(109);
                 return weigh(A::conv2d(in[0], in[1], in[2], 1), r);
             },
             {x, wt, bias});
    check_op("conv2d_1x1_nobias",
             [&](const std::vector<A::Var>& in) {
                 Rng r(113);
                 return weigh(A::conv2d(in[0], in[1], A::Var(), 0), r);
             },
             {x, w1});
    check_op("avg_pool2",
             [&](const std::vector<A::Var>& in) {
                 Rng r(127);
                 return weigh(A::avg_pool2(in[0]), r);
             },
             {x});
    check_op("upsample2",
             [&](const std::vector<A::Var>& in) {
                 Rng r(131);
                 return weigh(A::upsample2(in[0]), r);
             },
             {x});
    check_op("global_sum_pool",
             [&](const std::vector<A::Var>& in) {
                 Rng r(137);
                 return weigh(A::global_sum_pool(in[0]), r);
             },
             {x});
    check_op("channel_mean",
             [&](const std::vector<A::Var>& in) {
                 Rng r(139);
                 return weigh(A::channel_mean(in[0]), r);
             },
             {x});
    check_op("add_chan",
             [&](const std::vector<A::Var>& in) {
                 Rng r(149);
                 return weigh(A::add_chan(in[0], in[1]), r);
             },
             {x, chan});
    check_op("mul_chan",
             [&](const std::vector<A::Var>& in) {
                 Rng r(151);
                 return weigh(A::mul_chan(in[0], in[1]), r);
             },
             {x, chan});
    check_op("affine_nc",
             [&](const std::vector<A::Var>& in) {
                 Rng r(157);
                 return weigh(A::affine_nc(in[0], in[1], in[2]), r);
             },
             {x, gamma, beta});
    check_op("rotate90_batch",
             [&](const std::vector<A::Var>& in) {
                 Rng r(163);
                 return weigh(A::rotate90_batch(in[0], {1, 3}), r);
             },
             {x});
}

TEST_CASE("rotate90 is a group action on pixel indices", "[autodiff]") {
    Rng rng(167);
    Tensor x = random_tensor({1, 3, 8, 8}, rng);
    auto v = A::leaf(x);
    // four quarter turns = identity
    auto r4 = A::rotate90_batch(
        A::rotate90_batch(A::rotate90_batch(A::rotate90_batch(v, {1}), {1}), {1}), {1});
    for (long long i = 0; i < x.size(); ++i) REQUIRE(r4.val()[i] == x[i]);
    // two quarter turns = half turn
    auto r11 = A::rotate90_batch(A::rotate90_batch(v, {1}), {1});
    auto r2 = A::rotate90_batch(v, {2});
    for (long long i = 0; i < x.size(); ++i) REQUIRE(r11.val()[i] == r2.val()[i]);
    // pixel sum conserved
    REQUIRE(A::rotate90_batch(v, {3}).val().sum() == Catch::Approx(x.sum()).epsilon(1e-14));
}

TEST_CASE("avg_pool2 and upsample2 values", "[autodiff]") {
    Tensor x({1, 1, 2, 2});
    x[0] = 1;
    x[1] = 2;
    x[2] = 3;
    x[3] = 4;
    auto p = A::avg_pool2(A::leaf(x));
    REQUIRE(p.val()[0] == Catch::Approx(2.5));
    auto u = A::upsample2(A::leaf(x));
    REQUIRE(u.val().at({0, 0, 0, 0}) == 1.0);
    REQUIRE(u.val().at({0, 0, 0, 1}) == 1.0);
    REQUIRE(u.val().at({0, 0, 1, 1}) == 1.0);
    REQUIRE(u.val().at({0, 0, 2, 3}) == 4.0);
    REQUIRE(u.val().at({0, 0, 3, 3}) == 4.0);
}

TEST_CASE("detach blocks gradient flow", "[autodiff]") {
    Rng rng(173);
    Tensor x = random_tensor({2, 2}, rng);
    auto v = A::leaf(x, true);
    auto loss = A::sum_all(A::mul(A::detach(v), v));
    A::backward(loss);
    const Tensor& g = v.node()->grad;
    // only the live branch contributes: d/dx (c*x) = c = detached value
    for (long long i = 0; i < x.size(); ++i) REQUIRE(g[i] == Catch::Approx(x[i]));
}

TEST_CASE("NoGradGuard suppresses graph recording", "[autodiff]") {
    Rng rng(179);
    Tensor x = random_tensor({2, 2}, rng);
    A::NoGradGuard ng;
    auto v = A::leaf(x, true);
    REQUIRE_FALSE(v.node()->needs_grad);
    auto y = A::sum_all(A::square(v));
    REQUIRE_FALSE(y.node()->needs_grad);
    REQUIRE(y.node()->inputs.empty());
}

TEST_CASE("leaf_bound accumulates into external storage across graphs", "[autodiff]") {
    Tensor value({2});
    value[0] = 3.0;
    value[1] = -1.0;
    Tensor sink({2});
    for (int rep = 0; rep < 2; ++rep) {
        auto v = A::leaf_bound(value, sink);
        A::backward(A::sum_all(A::square(v)));
    }
    REQUIRE(sink[0] == Catch::Approx(12.0)); // 2 * (2*3)
    REQUIRE(sink[1] == Catch::Approx(-4.0));
}

TEST_CASE("diamond-shaped graphs accumulate gradients once per path", "[autodiff]") {
    Tensor x({1});
    x[0] = 2.0;
    auto v = A::leaf(x, true);
    auto sq = A::square(v);
    auto loss = A::add(sq, sq); // 2x^2, d/dx = 4x = 8
    A::backward(loss);
    REQUIRE(v.node()->grad[0] == Catch::Approx(8.0));
}

TEST_CASE("bmm matches per-slice matmul", "[autodiff]") {
    Rng rng(181);
    Tensor a = random_tensor({3, 2, 4}, rng);
    Tensor b = random_tensor({3, 4, 5}, rng);
    auto out = A::bmm(A::leaf(a), A::leaf(b));
    for (int i = 0; i < 3; ++i)
        for (int r = 0; r < 2; ++r)
            for (int c = 0; c < 5; ++c) {
                double acc = 0;
                for (int k = 0; k < 4; ++k) acc += a.at({i, r, k}) * b.at({i, k, c});
                REQUIRE(out.val().at({i, r, c}) == Catch::Approx(acc).margin(1e-12));
            }
}
