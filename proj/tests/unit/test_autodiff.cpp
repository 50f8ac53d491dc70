#include <doctest.h>

#include <cmath>
#include <random>

#include "roadfuse/autodiff.hpp"
#include "roadfuse/error.hpp"
#include "support.hpp"

using namespace roadfuse;
using test::random_tensor;

namespace {

// Direct loop cross-correlation with zero padding.
Tensor<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>* b, int stride,
                           int pad, int dil) {
    const int k = w.h();
    const int ho = (x.h() + 2 * pad - dil * (k - 1) - 1) / stride + 1;
    const int wo = (x.w() + 2 * pad - dil * (k - 1) - 1) / stride + 1;
    Tensor<double> y(Shape4{x.n(), w.n(), ho, wo});
    for (int n = 0; n < x.n(); ++n) {
        for (int co = 0; co < w.n(); ++co) {
            for (int i = 0; i < ho; ++i) {
                for (int j = 0; j < wo; ++j) {
                    double s = b ? b->at(0, co, 0, 0) : 0.0;
                    for (int ci = 0; ci < x.c(); ++ci) {
                        for (int u = 0; u < k; ++u) {
                            for (int v = 0; v < k; ++v) {
                                const int r = i * stride - pad + u * dil, c = j * stride - pad + v * dil;
                                if (r < 0 || c < 0 || r >= x.h() || c >= x.w()) continue;
                                s += w.at(co, ci, u, v) * x.at(n, ci, r, c);
                            }
                        }
                    }
                    y.at(n, co, i, j) = s;
                }
            }
        }
    }
    return y;
}

double dot(const Tensor<double>& a, const Tensor<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace

TEST_SUITE("autodiff") {
    TEST_CASE("conv output size") {
        CHECK(conv_output_size(64, 3, ConvOptions::same(3)) == 64);
        CHECK(conv_output_size(64, 3, ConvOptions::same(3, 4)) == 64);
        CHECK(conv_output_size(10, 3, {2, 1, 1}) == 5);
        CHECK(conv_output_size(5, 3, {1, 0, 2}) == 1);
    }

    TEST_CASE("1x1 unit kernel is the identity") {
        std::mt19937_64 rng(1);
        const auto x = random_tensor<double>({2, 1, 5, 6}, rng);
        Graph<double> g;
        Var y = conv2d(g, g.input(x), g.input(Tensor<double>({1, 1, 1, 1}, 1.0)), Var{});
        CHECK(g.value(y) == x);
        Var t = conv2d_transpose(g, g.input(x), g.input(Tensor<double>({1, 1, 1, 1}, 1.0)), Var{}, 1);
        CHECK(g.value(t) == x);
    }

    TEST_CASE("conv matches the loop oracle") {
        std::mt19937_64 rng(2);
        struct Case {
            int stride, pad, dil, k;
        };
        for (auto [stride, pad, dil, k] : {Case{1, 1, 1, 3}, Case{2, 1, 1, 3}, Case{1, 2, 2, 3}, Case{1, 0, 1, 1},
                                          Case{1, 8, 8, 3}, Case{2, 0, 1, 2}}) {
            const auto x = random_tensor<double>({2, 3, 11, 9}, rng);
            const auto w = random_tensor<double>({4, 3, k, k}, rng);
            const auto b = random_tensor<double>({1, 4, 1, 1}, rng);
            Graph<double> g;
            Var y = conv2d(g, g.input(x), g.input(w), g.input(b), ConvOptions{stride, pad, dil});
            const auto want = conv_oracle(x, w, &b, stride, pad, dil);
            REQUIRE(g.value(y).shape() == want.shape());
            for (std::size_t i = 0; i < want.size(); ++i) CHECK(g.value(y)[i] == doctest::Approx(want[i]).epsilon(1e-12));
        }
    }

    TEST_CASE("3x3 kernel on a 3x3 input at the centre is a dot product") {
        std::mt19937_64 rng(3);
        const auto x = random_tensor<double>({1, 1, 3, 3}, rng);
        const auto w = random_tensor<double>({1, 1, 3, 3}, rng);
        Graph<double> g;
        Var y = conv2d(g, g.input(x), g.input(w), Var{});
        REQUIRE(g.value(y).shape() == Shape4{1, 1, 1, 1});
        CHECK(g.value(y)[0] == doctest::Approx(dot(x, w)));
    }

    TEST_CASE("dilation 2 spans 5 pixels") {
        Tensor<double> x({1, 1, 5, 5});
        x.at(0, 0, 0, 0) = 1.0;
        x.at(0, 0, 4, 4) = 10.0;
        x.at(0, 0, 1, 1) = 100.0;  // skipped by the dilated taps
        Tensor<double> w({1, 1, 3, 3}, 1.0);
        Graph<double> g;
        Var y = conv2d(g, g.input(x), g.input(w), Var{}, ConvOptions{1, 0, 2});
        REQUIRE(g.value(y).shape() == Shape4{1, 1, 1, 1});
        CHECK(g.value(y)[0] == 11.0);
    }

    TEST_CASE("transpose conv is the adjoint of conv") {
        std::mt19937_64 rng(4);
        for (auto [stride, pad, k, side] : {std::tuple{1, 0, 3, 8}, {2, 0, 2, 8}, {2, 1, 3, 9}, {1, 1, 3, 8}}) {
            const auto w = random_tensor<double>({3, 2, k, k}, rng);  // conv: 2 -> 3 channels
            const auto x = random_tensor<double>({2, 2, side, side}, rng);
            Graph<double> g;
            Var cx = conv2d(g, g.input(x), g.input(w), Var{}, ConvOptions{stride, pad, 1});
            const auto y = random_tensor<double>(g.value(cx).shape(), rng);
            Var ty = conv2d_transpose(g, g.input(y), g.input(w), Var{}, stride, pad);
            REQUIRE(g.value(ty).shape() == x.shape());
            CHECK(std::abs(dot(g.value(cx), y) - dot(x, g.value(ty))) < 1e-6);
        }
    }

    TEST_CASE("stride 2 uniform transpose kernel upsamples by repetition") {
        Tensor<double> x({1, 1, 2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
        Graph<double> g;
        Var y = conv2d_transpose(g, g.input(x), g.input(Tensor<double>({1, 1, 2, 2}, 1.0)), Var{}, 2);
        const auto& v = g.value(y);
        REQUIRE(v.shape() == Shape4{1, 1, 4, 6});
        for (int i = 0; i < 4; ++i) {
            for (int j = 0; j < 6; ++j) CHECK(v.at(0, 0, i, j) == x.at(0, 0, i / 2, j / 2));
        }
    }

    TEST_CASE("elementwise ops") {
        Graph<double> g;
        Var x = g.input(Tensor<double>({1, 1, 1, 3}, std::vector<double>{-1, 0, 2}));
        const auto& r = g.value(relu(g, x));
        CHECK(r[0] == 0.0);
        CHECK(r[2] == 2.0);
        CHECK(g.value(sigmoid(g, x))[1] == 0.5);

        Var a = g.input(Tensor<double>({1, 4, 2, 2}, 1.0));
        Var b = g.input(Tensor<double>({1, 1, 2, 2}, 2.0));
        Var c = concat_channels(g, a, b);
        CHECK(g.value(c).shape() == Shape4{1, 5, 2, 2});
        CHECK(g.value(c).at(0, 4, 1, 1) == 2.0);
        CHECK(g.value(c).at(0, 3, 1, 1) == 1.0);
        CHECK_THROWS_AS(add(g, a, b), ShapeError);
        Var wrong = g.input(Tensor<double>({1, 1, 3, 2}));
        CHECK_THROWS_AS(concat_channels(g, a, wrong), ShapeError);
    }

    TEST_CASE("maxpool routes the gradient to the first maximum") {
        Tensor<double> x({1, 1, 2, 4}, std::vector<double>{1, 3, 5, 5, 3, 2, 5, 1});
        Graph<double> g;
        Var xv = g.input(x);
        Var y = maxpool2(g, xv);
        CHECK(g.value(y)[0] == 3.0);
        CHECK(g.value(y)[1] == 5.0);
        g.backward(y, Tensor<double>(g.value(y).shape(), 1.0));
        const auto& gx = g.grad(xv);
        CHECK(gx[1] == 1.0);
        CHECK(gx[4] == 0.0);
        CHECK(gx[2] == 1.0);  // first 5 in scan order
        CHECK(gx[3] == 0.0);
        CHECK(gx[6] == 0.0);
    }

    TEST_CASE("add and concat backward") {
        std::mt19937_64 rng(5);
        Graph<double> g;
        Var a = g.input(random_tensor<double>({1, 2, 3, 3}, rng));
        Var b = g.input(random_tensor<double>({1, 2, 3, 3}, rng));
        Var s = add(g, a, b);
        const auto seed = random_tensor<double>(g.value(s).shape(), rng);
        g.backward(s, seed);
        CHECK(g.grad(a) == seed);
        CHECK(g.grad(b) == seed);

        Graph<double> h;
        Var p = h.input(random_tensor<double>({2, 2, 3, 3}, rng));
        Var q = h.input(random_tensor<double>({2, 1, 3, 3}, rng));
        Var c = concat_channels(h, p, q);
        const auto seed2 = random_tensor<double>(h.value(c).shape(), rng);
        h.backward(c, seed2);
        for (int n = 0; n < 2; ++n) {
            for (int i = 0; i < 3; ++i) {
                for (int j = 0; j < 3; ++j) {
                    CHECK(h.grad(p).at(n, 1, i, j) == seed2.at(n, 1, i, j));
                    CHECK(h.grad(q).at(n, 0, i, j) == seed2.at(n, 2, i, j));
                }
            }
        }
    }

    TEST_CASE("batchnorm modes") {
        std::mt19937_64 rng(6);
        const auto x = random_tensor<double>({4, 3, 5, 5}, rng, -3.0, 7.0);
        ParamStore<double> store;
        auto& gamma = store.add("g", Tensor<double>({1, 3, 1, 1}, 1.0));
        auto& beta = store.add("b", Tensor<double>({1, 3, 1, 1}, 0.0));
        auto& mean = store.add("m", Tensor<double>({1, 3, 1, 1}, 0.0), false);
        auto& var = store.add("v", Tensor<double>({1, 3, 1, 1}, 1.0), false);

        {
            Graph<double> g(Mode::eval);
            Var y = batchnorm(g, g.input(x), g.param(gamma), g.param(beta), mean, var);
            for (std::size_t i = 0; i < x.size(); ++i) CHECK(g.value(y)[i] == doctest::Approx(x[i] / std::sqrt(1 + 1e-5)));
        }
        Graph<double> g(Mode::train);
        Var y = batchnorm(g, g.input(x), g.param(gamma), g.param(beta), mean, var);
        const auto& v = g.value(y);
        for (int c = 0; c < 3; ++c) {
            double s = 0, ss = 0, xs = 0;
            const int count = 4 * 25;
            for (int n = 0; n < 4; ++n)
                for (int i = 0; i < 25; ++i) {
                    s += v.at(n, c, i / 5, i % 5);
                    xs += x.at(n, c, i / 5, i % 5);
                }
            const double m = s / count;
            for (int n = 0; n < 4; ++n)
                for (int i = 0; i < 25; ++i) ss += (v.at(n, c, i / 5, i % 5) - m) * (v.at(n, c, i / 5, i % 5) - m);
            CHECK(std::abs(m) < 1e-4);
            CHECK(std::abs(ss / count - 1.0) < 1e-4);
            CHECK(mean.value.at(0, c, 0, 0) == doctest::Approx(0.1 * xs / count));
        }
        CHECK_THROWS_AS(batchnorm(g, g.input(Tensor<double>({1, 2, 2, 2})), g.param(gamma), g.param(beta), mean, var),
                        ShapeError);
    }

    TEST_CASE("forward is deterministic") {
        std::mt19937_64 rng(7);
        const auto x = random_tensor<double>({2, 3, 16, 16}, rng);
        const auto w = random_tensor<double>({8, 3, 3, 3}, rng);
        auto run = [&] {
            Graph<double> g;
            return g.value(relu(g, conv2d(g, g.input(x), g.input(w), Var{}, ConvOptions::same(3))));
        };
        CHECK(run() == run());
    }

    TEST_CASE("gradient checks of single ops") {
        std::mt19937_64 rng(8);
        auto check = [&](const GraphBuilder& build, std::vector<Tensor<double>> inputs) {
            const GradCheckReport r = grad_check(build, inputs, nullptr);
            INFO(r.worst);
            CHECK(r.max_rel_error < 1e-4);
            CHECK(r.checked > 0);
        };
        const Shape4 s{2, 3, 6, 6};
        check([](Graph<double>& g, std::span<const Var> in) { return conv2d(g, in[0], in[1], in[2], ConvOptions::same(3)); },
              {random_tensor<double>(s, rng), random_tensor<double>({4, 3, 3, 3}, rng), random_tensor<double>({1, 4, 1, 1}, rng)});
        check([](Graph<double>& g, std::span<const Var> in) { return conv2d(g, in[0], in[1], Var{}, ConvOptions{2, 2, 2}); },
              {random_tensor<double>(s, rng), random_tensor<double>({2, 3, 3, 3}, rng)});
        check([](Graph<double>& g, std::span<const Var> in) { return conv2d_transpose(g, in[0], in[1], in[2], 2); },
              {random_tensor<double>(s, rng), random_tensor<double>({3, 2, 2, 2}, rng), random_tensor<double>({1, 2, 1, 1}, rng)});
        check([](Graph<double>& g, std::span<const Var> in) { return maxpool2(g, in[0]); }, {random_tensor<double>(s, rng)});
        check([](Graph<double>& g, std::span<const Var> in) { return relu(g, in[0]); }, {random_tensor<double>(s, rng)});
        check([](Graph<double>& g, std::span<const Var> in) { return sigmoid(g, in[0]); }, {random_tensor<double>(s, rng, -4, 4)});
        check([](Graph<double>& g, std::span<const Var> in) { return add(g, in[0], in[1]); },
              {random_tensor<double>(s, rng), random_tensor<double>(s, rng)});
        check([](Graph<double>& g, std::span<const Var> in) { return multiply(g, in[0], in[1]); },
              {random_tensor<double>(s, rng), random_tensor<double>(s, rng)});
        check([](Graph<double>& g, std::span<const Var> in) { return average(g, in[0], in[1]); },
              {random_tensor<double>(s, rng), random_tensor<double>(s, rng)});
        check([](Graph<double>& g, std::span<const Var> in) { return maximum(g, in[0], in[1]); },
              {random_tensor<double>(s, rng), random_tensor<double>(s, rng)});
        check([](Graph<double>& g, std::span<const Var> in) { return concat_channels(g, in[0], in[1]); },
              {random_tensor<double>(s, rng), random_tensor<double>({2, 1, 6, 6}, rng)});
    }

    TEST_CASE("batchnorm gradient in train mode") {
        std::mt19937_64 rng(9);
        ParamStore<double> store;
        store.add("gamma", random_tensor<double>({1, 3, 1, 1}, rng, 0.5, 1.5));
        store.add("beta", random_tensor<double>({1, 3, 1, 1}, rng));
        store.add("mean", Tensor<double>({1, 3, 1, 1}, 0.0), false);
        store.add("var", Tensor<double>({1, 3, 1, 1}, 1.0), false);
        std::vector<Tensor<double>> in{random_tensor<double>({3, 3, 4, 4}, rng)};
        const auto r = grad_check(
            [&](Graph<double>& g, std::span<const Var> v) {
                return batchnorm(g, v[0], g.param(store.get("gamma")), g.param(store.get("beta")), store.get("mean"),
                                 store.get("var"));
            },
            in, &store);
        INFO(r.worst);
        CHECK(r.max_rel_error < 1e-4);
    }

    TEST_CASE("frozen parameters get no gradient") {
        std::mt19937_64 rng(10);
        ParamStore<double> store;
        auto& w = store.add("w", random_tensor<double>({2, 1, 3, 3}, rng), false);
        auto& b = store.add("b", random_tensor<double>({1, 2, 1, 1}, rng));
        store.zero_grad();
        Graph<double> g;
        Var y = conv2d(g, g.input(random_tensor<double>({1, 1, 5, 5}, rng)), g.param(w), g.param(b), ConvOptions::same(3));
        g.backward(y, Tensor<double>(g.value(y).shape(), 1.0));
        for (double v : w.grad.data()) CHECK(v == 0.0);
        CHECK(b.grad[0] == doctest::Approx(25.0));
        CHECK(store.scalar_count() == 2);
        CHECK(store.scalar_count(true) == 20);
    }

    TEST_CASE("grad_check reports non-finite values") {
        std::vector<Tensor<double>> in{Tensor<double>({1, 1, 1, 1}, 1.0)};
        auto build = [](Graph<double>& g, std::span<const Var> v) {
            Tensor<double> out = g.value(v[0]);
            out[0] = std::numeric_limits<double>::infinity();
            return g.input(out);
        };
        CHECK_THROWS_AS(grad_check(build, in, nullptr), NumericError);
    }

    TEST_CASE("param store") {
        ParamStore<float> s;
        s.add("a", Tensor<float>({1, 1, 1, 2}));
        CHECK(s.contains("a"));
        CHECK_THROWS(s.add("a", Tensor<float>({1, 1, 1, 1})));
        CHECK_THROWS(s.get("b"));
        const auto d = s.cast<double>();
        CHECK(d.get("a").value.shape() == Shape4{1, 1, 1, 2});
    }
}
