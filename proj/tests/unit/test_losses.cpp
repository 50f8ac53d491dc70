#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "roadfuse/autodiff.hpp"
#include "roadfuse/error.hpp"
#include "roadfuse/losses.hpp"
#include "support.hpp"

using namespace roadfuse;
using test::random_tensor;

namespace {

Tensor<double> random_labels(Shape4 s, std::mt19937_64& rng) {
    std::bernoulli_distribution b(0.4);
    Tensor<double> t(s);
    for (auto& v : t.data()) v = b(rng) ? 1.0 : 0.0;
    return t;
}

double clampp(double p, double eps = 1e-7) { return std::clamp(p, eps, 1.0 - eps); }

// Central finite differences of the scalar loss with respect to every pixel.
template <class F>
double max_grad_error(F loss, Tensor<double> pred, const Tensor<double>& gt) {
    const auto analytic = loss(pred, gt).grad;
    double worst = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double saved = pred[i], eps = 1e-6;
        pred[i] = saved + eps;
        const double fp = loss(pred, gt).value;
        pred[i] = saved - eps;
        const double fm = loss(pred, gt).value;
        pred[i] = saved;
        const double num = (fp - fm) / (2 * eps);
        worst = std::max(worst, std::abs(num - analytic[i]) / std::max({1.0, std::abs(num), std::abs(analytic[i])}));
    }
    return worst;
}

}  // namespace

TEST_SUITE("losses") {
    TEST_CASE("mse examples and oracle") {
        Tensor<double> half({1, 1, 2, 2}, 0.5), ones({1, 1, 2, 2}, 1.0);
        CHECK(mse(ones, ones).value == 0.0);
        CHECK(mse(half, ones).value == doctest::Approx(0.25));

        std::mt19937_64 rng(1);
        const auto p = random_tensor<double>({2, 1, 8, 8}, rng, 0.01, 0.99);
        const auto y = random_labels(p.shape(), rng);
        double s = 0;
        for (std::size_t i = 0; i < p.size(); ++i) s += (p[i] - y[i]) * (p[i] - y[i]);
        const auto l = mse(p, y);
        CHECK(std::abs(l.value - s / p.size()) < 1e-7);
        for (std::size_t i = 0; i < p.size(); ++i) CHECK(l.grad[i] == doctest::Approx(2 * (p[i] - y[i]) / p.size()));
    }

    TEST_CASE("bce examples and oracle") {
        Tensor<double> half({1, 1, 1, 1}, 0.5), one({1, 1, 1, 1}, 1.0), zero({1, 1, 1, 1}, 0.0);
        CHECK(std::abs(bce(half, one).value - std::log(2.0)) < 1e-6);
        CHECK(bce(one, one).value <= 1e-6);
        CHECK(bce(zero, zero).value <= 1e-6);

        std::mt19937_64 rng(2);
        const auto p = random_tensor<double>({2, 1, 8, 8}, rng, 0.0, 1.0);
        const auto y = random_labels(p.shape(), rng);
        double s = 0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double q = clampp(p[i]);
            s += -(y[i] * std::log(q) + (1 - y[i]) * std::log(1 - q));
        }
        CHECK(std::abs(bce(p, y).value - s / p.size()) < 1e-7);
    }

    TEST_CASE("focal examples") {
        Tensor<double> half({1, 1, 1, 1}, 0.5), one({1, 1, 1, 1}, 1.0);
        CHECK(std::abs(focal(half, one).value - 0.25 * 0.25 * std::log(2.0)) < 1e-6);
        CHECK(focal(Tensor<double>({1, 1, 1, 1}, 0.999999), one).value < 1e-12);

        std::mt19937_64 rng(3);
        const auto p = random_tensor<double>({2, 1, 8, 8}, rng, 0.0, 1.0);
        const auto y = random_labels(p.shape(), rng);
        FocalOptions plain;
        plain.gamma = 0.0;
        plain.alpha_weighting = false;
        CHECK(std::abs(focal(p, y, plain).value - bce(p, y).value) < 1e-7);
        const auto fg = focal(p, y, plain).grad, bg = bce(p, y).grad;
        for (std::size_t i = 0; i < p.size(); ++i) CHECK(std::abs(fg[i] - bg[i]) < 1e-7);

        double s = 0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double q = clampp(p[i]);
            const double pt = y[i] == 1.0 ? q : 1 - q, at = y[i] == 1.0 ? 0.25 : 0.75;
            s += -at * (1 - pt) * (1 - pt) * std::log(pt);
        }
        CHECK(std::abs(focal(p, y).value - s / p.size()) < 1e-7);
    }

    TEST_CASE("analytic gradients match finite differences") {
        std::mt19937_64 rng(4);
        const auto p = random_tensor<double>({1, 1, 6, 6}, rng, 0.05, 0.95);
        const auto y = random_labels(p.shape(), rng);
        CHECK(max_grad_error([](const auto& a, const auto& b) { return mse(a, b); }, p, y) < 1e-4);
        CHECK(max_grad_error([](const auto& a, const auto& b) { return bce(a, b); }, p, y) < 1e-4);
        CHECK(max_grad_error([](const auto& a, const auto& b) { return focal(a, b); }, p, y) < 1e-4);
        FocalOptions f;
        f.gamma = 0.5;
        f.alpha = 0.8;
        CHECK(max_grad_error([&](const auto& a, const auto& b) { return focal(a, b, f); }, p, y) < 1e-4);
    }

    TEST_CASE("losses are non-negative and permutation invariant") {
        std::mt19937_64 rng(5);
        auto p = random_tensor<double>({1, 1, 8, 8}, rng, 0.0, 1.0);
        auto y = random_labels(p.shape(), rng);
        std::vector<std::size_t> perm(p.size());
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        std::shuffle(perm.begin(), perm.end(), rng);
        Tensor<double> pp(p.shape()), yy(p.shape());
        for (std::size_t i = 0; i < perm.size(); ++i) {
            pp[i] = p[perm[i]];
            yy[i] = y[perm[i]];
        }
        for (auto kind : {LossKind::mse, LossKind::bce, LossKind::focal}) {
            const double a = compute_loss(kind, p, y).value;
            CHECK(a >= 0.0);
            CHECK(compute_loss(kind, pp, yy).value == doctest::Approx(a).epsilon(1e-12));
        }
    }

    TEST_CASE("errors and names") {
        CHECK_THROWS_AS(mse(Tensor<double>({1, 1, 2, 2}), Tensor<double>({1, 1, 2, 3})), ShapeError);
        CHECK_THROWS_AS(bce(Tensor<float>({1, 1, 2, 2}), Tensor<float>({2, 1, 2, 2})), ShapeError);
        CHECK(parse_loss("focal") == LossKind::focal);
        CHECK(to_string(LossKind::bce) == "bce");
        CHECK_THROWS_AS(parse_loss("dice"), ConfigError);
        FocalOptions neg;
        neg.gamma = -1;
        CHECK_THROWS_AS(focal(Tensor<double>({1, 1, 1, 1}, 0.5), Tensor<double>({1, 1, 1, 1}, 1.0), neg), ConfigError);
    }
}
