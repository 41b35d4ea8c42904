#include "doctest.h"

#include <cmath>
#include <functional>
#include <vector>

#include "dpolab/rng.hpp"
#include "dpolab/tensor.hpp"

using namespace dpolab;

namespace {

// Central-difference gradient check: `build` must construct the whole graph
// from the leaves each time it is called, because ops compute eagerly.
double max_grad_rel_error(const std::vector<TensorPtr>& leaves,
                          const std::function<TensorPtr()>& build, double h = 1e-5) {
    TensorPtr loss = build();
    backward(loss);
    double worst = 0.0;
    for (const TensorPtr& leaf : leaves) {
        for (std::size_t i = 0; i < leaf->data.size(); ++i) {
            double saved = leaf->data[i];
            leaf->data[i] = saved + h;
            double up = build()->data[0];
            leaf->data[i] = saved - h;
            double down = build()->data[0];
            leaf->data[i] = saved;
            double fd = (up - down) / (2.0 * h);
            double ad = leaf->grad[i];
            double rel = std::fabs(ad - fd) / std::max({1.0, std::fabs(ad), std::fabs(fd)});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

TensorPtr randn_leaf(std::vector<std::int64_t> shape, Rng& rng) {
    return make_randn(std::move(shape), rng, 1.0, true);
}

}  // namespace

TEST_CASE("matmul forward matches a hand-multiplied 2x2 example") {
    auto a = make_tensor({2, 2}, {1.0, 2.0, 3.0, 4.0});
    auto b = make_tensor({2, 2}, {5.0, 6.0, 7.0, 8.0});
    auto c = matmul(a, b);
    CHECK(c->at(0, 0) == doctest::Approx(19.0));
    CHECK(c->at(0, 1) == doctest::Approx(22.0));
    CHECK(c->at(1, 0) == doctest::Approx(43.0));
    CHECK(c->at(1, 1) == doctest::Approx(50.0));
}

TEST_CASE("matmul rejects mismatched inner dimensions") {
    auto a = make_tensor({2, 3});
    auto b = make_tensor({2, 2});
    CHECK_THROWS_AS(matmul(a, b), std::invalid_argument);
}

TEST_CASE("elementwise forward values: sigmoid, log_sigmoid, gelu at fixed points") {
    auto x = make_tensor({1, 3}, {0.0, 2.0, -2.0});
    auto s = sigmoid(x);
    CHECK(s->data[0] == doctest::Approx(0.5));
    CHECK(s->data[1] == doctest::Approx(1.0 / (1.0 + std::exp(-2.0))));

    auto ls = log_sigmoid(x);
    // log sigma(0) = -ln 2, to the last bit of the formula
    CHECK(ls->data[0] == doctest::Approx(-std::log(2.0)).epsilon(1e-15));
    CHECK(ls->data[1] == doctest::Approx(std::log(1.0 / (1.0 + std::exp(-2.0)))));
    CHECK(ls->data[2] == doctest::Approx(std::log(1.0 / (1.0 + std::exp(2.0)))));

    // tanh-approximation GELU at x = 1: 0.5 * (1 + tanh(sqrt(2/pi) * 1.044715))
    auto g = gelu(make_tensor({1, 1}, std::vector<double>{1.0}));
    CHECK(g->data[0] == doctest::Approx(0.8411919906082768).epsilon(1e-12));
}

TEST_CASE("log_sigmoid stays finite and exact far into the tails") {
    auto x = make_tensor({1, 2}, {60.0, -60.0});
    auto y = log_sigmoid(x);
    CHECK(y->data[0] == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(y->data[1] == doctest::Approx(-60.0).epsilon(1e-12));
    CHECK(std::isfinite(y->data[0]));
    CHECK(std::isfinite(y->data[1]));
}

TEST_CASE("log_softmax rows are normalized and match a hand computation") {
    auto x = make_tensor({1, 3}, {1.0, 2.0, 3.0});
    auto y = log_softmax_rows(x);
    double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    CHECK(y->data[0] == doctest::Approx(1.0 - std::log(z)).epsilon(1e-12));
    CHECK(y->data[2] == doctest::Approx(3.0 - std::log(z)).epsilon(1e-12));
    double sum = 0.0;
    for (double v : y->data) sum += std::exp(v);
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("layer_norm_rows output has zero mean and unit variance per row") {
    Rng rng(7);
    auto x = randn_leaf({3, 8}, rng);
    auto gain = make_tensor({8}, std::vector<double>(8, 1.0));
    auto bias = make_tensor({8}, std::vector<double>(8, 0.0));
    auto y = layer_norm_rows(x, gain, bias);
    for (int r = 0; r < 3; ++r) {
        double mean = 0.0, var = 0.0;
        for (int c = 0; c < 8; ++c) mean += y->at(r, c);
        mean /= 8.0;
        for (int c = 0; c < 8; ++c) var += (y->at(r, c) - mean) * (y->at(r, c) - mean);
        var /= 8.0;
        CHECK(mean == doctest::Approx(0.0).epsilon(1e-12));
        CHECK(var == doctest::Approx(1.0).epsilon(1e-3));  // eps in the denominator
    }
}

TEST_CASE("gradient accumulates when a tensor is used twice") {
    auto x = make_tensor({1, 1}, {3.0}, true);
    auto y = add(x, x);  // dy/dx = 2
    backward(sum_all(y));
    CHECK(x->grad[0] == doctest::Approx(2.0));
}

TEST_CASE("backward frees the tape and requires a scalar") {
    auto x = make_tensor({1, 2}, {1.0, 2.0}, true);
    auto y = scale(x, 2.0);
    CHECK_THROWS_AS(backward(y), std::invalid_argument);  // not a scalar
    auto loss = sum_all(y);
    backward(loss);
    CHECK(loss->parents.empty());
    CHECK_FALSE(loss->backward_fn);
}

TEST_CASE("finite differences agree with the tape on every op") {
    Rng rng(11);
    double tol = 1e-6;

    SUBCASE("matmul chain") {
        auto a = randn_leaf({3, 4}, rng);
        auto b = randn_leaf({4, 2}, rng);
        CHECK(max_grad_rel_error({a, b}, [&] { return sum_all(matmul(a, b)); }) < tol);
    }
    SUBCASE("add with row broadcast") {
        auto a = randn_leaf({3, 4}, rng);
        auto b = randn_leaf({4}, rng);
        CHECK(max_grad_rel_error({a, b}, [&] { return sum_all(add(a, b)); }) < tol);
    }
    SUBCASE("mul, scale, add_const, neg") {
        auto a = randn_leaf({2, 3}, rng);
        auto b = randn_leaf({2, 3}, rng);
        CHECK(max_grad_rel_error({a, b}, [&] {
                  return sum_all(neg(add_const(scale(mul(a, b), 1.7), 0.3)));
              }) < tol);
    }
    SUBCASE("sigmoid and log") {
        auto a = randn_leaf({2, 2}, rng);
        CHECK(max_grad_rel_error({a}, [&] { return sum_all(log_elem(sigmoid(a))); }) < tol);
    }
    SUBCASE("log_sigmoid") {
        auto a = randn_leaf({2, 5}, rng);
        CHECK(max_grad_rel_error({a}, [&] { return sum_all(log_sigmoid(a)); }) < tol);
    }
    SUBCASE("gelu and tanh") {
        auto a = randn_leaf({2, 4}, rng);
        CHECK(max_grad_rel_error({a}, [&] { return sum_all(gelu(tanh_elem(a))); }) < tol);
    }
    SUBCASE("log_softmax_rows") {
        auto a = randn_leaf({3, 5}, rng);
        auto w = make_randn({3, 5}, rng, 1.0, false);  // fixed weights pick a combination
        CHECK(max_grad_rel_error({a}, [&] { return sum_all(mul(log_softmax_rows(a), w)); }) < tol);
    }
    SUBCASE("softmax_rows") {
        auto a = randn_leaf({2, 4}, rng);
        auto w = make_randn({2, 4}, rng, 1.0, false);
        CHECK(max_grad_rel_error({a}, [&] { return sum_all(mul(softmax_rows(a), w)); }) < tol);
    }
    SUBCASE("layer_norm_rows with learned gain and bias") {
        auto x = randn_leaf({2, 6}, rng);
        auto gain = randn_leaf({6}, rng);
        auto bias = randn_leaf({6}, rng);
        auto w = make_randn({2, 6}, rng, 1.0, false);
        CHECK(max_grad_rel_error({x, gain, bias}, [&] {
                  return sum_all(mul(layer_norm_rows(x, gain, bias), w));
              }) < tol);
    }
    SUBCASE("embedding_rows and gather_pairs") {
        auto table = randn_leaf({7, 3}, rng);
        std::vector<int> ids{2, 5, 2, 0};
        CHECK(max_grad_rel_error({table}, [&] {
                  auto e = embedding_rows(table, ids);
                  return sum_all(gather_pairs(e, {0, 1, 3}, {2, 0, 1}));
              }) < tol);
    }
    SUBCASE("transpose, slice_cols, concat_cols") {
        auto a = randn_leaf({3, 6}, rng);
        CHECK(max_grad_rel_error({a}, [&] {
                  auto left = slice_cols(a, 0, 3);
                  auto right = slice_cols(a, 3, 6);
                  return sum_all(matmul(concat_cols({right, left}), transpose(a)));
              }) < tol);
    }
    SUBCASE("stack_scalars and mean_all") {
        auto a = randn_leaf({2, 2}, rng);
        CHECK(max_grad_rel_error({a}, [&] {
                  auto s1 = sum_all(a);
                  auto s2 = mean_all(mul(a, a));
                  return mean_all(stack_scalars({s1, s2}));
              }) < tol);
    }
}

TEST_CASE("twenty random composite graphs pass the finite-difference check") {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        Rng rng(seed);
        auto a = randn_leaf({3, 4}, rng);
        auto b = randn_leaf({4, 3}, rng);
        auto g = randn_leaf({4}, rng);
        auto bias = randn_leaf({4}, rng);
        auto build = [&] {
            auto h = gelu(matmul(matmul(a, b), a));           // [3, 4]
            auto n = layer_norm_rows(h, g, bias);             // [3, 4]
            auto p = log_softmax_rows(n);                     // [3, 4]
            auto picked = gather_pairs(p, {0, 1, 2}, {1, 3, 0});
            return add(mean_all(picked), scale(sum_all(sigmoid(n)), 0.01));
        };
        CAPTURE(seed);
        CHECK(max_grad_rel_error({a, b, g, bias}, build) < 1e-5);
    }
}
