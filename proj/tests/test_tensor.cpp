#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "apl/autodiff.hpp"
#include "apl/gradcheck.hpp"
#include "apl/util.hpp"

using namespace apl;
namespace gc = apl::gradcheck;

namespace {

Tensor randn(Rng& rng, Eigen::Index r, Eigen::Index c) {
    Tensor t(r, c);
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = rng.normal();
    return t;
}

} // namespace

TEST_CASE("log_sigmoid at zero equals -ln 2") {
    auto n = ag::log_sigmoid(ag::constant(0.0));
    CHECK(ag::scalar_value(n) == doctest::Approx(-std::log(2.0)).epsilon(1e-15));
}

TEST_CASE("max_with_zero clamps negatives and passes positives") {
    Tensor t(1, 2);
    t << -3.2, 3.2;
    auto n = ag::max_with_zero(ag::constant(t));
    CHECK(n->value(0, 0) == 0.0);
    CHECK(n->value(0, 1) == 3.2);
}

TEST_CASE("log-softmax of uniform logits") {
    Tensor z = Tensor::Zero(1, 4);
    auto n = ag::softmax_logits_to_logprobs(ag::constant(z), 1);
    for (int j = 0; j < 4; ++j) {
        CHECK(n->value(0, j) == doctest::Approx(-std::log(4.0)).epsilon(1e-15));
    }
}

TEST_CASE("exponentiated log-softmax rows sum to one") {
    Rng rng(41);
    for (int round = 0; round < 20; ++round) {
        Tensor z = 5.0 * randn(rng, 4, 7);
        auto n = ag::softmax_logits_to_logprobs(ag::constant(z), 1);
        for (Eigen::Index i = 0; i < 4; ++i) {
            double s = n->value.row(i).array().exp().sum();
            CHECK(std::abs(s - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("softmax_logits_to_logprobs axis 0 normalizes columns") {
    Rng rng(42);
    Tensor z = randn(rng, 5, 3);
    auto n = ag::softmax_logits_to_logprobs(ag::constant(z), 0);
    for (Eigen::Index j = 0; j < 3; ++j) {
        CHECK(std::abs(n->value.col(j).array().exp().sum() - 1.0) <= 1e-12);
    }
}

TEST_CASE("causal softmax rows are causal probability vectors") {
    Rng rng(43);
    Tensor s = randn(rng, 5, 5);
    auto n = ag::causal_softmax(ag::constant(s));
    for (Eigen::Index i = 0; i < 5; ++i) {
        CHECK(std::abs(n->value.row(i).sum() - 1.0) <= 1e-12);
        for (Eigen::Index j = i + 1; j < 5; ++j) CHECK(n->value(i, j) == 0.0);
    }
}

TEST_CASE("backward of sum gives all-ones leaf gradient") {
    Rng rng(44);
    auto x = ag::leaf(randn(rng, 3, 4));
    ag::backward(ag::sum(x));
    CHECK(x->grad_ready);
    CHECK((x->grad.array() == 1.0).all());
}

TEST_CASE("d/dt log_sigmoid at zero is one half") {
    auto w = ag::leaf(scalar(0.0));
    ag::backward(ag::log_sigmoid(w));
    CHECK(w->grad(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("leaf used twice accumulates gradient") {
    auto x = ag::leaf(scalar(3.0));
    ag::backward(ag::add(x, x));
    CHECK(x->grad(0, 0) == 2.0);
}

TEST_CASE("random three-layer composite matches central differences") {
    Rng rng(45);
    std::vector<Tensor> inputs = {randn(rng, 3, 4), randn(rng, 4, 4), randn(rng, 1, 4),
                                  randn(rng, 1, 4), randn(rng, 4, 2)};
    double err = gc::max_rel_grad_err(
        [](const std::vector<ag::NodePtr>& l) {
            ag::NodePtr h = ag::layer_norm(ag::matmul(l[0], l[1]), l[2], l[3]);
            ag::NodePtr a = ag::gelu(ag::matmul(h, l[4]));
            return ag::mean(ag::mul(a, ag::sigmoid(a)));
        },
        inputs);
    CHECK(err <= 1e-4);
}

TEST_CASE("every op passes finite-difference checks on randomized inputs") {
    // 10 rounds x >= 12 elements per round gives > 100 randomized inputs per op
    auto results = gc::check_ops(2024, 10);
    CHECK(results.size() >= 20);
    for (const auto& r : results) {
        INFO(r.name, " max rel err ", r.max_rel_err);
        CHECK(r.pass());
    }
}

TEST_CASE("backward is deterministic bit for bit") {
    auto build = [](const Tensor& a, const Tensor& b, Tensor* ga, Tensor* gb) {
        auto x = ag::leaf(a);
        auto y = ag::leaf(b);
        auto h = ag::softmax_logits_to_logprobs(ag::matmul(x, y), 1);
        ag::backward(ag::mean(ag::mul(h, h)));
        *ga = x->grad;
        *gb = y->grad;
    };
    Rng rng(46);
    Tensor a = randn(rng, 3, 5), b = randn(rng, 5, 4);
    Tensor ga1, gb1, ga2, gb2;
    build(a, b, &ga1, &gb1);
    build(a, b, &ga2, &gb2);
    CHECK(bit_equal(ga1, ga2));
    CHECK(bit_equal(gb1, gb2));
}

TEST_CASE("shape mismatch errors name both shapes") {
    auto a = ag::constant(Tensor::Zero(2, 3));
    auto b = ag::constant(Tensor::Zero(4, 5));
    CHECK_THROWS_WITH_AS(ag::add(a, b), doctest::Contains("2x3"), ShapeError);
    CHECK_THROWS_WITH_AS(ag::matmul(a, b), doctest::Contains("4x5"), ShapeError);
}

TEST_CASE("backward requires a scalar root") {
    auto x = ag::leaf(Tensor::Zero(2, 2));
    auto y = ag::scalar_mul(x, 2.0);
    CHECK_THROWS_AS(ag::backward(y), GraphError);
}

TEST_CASE("second backward on the same root is an error") {
    auto x = ag::leaf(scalar(1.5));
    auto root = ag::sum(ag::mul(x, x));
    ag::backward(root);
    CHECK_THROWS_AS(ag::backward(root), GraphError);
}

TEST_CASE("non-finite forward output raises a numeric fault") {
    Tensor big(1, 1);
    big << 1e200;
    auto x = ag::constant(big);
    CHECK_THROWS_AS(ag::mul(ag::scalar_mul(x, 1e200), x), NumericFault);
    Tensor bad(1, 1);
    bad << std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(ag::leaf(bad), NumericFault);
}

TEST_CASE("slice and concat invert each other") {
    Rng rng(47);
    Tensor a = randn(rng, 3, 6);
    auto x = ag::constant(a);
    auto parts = std::vector<ag::NodePtr>{ag::slice_cols(x, 0, 2), ag::slice_cols(x, 2, 4)};
    auto back = ag::concat_cols(parts);
    CHECK(bit_equal(back->value, a));
}

TEST_CASE("embedding gather rejects out-of-range ids") {
    auto table = ag::constant(Tensor::Zero(4, 3));
    CHECK_THROWS_AS(ag::embedding_gather(table, {0, 4}), ShapeError);
}
