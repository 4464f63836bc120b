#include <cmath>
#include <numbers>

#include "biper/qe_analytics.hpp"
#include "biper/quantization.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace biper;
using ad::Variable;
using testing::random_tensor;

TEST_CASE("sign maps zero and negative zero to +1") {
  CHECK(sign_of(0.0) == 1.0);
  CHECK(sign_of(-0.0) == 1.0);
  CHECK(sign_of(-1e-300) == -1.0);
  CHECK(sign_of(2.5) == 1.0);
  const auto b = sign_binarize(Tensor::vector({-0.0, 0.0, -3.0, 1e-12}));
  CHECK(b.values == Tensor::vector({1.0, 1.0, -1.0, 1.0}));
}

TEST_CASE("BiPer forward is the sign of the sine") {
  for (double omega0 : {1.0, 5.0, 20.0}) {
    const double peak = std::numbers::pi / (2.0 * omega0);
    const auto b = biper_binarize(Tensor::vector({peak, -peak, 3.0 * peak, 0.0}), omega0);
    CHECK(b.values == Tensor::vector({1.0, -1.0, -1.0, 1.0}));
  }
  std::mt19937_64 rng(3);
  const Tensor w = random_tensor({500}, rng, -2.0, 2.0);
  const auto b = biper_binarize(w, 13.0);
  for (std::size_t i = 0; i < w.size(); ++i) {
    CHECK(b.values[i] == (std::sin(13.0 * w[i]) >= 0.0 ? 1.0 : -1.0));
  }
  CHECK_THROWS_AS(biper_binarize(w, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(biper_binarize(w, -1.0), std::invalid_argument);
}

TEST_CASE("binarized output holds only +-1 with positive scales") {
  std::mt19937_64 rng(5);
  const Tensor w = random_tensor({6, 3, 3, 3}, rng, -0.3, 0.3);
  for (auto method : {QuantMethod::biper, QuantMethod::sign_ste, QuantMethod::sign_clipped_ste}) {
    for (auto scaling : {ScalingMode::none, ScalingMode::per_layer_mean_abs,
                         ScalingMode::per_channel_mean_abs, ScalingMode::analytic_laplace}) {
      const auto b = binarize_weights(w, {method, 20.0, scaling});
      CHECK_NOTHROW(b.validate());
      for (double v : b.values.data()) CHECK(std::abs(v) == 1.0);
      for (double s : b.scale) CHECK(s > 0.0);
      const std::size_t expected = scaling == ScalingMode::per_channel_mean_abs ? 6 : 1;
      CHECK(b.scale.size() == expected);
    }
  }
  BinarizedTensor bad{Tensor::vector({1.0, 0.5}), {1.0}};
  CHECK_THROWS(bad.validate());
}

TEST_CASE("BiPer backward multiplies the upstream gradient by omega0 cos(omega0 w)") {
  std::mt19937_64 rng(11);
  const double omega0 = 20.0;
  const Tensor w0 = random_tensor({64}, rng, -0.5, 0.5);
  const Tensor r = random_tensor({64}, rng);
  Variable w(w0, true);
  ad::backward(testing::weighted_sum(ad::custom_unary(w, biper_op(omega0)), r));
  for (std::size_t i = 0; i < w0.size(); ++i) {
    CHECK(w.grad()[i] == r[i] * (omega0 * std::cos(omega0 * w0[i])));
  }
  CHECK(biper_surrogate_grad(w0, omega0)[5] == omega0 * std::cos(omega0 * w0[5]));
}

TEST_CASE("BiPer ops are cached per frequency") {
  CHECK(biper_op(7.0) == biper_op(7.0));
  CHECK_FALSE(biper_op(7.0) == biper_op(8.0));
  CHECK(weight_binarizer_op({QuantMethod::biper, 7.0}) == biper_op(7.0));
  CHECK(weight_binarizer_op({QuantMethod::sign_ste}) == sign_ste_op());
}

TEST_CASE("clipped STE passes gradient only inside [-1, 1]") {
  const Tensor w = Tensor::vector({-1.5, -1.0, -0.2, 0.0, 1.0, 1.0000001});
  CHECK(clipped_ste_grad(w) == Tensor::vector({0, 1, 1, 1, 1, 0}));
  Variable v(w, true);
  ad::backward(ad::sum(ad::custom_unary(v, clipped_ste_op())));
  CHECK(v.grad() == Tensor::vector({0, 1, 1, 1, 1, 0}));
  Variable u(w, true);
  ad::backward(ad::sum(ad::custom_unary(u, sign_ste_op())));
  CHECK(u.grad() == Tensor(w.shape(), 1.0));
}

TEST_CASE("activation surrogate is the piecewise polynomial") {
  const Tensor a = Tensor::vector({-1.5, -1.0, -0.5, 0.0, 0.25, 0.999, 1.0, 2.0});
  const Tensor g = activation_surrogate_grad(a);
  CHECK(g == Tensor::vector({0.0, 0.0, 1.0, 2.0, 1.5, 2.0 - 2.0 * 0.999, 0.0, 0.0}));
  Variable v(a, true);
  ad::backward(ad::sum(ad::custom_unary(v, activation_sign_op())));
  CHECK(v.grad() == g);
  // Triangle of area 2 integrates the jump of Sign from -1 to +1.
  double area = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double x = -1.0 + (i + 0.5) * 2.0 / n;
    area += activation_surrogate_grad(Tensor::vector({x}))[0] * 2.0 / n;
  }
  CHECK(area == doctest::Approx(2.0).epsilon(1e-9));
}

TEST_CASE("BiPer latent gradients are bounded by omega0 times the binarized gradient") {
  std::mt19937_64 rng(17);
  for (double omega0 : {1.0, 5.0, 20.0, 45.0}) {
    for (int trial = 0; trial < 20; ++trial) {
      const Tensor w0 = random_tensor({4, 9}, rng, -1.0, 1.0);
      const Tensor r = random_tensor({4, 9}, rng, -3.0, 3.0);
      Variable w(w0, true);
      Variable q = ad::custom_unary(w, biper_op(omega0));
      q.retain_grad();
      ad::backward(testing::weighted_sum(q, r));
      double gw = 0.0, gq = 0.0;
      for (std::size_t i = 0; i < w0.size(); ++i) {
        gw = std::max(gw, std::abs(w.grad()[i]));
        gq = std::max(gq, std::abs(q.grad()[i]));
      }
      CHECK(gw <= omega0 * gq * (1.0 + 1e-15));
    }
  }
}

TEST_CASE("empirical scales are mean absolute values") {
  const Tensor w({2, 3}, std::vector<double>{1, -2, 3, -0.5, 0.5, 0.5});
  CHECK(empirical_scale(w, ScalingMode::per_layer_mean_abs) == std::vector<double>{7.5 / 6.0});
  CHECK(empirical_scale(w, ScalingMode::per_channel_mean_abs) == std::vector<double>{2.0, 0.5});
  CHECK_THROWS(empirical_scale(w, ScalingMode::none));
  CHECK_THROWS(empirical_scale(Tensor(), ScalingMode::per_layer_mean_abs));
}

TEST_CASE("empirical QE matches a direct evaluation") {
  std::mt19937_64 rng(23);
  const Tensor w = random_tensor({3, 40}, rng, -0.2, 0.2);
  const QuantSpec spec{QuantMethod::biper, 20.0, ScalingMode::per_channel_mean_abs};
  double expected = 0.0;
  for (std::size_t c = 0; c < 3; ++c) {
    double g = 0.0;
    for (std::size_t i = 0; i < 40; ++i) g += std::abs(std::sin(20.0 * w[c * 40 + i]));
    g /= 40.0;
    for (std::size_t i = 0; i < 40; ++i) {
      const double s = std::sin(20.0 * w[c * 40 + i]);
      const double e = s - g * (s >= 0.0 ? 1.0 : -1.0);
      expected += e * e;
    }
  }
  expected /= 120.0;
  CHECK(empirical_qe(w, spec) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("empirical QE of Laplace weights approaches the closed form") {
  for (double x : {0.3, 0.954882, 4.0}) {
    const double b = 0.05, omega0 = x / b;
    const auto s = qe::sample_laplace(b, 400000, 99);
    const Tensor w({1, s.size()}, s);
    const double emp = empirical_qe(w, {QuantMethod::biper, omega0, ScalingMode::per_channel_mean_abs});
    CHECK(emp == doctest::Approx(qe::qe_optimal_product(x)).epsilon(0.01));
  }
}

TEST_CASE("non-finite weights are rejected") {
  Tensor w = Tensor::vector({0.1, std::numeric_limits<double>::infinity()});
  CHECK_THROWS_AS(sign_binarize(w), NumericError);
  CHECK_THROWS_AS(biper_binarize(w, 2.0), NumericError);
}

TEST_CASE("method and scaling names round-trip") {
  for (auto m : {QuantMethod::biper, QuantMethod::sign_ste, QuantMethod::sign_clipped_ste}) {
    CHECK(parse_quant_method(to_string(m)) == m);
  }
  for (auto s : {ScalingMode::none, ScalingMode::per_layer_mean_abs, ScalingMode::per_channel_mean_abs,
                 ScalingMode::analytic_laplace}) {
    CHECK(parse_scaling_mode(to_string(s)) == s);
  }
  CHECK_THROWS_AS(parse_quant_method("xnor"), std::invalid_argument);
  CHECK_THROWS_AS(parse_scaling_mode("max"), std::invalid_argument);
  CHECK_THROWS_AS(QuantSpec({QuantMethod::biper, 0.0}).validate(), std::invalid_argument);
  CHECK_NOTHROW(QuantSpec({QuantMethod::sign_ste, 0.0}).validate());
}
