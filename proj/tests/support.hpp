#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "biper/autodiff.hpp"
#include "biper/tensor.hpp"

namespace testing {

inline biper::Tensor random_tensor(biper::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  biper::Tensor t(std::move(shape));
  std::uniform_real_distribution<double> d(lo, hi);
  for (double& v : t.data()) v = d(rng);
  return t;
}

inline biper::Tensor random_signs(biper::Shape shape, std::mt19937_64& rng) {
  biper::Tensor t(std::move(shape));
  for (double& v : t.data()) v = (rng() >> 63) ? 1.0 : -1.0;
  return t;
}

/// Largest relative error between the analytic gradient of `loss` w.r.t. each
/// input and central differences of the forward value, probing up to `probes`
/// coordinates per input. Relative error uses max(|a|, |n|, floor).
inline double fd_max_rel_error(std::vector<biper::ad::Variable> inputs,
                               const std::function<biper::ad::Variable()>& loss, std::mt19937_64& rng,
                               std::size_t probes = 100, double h = 1e-6, double floor = 1e-3) {
  for (auto& v : inputs) v.zero_grad();
  biper::ad::backward(loss());
  std::vector<biper::Tensor> analytic;
  for (auto& v : inputs) analytic.push_back(v.has_grad() ? v.grad() : biper::Tensor(v.shape(), 0.0));

  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    biper::Tensor& x = inputs[k].mutable_value();
    const std::size_t n = x.size();
    for (std::size_t p = 0; p < std::min(probes, n); ++p) {
      const std::size_t i = probes >= n ? p : static_cast<std::size_t>(rng() % n);
      const double orig = x[i];
      double up, down;
      {
        biper::ad::NoGradGuard g;
        x[i] = orig + h;
        up = loss().value()[0];
        x[i] = orig - h;
        down = loss().value()[0];
      }
      x[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[k][i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

/// sum(R * y) with a fixed random R: a scalar whose gradient is R.
inline biper::ad::Variable weighted_sum(const biper::ad::Variable& y, const biper::Tensor& r) {
  return biper::ad::sum(biper::ad::mul(y, biper::ad::Variable(r)));
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path = std::filesystem::temp_directory_path() / ("biper-" + tag + "-" + std::to_string(rd()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::filesystem::path operator/(const std::string& name) const { return path / name; }
};

}  // namespace testing
