#include "biper/quantization.hpp"

#include <cmath>
#include <map>
#include <mutex>
#include <stdexcept>

#include "biper/qe_analytics.hpp"

namespace biper {

namespace {

void require_finite_input(const Tensor& w, const char* op) {
  if (!w.all_finite()) throw NumericError(std::string(op) + ": non-finite input");
}

void require_omega(double omega0) {
  if (!(omega0 > 0.0) || !std::isfinite(omega0)) {
    throw std::invalid_argument("omega0 must be positive, got " + std::to_string(omega0));
  }
}

}  // namespace

void QuantSpec::validate() const {
  if (method == QuantMethod::biper) require_omega(omega0);
}

std::string to_string(QuantMethod m) {
  switch (m) {
    case QuantMethod::sign_ste: return "sign-ste";
    case QuantMethod::sign_clipped_ste: return "sign-clipped-ste";
    case QuantMethod::biper: return "biper";
  }
  return "?";
}

std::string to_string(ScalingMode m) {
  switch (m) {
    case ScalingMode::none: return "none";
    case ScalingMode::per_layer_mean_abs: return "per-layer-mean-abs";
    case ScalingMode::per_channel_mean_abs: return "per-channel-mean-abs";
    case ScalingMode::analytic_laplace: return "analytic-laplace";
  }
  return "?";
}

QuantMethod parse_quant_method(std::string_view s) {
  if (s == "sign-ste") return QuantMethod::sign_ste;
  if (s == "sign-clipped-ste" || s == "ste") return QuantMethod::sign_clipped_ste;
  if (s == "biper") return QuantMethod::biper;
  throw std::invalid_argument("unknown quantization method '" + std::string(s) + "'");
}

ScalingMode parse_scaling_mode(std::string_view s) {
  if (s == "none") return ScalingMode::none;
  if (s == "per-layer-mean-abs") return ScalingMode::per_layer_mean_abs;
  if (s == "per-channel-mean-abs") return ScalingMode::per_channel_mean_abs;
  if (s == "analytic-laplace") return ScalingMode::analytic_laplace;
  throw std::invalid_argument("unknown scaling mode '" + std::string(s) + "'");
}

void BinarizedTensor::validate() const {
  for (double v : values.data()) {
    if (v != 1.0 && v != -1.0) throw std::invalid_argument("binarized tensor holds a non +-1 entry");
  }
  if (scale.empty()) throw std::invalid_argument("binarized tensor without scale");
  for (double s : scale) {
    if (!(s > 0.0)) throw std::invalid_argument("binarized tensor scale must be positive");
  }
}

BinarizedTensor sign_binarize(const Tensor& w) {
  require_finite_input(w, "sign_binarize");
  Tensor out(w.shape());
  for (std::size_t i = 0; i < w.size(); ++i) out[i] = sign_of(w[i]);
  return {std::move(out), {1.0}};
}

BinarizedTensor biper_binarize(const Tensor& w, double omega0) {
  require_omega(omega0);
  require_finite_input(w, "biper_binarize");
  Tensor out(w.shape());
  for (std::size_t i = 0; i < w.size(); ++i) out[i] = sign_of(std::sin(omega0 * w[i]));
  return {std::move(out), {1.0}};
}

Tensor biper_surrogate_grad(const Tensor& w, double omega0) {
  require_omega(omega0);
  Tensor out(w.shape());
  for (std::size_t i = 0; i < w.size(); ++i) out[i] = omega0 * std::cos(omega0 * w[i]);
  return out;
}

Tensor activation_surrogate_grad(const Tensor& a) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double v = a[i];
    out[i] = (v >= -1.0 && v < 0.0) ? 2.0 + 2.0 * v : (v >= 0.0 && v < 1.0) ? 2.0 - 2.0 * v : 0.0;
  }
  return out;
}

Tensor clipped_ste_grad(const Tensor& w) {
  Tensor out(w.shape());
  for (std::size_t i = 0; i < w.size(); ++i) out[i] = std::abs(w[i]) <= 1.0 ? 1.0 : 0.0;
  return out;
}

std::vector<double> empirical_scale(const Tensor& w_hat, ScalingMode mode) {
  if (w_hat.empty()) throw std::invalid_argument("empirical_scale: empty tensor");
  if (mode == ScalingMode::per_layer_mean_abs) {
    double s = 0.0;
    for (double v : w_hat.data()) s += std::abs(v);
    return {s / static_cast<double>(w_hat.size())};
  }
  if (mode == ScalingMode::per_channel_mean_abs) {
    const std::size_t C = w_hat.rank() > 1 ? w_hat.dim(0) : 1;
    const std::size_t inner = w_hat.size() / C;
    std::vector<double> out(C, 0.0);
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t i = 0; i < inner; ++i) out[c] += std::abs(w_hat[c * inner + i]);
      out[c] /= static_cast<double>(inner);
    }
    return out;
  }
  throw std::invalid_argument("empirical_scale: mode must be per-layer or per-channel mean-abs");
}

Tensor pre_binarization(const Tensor& latent, const QuantSpec& spec) {
  if (spec.method != QuantMethod::biper) return latent;
  Tensor out(latent.shape());
  for (std::size_t i = 0; i < latent.size(); ++i) out[i] = std::sin(spec.omega0 * latent[i]);
  return out;
}

std::vector<double> weight_scale(const Tensor& latent, const QuantSpec& spec) {
  switch (spec.scaling) {
    case ScalingMode::none:
      return {1.0};
    case ScalingMode::per_layer_mean_abs:
    case ScalingMode::per_channel_mean_abs:
      return empirical_scale(pre_binarization(latent, spec), spec.scaling);
    case ScalingMode::analytic_laplace: {
      const auto model = qe::fit_laplace(latent);
      if (spec.method == QuantMethod::biper) return {qe::gamma_optimal(spec.omega0, model)};
      return {model.b};  // E|w| under La(0, b)
    }
  }
  throw std::logic_error("weight_scale: unhandled scaling mode");
}

BinarizedTensor binarize_weights(const Tensor& latent, const QuantSpec& spec) {
  spec.validate();
  BinarizedTensor out = spec.method == QuantMethod::biper ? biper_binarize(latent, spec.omega0)
                                                          : sign_binarize(latent);
  out.scale = weight_scale(latent, spec);
  // A channel whose latent weights all sit on sine zeros has no magnitude.
  for (double& s : out.scale)
    if (!(s > 0.0)) s = 1e-12;
  return out;
}

double empirical_qe(const Tensor& latent, const QuantSpec& spec) {
  const Tensor w_hat = pre_binarization(latent, spec);
  const auto gamma = empirical_scale(w_hat, ScalingMode::per_channel_mean_abs);
  const std::size_t inner = w_hat.size() / gamma.size();
  double s = 0.0;
  for (std::size_t c = 0; c < gamma.size(); ++c)
    for (std::size_t i = 0; i < inner; ++i) {
      const double v = w_hat[c * inner + i];
      const double d = v - gamma[c] * sign_of(v);
      s += d * d;
    }
  return s / static_cast<double>(w_hat.size());
}

// ---- autodiff nodes ------------------------------------------------------

ad::OpId sign_ste_op() {
  static const ad::OpId id = ad::OpRegistry::global().register_custom_grad(
      "sign_ste", [](double x) { return sign_of(x); }, [](double) { return 1.0; });
  return id;
}

ad::OpId clipped_ste_op() {
  static const ad::OpId id = ad::OpRegistry::global().register_custom_grad(
      "sign_clipped_ste", [](double x) { return sign_of(x); },
      [](double x) { return std::abs(x) <= 1.0 ? 1.0 : 0.0; });
  return id;
}

ad::OpId biper_op(double omega0) {
  require_omega(omega0);
  static std::mutex mutex;
  static std::map<double, ad::OpId> cache;
  std::lock_guard lock(mutex);
  if (auto it = cache.find(omega0); it != cache.end()) return it->second;
  const ad::OpId id = ad::OpRegistry::global().register_custom_grad(
      "biper", [omega0](double x) { return sign_of(std::sin(omega0 * x)); },
      [omega0](double x) { return omega0 * std::cos(omega0 * x); });
  cache.emplace(omega0, id);
  return id;
}

ad::OpId activation_sign_op() {
  static const ad::OpId id = ad::OpRegistry::global().register_custom_grad(
      "activation_sign", [](double x) { return sign_of(x); },
      [](double a) {
        if (a >= -1.0 && a < 0.0) return 2.0 + 2.0 * a;
        if (a >= 0.0 && a < 1.0) return 2.0 - 2.0 * a;
        return 0.0;
      });
  return id;
}

ad::OpId weight_binarizer_op(const QuantSpec& spec) {
  switch (spec.method) {
    case QuantMethod::sign_ste: return sign_ste_op();
    case QuantMethod::sign_clipped_ste: return clipped_ste_op();
    case QuantMethod::biper: return biper_op(spec.omega0);
  }
  throw std::logic_error("weight_binarizer_op: unhandled method");
}

}  // namespace biper
