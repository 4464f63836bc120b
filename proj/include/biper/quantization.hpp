#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "biper/autodiff.hpp"
#include "biper/tensor.hpp"

namespace biper {

enum class QuantMethod {
  sign_ste,          // Sign forward, identity backward
  sign_clipped_ste,  // Sign forward, 1{|w| <= 1} backward
  biper,             // Sign(sin(omega0 w)) forward, omega0 cos(omega0 w) backward
};

enum class ScalingMode { none, per_layer_mean_abs, per_channel_mean_abs, analytic_laplace };

struct QuantSpec {
  QuantMethod method = QuantMethod::biper;
  double omega0 = 20.0;  // angular frequency, rad per weight unit
  ScalingMode scaling = ScalingMode::per_channel_mean_abs;

  /// Throws std::invalid_argument when omega0 is not positive for BiPer.
  void validate() const;
};

std::string to_string(QuantMethod m);
std::string to_string(ScalingMode m);
QuantMethod parse_quant_method(std::string_view s);
ScalingMode parse_scaling_mode(std::string_view s);

/// Entries exactly +-1 with positive per-layer (size 1) or per-channel scales.
struct BinarizedTensor {
  Tensor values;
  std::vector<double> scale{1.0};

  void validate() const;
};

/// +1 for x >= 0 (including -0.0), -1 otherwise.
inline double sign_of(double x) { return x >= 0.0 ? 1.0 : -1.0; }

BinarizedTensor sign_binarize(const Tensor& w);
BinarizedTensor biper_binarize(const Tensor& w, double omega0);

Tensor biper_surrogate_grad(const Tensor& w, double omega0);
/// Piecewise polynomial: 2+2a on [-1,0), 2-2a on [0,1), 0 elsewhere.
Tensor activation_surrogate_grad(const Tensor& a);
Tensor clipped_ste_grad(const Tensor& w);

/// Mean |w_hat| over the whole tensor or per leading-axis channel.
std::vector<double> empirical_scale(const Tensor& w_hat, ScalingMode mode);

/// The value that gets binarized: sin(omega0 w) for BiPer, w otherwise.
Tensor pre_binarization(const Tensor& latent, const QuantSpec& spec);

/// Scale factors for a latent weight tensor under spec.scaling.
std::vector<double> weight_scale(const Tensor& latent, const QuantSpec& spec);

/// Binarized weights of a latent tensor, with scales from spec.scaling.
BinarizedTensor binarize_weights(const Tensor& latent, const QuantSpec& spec);

/// mean over entries of (w_hat - gamma_c Sign(w_hat))^2 with per-channel
/// mean-abs gamma_c: the empirical quantization error of binarizing w_hat.
double empirical_qe(const Tensor& latent, const QuantSpec& spec);

// ---- autodiff nodes ------------------------------------------------------

ad::OpId sign_ste_op();
ad::OpId clipped_ste_op();
ad::OpId biper_op(double omega0);
/// Sign on activations with the piecewise-polynomial backward.
ad::OpId activation_sign_op();
ad::OpId weight_binarizer_op(const QuantSpec& spec);

}  // namespace biper
