#pragma once

// Binary-aware layers and the small reference architectures.
//
// A binarized layer keeps full-precision latent weights w. In stage 1 it
// convolves with the real weights w_hat (sin(omega0 w) for BiPer, w for the
// sign baselines); in stage 2 with the binarized weights w^q and multiplies
// the integer-valued result by a per-channel scale gamma:
//   y = gamma * conv(a^q, w^q),   a^q = Sign(a) with the polynomial surrogate.
// Batch norm follows every convolution; the first and last layers, batch
// norm and downsampling shortcuts stay full precision.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "biper/autodiff.hpp"
#include "biper/bitkernel.hpp"
#include "biper/checkpoint.hpp"
#include "biper/quantization.hpp"
#include "json.hpp"

namespace biper::nn {

enum class Stage { stage1, stage2 };

struct ForwardContext {
  Stage stage = Stage::stage2;
  bool training = false;
};

struct StateEntry {
  std::string name;
  ad::Variable* param = nullptr;  // trainable
  Tensor* buffer = nullptr;       // running statistics
  bool decay = false;             // weight decay applies
  bool latent_binary = false;     // latent weights of a binarized layer

  Tensor& tensor() { return param ? param->mutable_value() : *buffer; }
};

using StateList = std::vector<StateEntry>;

class Layer {
 public:
  virtual ~Layer() = default;
  virtual ad::Variable forward(const ad::Variable& x, const ForwardContext& ctx) = 0;
  virtual void collect_state(const std::string& prefix, StateList& out) = 0;
};

struct BatchNorm {
  ad::Variable weight;
  ad::Variable bias;
  ad::BatchNormState state;

  explicit BatchNorm(std::size_t channels);
  ad::Variable forward(const ad::Variable& x, bool training);
  void collect_state(const std::string& prefix, StateList& out);
};

/// Full-precision convolution followed by batch norm.
class ConvBN : public Layer {
 public:
  ConvBN(std::size_t in, std::size_t out, std::size_t kernel, ad::Conv2dGeometry geom,
         std::mt19937_64& rng);
  ad::Variable forward(const ad::Variable& x, const ForwardContext& ctx) override;
  void collect_state(const std::string& prefix, StateList& out) override;

 private:
  ad::Variable weight_;
  ad::Conv2dGeometry geom_;
  BatchNorm bn_;
};

/// Full-precision fully connected layer, optionally followed by batch norm.
class DenseLayer : public Layer {
 public:
  DenseLayer(std::size_t in, std::size_t out, bool batch_norm, std::mt19937_64& rng);
  ad::Variable forward(const ad::Variable& x, const ForwardContext& ctx) override;
  void collect_state(const std::string& prefix, StateList& out) override;

 private:
  ad::Variable weight_;
  ad::Variable bias_;
  std::optional<BatchNorm> bn_;
};

/// Global average pooling (4-D inputs) or flatten, then the full-precision
/// classifier.
class Head : public Layer {
 public:
  Head(std::size_t in, std::size_t classes, std::mt19937_64& rng);
  ad::Variable forward(const ad::Variable& x, const ForwardContext& ctx) override;
  void collect_state(const std::string& prefix, StateList& out) override;

 private:
  DenseLayer fc_;
};

/// Binarized convolution (kernel rank 4) or fully connected layer (rank 2)
/// with batch norm.
class BinaryLayer : public Layer {
 public:
  BinaryLayer(Shape weight_shape, ad::Conv2dGeometry geom, const QuantSpec& quant,
              bool binarize_activations, std::mt19937_64& rng);

  ad::Variable forward(const ad::Variable& x, const ForwardContext& ctx) override;
  void collect_state(const std::string& prefix, StateList& out) override;
  /// Activation binarizer + (scaled) convolution, before batch norm.
  ad::Variable conv_forward(const ad::Variable& x, const ForwardContext& ctx);

  bool is_conv() const { return latent_.value().rank() == 4; }
  const Shape& weight_shape() const { return weight_shape_; }
  ad::Conv2dGeometry geometry() const { return geom_; }
  const ad::Variable& latent() const { return latent_; }
  ad::Variable& latent() { return latent_; }
  const QuantSpec& quant() const { return quant_; }
  void set_quant(const QuantSpec& q) { quant_ = q; }
  bool binarize_activations() const { return binarize_activations_; }

  /// gamma * w^q as a BinarizedTensor (values +-1, per-channel gamma).
  BinarizedTensor binarized_weights() const;
  /// Weights the stage would convolve with, scale folded in (inspection only).
  Tensor effective_weights(Stage stage) const;

  double quantization_error() const { return empirical_qe(latent_.value(), quant_); }
  double laplace_b() const;

  /// Switches inference to the XNOR/popcount kernel with these weights.
  void attach_packed(bits::PackedBitTensor packed);
  bool packed() const { return packed_.has_value(); }
  const bits::PackedBitTensor& packed_weights() const { return *packed_; }

  /// Binarized-weight node of the last training forward; its grad is retained.
  const ad::Variable& last_binarized() const { return last_binarized_; }

 private:
  ad::Variable input_activation(const ad::Variable& x) const;
  ad::Variable packed_forward(const ad::Variable& x) const;

  Shape weight_shape_;
  ad::Variable latent_;
  ad::Conv2dGeometry geom_;
  QuantSpec quant_;
  bool binarize_activations_;
  BatchNorm bn_;
  std::optional<bits::PackedBitTensor> packed_;
  ad::Variable last_binarized_;
};

/// Binary conv unit with a full-precision shortcut: identity when shapes
/// match, else 1x1 stride-s ConvBN.
class ResidualUnit : public Layer {
 public:
  ResidualUnit(std::size_t in, std::size_t out, std::size_t stride, const QuantSpec& quant,
               bool binarize_activations, std::mt19937_64& rng);
  ad::Variable forward(const ad::Variable& x, const ForwardContext& ctx) override;
  void collect_state(const std::string& prefix, StateList& out) override;

  BinaryLayer& body() { return body_; }
  bool has_projection() const { return shortcut_ != nullptr; }

 private:
  BinaryLayer body_;
  std::unique_ptr<ConvBN> shortcut_;
};

enum class Architecture { mlp, minicnn, resnet20ish };

std::string to_string(Architecture a);
Architecture parse_architecture(const std::string& s);

struct ModelSpec {
  Architecture arch = Architecture::minicnn;
  Shape input_shape{1, 28, 28};  // per-sample
  std::size_t num_classes = 10;
  std::vector<std::size_t> hidden{256};  // mlp hidden widths
  std::size_t width = 8;                 // base channel count for conv nets
  std::size_t blocks_per_stage = 3;      // resnet20ish
  bool binarize_activations = true;
  bool first_layer_full_precision = true;
  bool last_layer_full_precision = true;

  void validate() const;
  nlohmann::json to_json() const;
  static ModelSpec from_json(const nlohmann::json& j);
};

nlohmann::json quant_to_json(const QuantSpec& q);
QuantSpec quant_from_json(const nlohmann::json& j);

class Model {
 public:
  Model(ModelSpec spec, QuantSpec quant, std::uint64_t seed);

  ad::Variable forward(const ad::Variable& x, const ForwardContext& ctx);
  /// Inference logits without recording a graph.
  Tensor predict(const Tensor& x, Stage stage);

  const ModelSpec& spec() const { return spec_; }
  const QuantSpec& quant() const { return quant_; }
  void set_omega0(double omega0);

  StateList state();
  std::size_t parameter_count();
  std::vector<BinaryLayer*> binary_layers() { return binary_; }

  /// Narrows every parameter and buffer to float32 precision.
  void round_to_float32();

  Checkpoint to_checkpoint(nlohmann::json metadata = nlohmann::json::object());
  /// Copies tensors by name; throws on missing names or shape mismatch.
  void load_state(const Checkpoint& ck);

 private:
  ModelSpec spec_;
  QuantSpec quant_;
  std::vector<std::unique_ptr<Layer>> layers_;
  std::vector<BinaryLayer*> binary_;
};

/// Kaiming fan-in initialised model.
Model build_model(const ModelSpec& spec, const QuantSpec& quant, std::uint64_t seed);

void save_model(Model& model, const std::filesystem::path& manifest,
                nlohmann::json metadata = nlohmann::json::object());
Model load_model(const std::filesystem::path& manifest);

// ---- packed models -------------------------------------------------------

struct PackReport {
  std::size_t binary_layers = 0;
  std::size_t binary_weight_count = 0;
  std::size_t float_weight_bytes = 0;   // latent weights as float32
  std::size_t packed_weight_bytes = 0;  // bitstream payload
  double compression() const {
    return packed_weight_bytes ? static_cast<double>(float_weight_bytes) / packed_weight_bytes : 0.0;
  }
};

/// Writes binarized layers as bitstreams (+ float64 scales) and everything
/// else as float32. Throws if the model has no binarized layer.
PackReport save_packed_model(Model& model, const std::filesystem::path& manifest);
Model load_packed_model(const std::filesystem::path& manifest);

}  // namespace biper::nn
