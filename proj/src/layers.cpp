#include "biper/layers.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>

#include "biper/qe_analytics.hpp"

namespace biper::nn {

namespace {

ad::Variable kaiming(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (double& v : t.data()) v = dist(rng);
  return ad::Variable(std::move(t), true);
}

ad::Variable flatten(const ad::Variable& x) {
  if (x.value().rank() <= 2) return x;
  const std::size_t n = x.shape()[0];
  return ad::reshape(x, {n, x.size() / n});
}

/// Per-output-channel scale vector of length `channels`.
Tensor expand_scale(const std::vector<double>& scale, std::size_t channels) {
  Tensor g({channels});
  for (std::size_t c = 0; c < channels; ++c) g[c] = scale.size() == 1 ? scale[0] : scale.at(c);
  return g;
}

}  // namespace

// ---- BatchNorm -----------------------------------------------------------

BatchNorm::BatchNorm(std::size_t channels)
    : weight(Tensor({channels}, 1.0), true), bias(Tensor({channels}, 0.0), true) {
  state.running_mean = Tensor({channels}, 0.0);
  state.running_var = Tensor({channels}, 1.0);
}

ad::Variable BatchNorm::forward(const ad::Variable& x, bool training) {
  return ad::batch_norm(x, weight, bias, state, training);
}

void BatchNorm::collect_state(const std::string& prefix, StateList& out) {
  out.push_back({prefix + ".weight", &weight, nullptr, false, false});
  out.push_back({prefix + ".bias", &bias, nullptr, false, false});
  out.push_back({prefix + ".running_mean", nullptr, &state.running_mean, false, false});
  out.push_back({prefix + ".running_var", nullptr, &state.running_var, false, false});
}

// ---- full-precision layers ----------------------------------------------

ConvBN::ConvBN(std::size_t in, std::size_t out, std::size_t kernel, ad::Conv2dGeometry geom,
               std::mt19937_64& rng)
    : weight_(kaiming({out, in, kernel, kernel}, in * kernel * kernel, rng)), geom_(geom), bn_(out) {}

ad::Variable ConvBN::forward(const ad::Variable& x, const ForwardContext& ctx) {
  return bn_.forward(ad::conv2d(x, weight_, geom_), ctx.training);
}

void ConvBN::collect_state(const std::string& prefix, StateList& out) {
  out.push_back({prefix + ".weight", &weight_, nullptr, true, false});
  bn_.collect_state(prefix + ".bn", out);
}

DenseLayer::DenseLayer(std::size_t in, std::size_t out, bool batch_norm, std::mt19937_64& rng)
    : weight_(kaiming({out, in}, in, rng)), bias_(Tensor({out}, 0.0), true) {
  if (batch_norm) bn_.emplace(out);
}

ad::Variable DenseLayer::forward(const ad::Variable& x, const ForwardContext& ctx) {
  ad::Variable y = ad::linear(flatten(x), weight_, bias_);
  return bn_ ? bn_->forward(y, ctx.training) : y;
}

void DenseLayer::collect_state(const std::string& prefix, StateList& out) {
  out.push_back({prefix + ".weight", &weight_, nullptr, true, false});
  out.push_back({prefix + ".bias", &bias_, nullptr, false, false});
  if (bn_) bn_->collect_state(prefix + ".bn", out);
}

Head::Head(std::size_t in, std::size_t classes, std::mt19937_64& rng) : fc_(in, classes, false, rng) {}

ad::Variable Head::forward(const ad::Variable& x, const ForwardContext& ctx) {
  return fc_.forward(x.value().rank() == 4 ? ad::global_avg_pool(x) : x, ctx);
}

void Head::collect_state(const std::string& prefix, StateList& out) {
  fc_.collect_state(prefix + ".fc", out);
}

// ---- binarized layer -----------------------------------------------------

BinaryLayer::BinaryLayer(Shape weight_shape, ad::Conv2dGeometry geom, const QuantSpec& quant,
                         bool binarize_activations, std::mt19937_64& rng)
    : weight_shape_(weight_shape),
      latent_(kaiming(weight_shape, shape_numel(weight_shape) / weight_shape.at(0), rng)),
      geom_(geom),
      quant_(quant),
      binarize_activations_(binarize_activations),
      bn_(weight_shape.at(0)) {
  if (weight_shape.size() != 2 && weight_shape.size() != 4) {
    throw ShapeError("BinaryLayer: weight shape " + shape_str(weight_shape) + " is neither [out,in] nor [OC,C,KH,KW]");
  }
  quant_.validate();
}

ad::Variable BinaryLayer::input_activation(const ad::Variable& x) const {
  return binarize_activations_ ? ad::custom_unary(x, activation_sign_op()) : ad::relu(x);
}

ad::Variable BinaryLayer::packed_forward(const ad::Variable& x) const {
  if (!binarize_activations_) {
    throw std::logic_error("BinaryLayer: packed inference needs binarized activations");
  }
  Tensor signs = x.value();
  for (double& v : signs.data()) v = sign_of(v);
  if (is_conv()) {
    return ad::Variable(bits::binary_conv2d(bits::pack_activations_nchw(signs), *packed_, geom_));
  }
  if (signs.rank() != 2) signs = signs.reshaped({signs.dim(0), signs.size() / signs.dim(0)});
  return ad::Variable(bits::binary_linear(bits::pack({std::move(signs), {1.0}}), *packed_));
}

ad::Variable BinaryLayer::conv_forward(const ad::Variable& x, const ForwardContext& ctx) {
  if (packed_) {
    if (ctx.training || ctx.stage != Stage::stage2) {
      throw std::logic_error("BinaryLayer: packed weights support stage-2 inference only");
    }
    return packed_forward(x);
  }
  const ad::Variable a = is_conv() ? input_activation(x) : input_activation(flatten(x));
  auto op = [&](const ad::Variable& w) {
    return is_conv() ? ad::conv2d(a, w, geom_) : ad::linear(a, w);
  };

  if (ctx.stage == Stage::stage1) {
    if (quant_.method == QuantMethod::biper) return op(ad::sin(ad::scale(latent_, quant_.omega0)));
    return op(latent_);
  }

  ad::Variable wq = ad::custom_unary(latent_, weight_binarizer_op(quant_));
  if (ctx.training && ad::grad_enabled()) {
    wq.retain_grad();
    last_binarized_ = wq;
  }
  ad::Variable y = op(wq);
  if (quant_.scaling == ScalingMode::none) return y;
  // gamma is a per-forward constant: the latent gradient is exactly the
  // binarizer surrogate times the upstream gradient.
  const auto gamma = binarize_weights(latent_.value(), quant_).scale;
  return ad::channel_scale(y, ad::Variable(expand_scale(gamma, weight_shape_[0])));
}

ad::Variable BinaryLayer::forward(const ad::Variable& x, const ForwardContext& ctx) {
  return bn_.forward(conv_forward(x, ctx), ctx.training);
}

void BinaryLayer::collect_state(const std::string& prefix, StateList& out) {
  out.push_back({prefix + ".weight", &latent_, nullptr, true, true});
  bn_.collect_state(prefix + ".bn", out);
}

BinarizedTensor BinaryLayer::binarized_weights() const {
  if (!packed_) return binarize_weights(latent_.value(), quant_);
  BinarizedTensor b = bits::unpack(*packed_);
  if (is_conv()) {
    // unpack() yields the [OC,KH,KW,C] tap layout; restore [OC,C,KH,KW].
    const Shape& s = weight_shape_;
    Tensor v(s);
    for (std::size_t o = 0; o < s[0]; ++o)
      for (std::size_t c = 0; c < s[1]; ++c)
        for (std::size_t ky = 0; ky < s[2]; ++ky)
          for (std::size_t kx = 0; kx < s[3]; ++kx)
            v[((o * s[1] + c) * s[2] + ky) * s[3] + kx] = b.values[((o * s[2] + ky) * s[3] + kx) * s[1] + c];
    b.values = std::move(v);
  }
  return b;
}

Tensor BinaryLayer::effective_weights(Stage stage) const {
  if (stage == Stage::stage1) return pre_binarization(latent_.value(), quant_);
  BinarizedTensor b = binarized_weights();
  const std::size_t inner = b.values.size() / weight_shape_[0];
  if (quant_.scaling == ScalingMode::none) return b.values;
  const Tensor g = expand_scale(b.scale, weight_shape_[0]);
  for (std::size_t i = 0; i < b.values.size(); ++i) b.values[i] *= g[i / inner];
  return b.values;
}

double BinaryLayer::laplace_b() const { return qe::fit_laplace(latent_.value()).b; }

void BinaryLayer::attach_packed(bits::PackedBitTensor packed) {
  Shape expected = weight_shape_;
  if (is_conv()) expected = {weight_shape_[0], weight_shape_[2], weight_shape_[3], weight_shape_[1]};
  if (packed.shape != expected) {
    throw ShapeError("attach_packed: expected " + shape_str(expected) + ", got " + shape_str(packed.shape));
  }
  packed_ = std::move(packed);
}

// ---- residual unit -------------------------------------------------------

ResidualUnit::ResidualUnit(std::size_t in, std::size_t out, std::size_t stride,
                           const QuantSpec& quant, bool binarize_activations, std::mt19937_64& rng)
    : body_({out, in, 3, 3}, {stride, 1}, quant, binarize_activations, rng) {
  if (in != out || stride != 1) {
    shortcut_ = std::make_unique<ConvBN>(in, out, 1, ad::Conv2dGeometry{stride, 0}, rng);
  }
}

ad::Variable ResidualUnit::forward(const ad::Variable& x, const ForwardContext& ctx) {
  ad::Variable y = body_.forward(x, ctx);
  return ad::add(y, shortcut_ ? shortcut_->forward(x, ctx) : x);
}

void ResidualUnit::collect_state(const std::string& prefix, StateList& out) {
  body_.collect_state(prefix + ".body", out);
  if (shortcut_) shortcut_->collect_state(prefix + ".shortcut", out);
}

// ---- specs ---------------------------------------------------------------

std::string to_string(Architecture a) {
  switch (a) {
    case Architecture::mlp: return "mlp";
    case Architecture::minicnn: return "minicnn";
    case Architecture::resnet20ish: return "resnet20-ish";
  }
  throw std::logic_error("to_string: unhandled architecture");
}

Architecture parse_architecture(const std::string& s) {
  if (s == "mlp") return Architecture::mlp;
  if (s == "minicnn") return Architecture::minicnn;
  if (s == "resnet20-ish" || s == "resnet20ish" || s == "resnet20") return Architecture::resnet20ish;
  throw std::invalid_argument("unknown architecture '" + s + "' (expected mlp, minicnn, resnet20-ish)");
}

void ModelSpec::validate() const {
  if (!first_layer_full_precision || !last_layer_full_precision) {
    throw std::invalid_argument("ModelSpec: first and last layers must be full precision");
  }
  if (num_classes < 2) throw std::invalid_argument("ModelSpec: need at least 2 classes");
  if (input_shape.empty() || shape_numel(input_shape) == 0) {
    throw std::invalid_argument("ModelSpec: empty input shape");
  }
  if (arch == Architecture::mlp) {
    if (hidden.empty()) throw std::invalid_argument("ModelSpec: mlp needs at least one hidden width");
    for (auto h : hidden)
      if (h == 0) throw std::invalid_argument("ModelSpec: zero hidden width");
  } else {
    if (input_shape.size() != 3) {
      throw std::invalid_argument("ModelSpec: conv nets take [C,H,W] inputs, got " + shape_str(input_shape));
    }
    if (width == 0) throw std::invalid_argument("ModelSpec: zero width");
    if (arch == Architecture::resnet20ish && blocks_per_stage == 0) {
      throw std::invalid_argument("ModelSpec: zero blocks per stage");
    }
  }
}

nlohmann::json ModelSpec::to_json() const {
  return {{"architecture", to_string(arch)},
          {"input_shape", input_shape},
          {"num_classes", num_classes},
          {"hidden", hidden},
          {"width", width},
          {"blocks_per_stage", blocks_per_stage},
          {"binarize_activations", binarize_activations},
          {"first_layer_full_precision", first_layer_full_precision},
          {"last_layer_full_precision", last_layer_full_precision}};
}

ModelSpec ModelSpec::from_json(const nlohmann::json& j) {
  ModelSpec s;
  s.arch = parse_architecture(j.at("architecture").get<std::string>());
  s.input_shape = j.at("input_shape").get<Shape>();
  s.num_classes = j.at("num_classes").get<std::size_t>();
  s.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  s.width = j.at("width").get<std::size_t>();
  s.blocks_per_stage = j.at("blocks_per_stage").get<std::size_t>();
  s.binarize_activations = j.at("binarize_activations").get<bool>();
  s.first_layer_full_precision = j.value("first_layer_full_precision", true);
  s.last_layer_full_precision = j.value("last_layer_full_precision", true);
  return s;
}

nlohmann::json quant_to_json(const QuantSpec& q) {
  return {{"method", to_string(q.method)}, {"omega0", q.omega0}, {"scaling", to_string(q.scaling)}};
}

QuantSpec quant_from_json(const nlohmann::json& j) {
  QuantSpec q;
  q.method = parse_quant_method(j.at("method").get<std::string>());
  q.omega0 = j.at("omega0").get<double>();
  q.scaling = parse_scaling_mode(j.at("scaling").get<std::string>());
  return q;
}

// ---- model ---------------------------------------------------------------

Model::Model(ModelSpec spec, QuantSpec quant, std::uint64_t seed)
    : spec_(std::move(spec)), quant_(quant) {
  spec_.validate();
  quant_.validate();
  std::mt19937_64 rng(seed);
  const bool binact = spec_.binarize_activations;
  auto add_binary = [&](std::unique_ptr<BinaryLayer> layer) {
    binary_.push_back(layer.get());
    layers_.push_back(std::move(layer));
  };

  switch (spec_.arch) {
    case Architecture::mlp: {
      const auto& h = spec_.hidden;
      layers_.push_back(std::make_unique<DenseLayer>(shape_numel(spec_.input_shape), h[0], true, rng));
      for (std::size_t i = 1; i < h.size(); ++i) {
        add_binary(std::make_unique<BinaryLayer>(Shape{h[i], h[i - 1]}, ad::Conv2dGeometry{}, quant_, binact, rng));
      }
      layers_.push_back(std::make_unique<Head>(h.back(), spec_.num_classes, rng));
      break;
    }
    case Architecture::minicnn: {
      const std::size_t c0 = spec_.input_shape[0], w = spec_.width;
      layers_.push_back(std::make_unique<ConvBN>(c0, w, 3, ad::Conv2dGeometry{2, 1}, rng));
      const std::size_t chans[][3] = {{w, 2 * w, 1}, {2 * w, 4 * w, 2}, {4 * w, 4 * w, 1}};
      for (const auto& c : chans) {
        add_binary(std::make_unique<BinaryLayer>(Shape{c[1], c[0], 3, 3}, ad::Conv2dGeometry{c[2], 1}, quant_,
                                                 binact, rng));
      }
      layers_.push_back(std::make_unique<Head>(4 * w, spec_.num_classes, rng));
      break;
    }
    case Architecture::resnet20ish: {
      const std::size_t c0 = spec_.input_shape[0], w = spec_.width;
      layers_.push_back(std::make_unique<ConvBN>(c0, w, 3, ad::Conv2dGeometry{1, 1}, rng));
      std::size_t in = w;
      for (std::size_t stage = 0; stage < 3; ++stage) {
        const std::size_t out = w << stage;
        for (std::size_t block = 0; block < spec_.blocks_per_stage; ++block) {
          for (std::size_t unit = 0; unit < 2; ++unit) {
            const std::size_t stride = stage > 0 && block == 0 && unit == 0 ? 2 : 1;
            auto u = std::make_unique<ResidualUnit>(in, out, stride, quant_, binact, rng);
            binary_.push_back(&u->body());
            layers_.push_back(std::move(u));
            in = out;
          }
        }
      }
      layers_.push_back(std::make_unique<Head>(in, spec_.num_classes, rng));
      break;
    }
  }
}

ad::Variable Model::forward(const ad::Variable& x, const ForwardContext& ctx) {
  Shape expected{x.shape().empty() ? 0 : x.shape()[0]};
  expected.insert(expected.end(), spec_.input_shape.begin(), spec_.input_shape.end());
  if (x.shape() != expected) {
    throw ShapeError("Model: input " + shape_str(x.shape()) + ", expected " + shape_str(expected));
  }
  ad::Variable h = x;
  for (auto& layer : layers_) h = layer->forward(h, ctx);
  return h;
}

Tensor Model::predict(const Tensor& x, Stage stage) {
  ad::NoGradGuard guard;
  constexpr std::size_t kChunk = 256;
  const std::size_t n = x.rank() ? x.dim(0) : 0;
  const std::size_t per = n ? x.size() / n : 0;
  Tensor out({n, spec_.num_classes});
  for (std::size_t start = 0; start < n; start += kChunk) {
    const std::size_t m = std::min(kChunk, n - start);
    Shape s = x.shape();
    s[0] = m;
    std::vector<double> chunk(x.storage().begin() + static_cast<std::ptrdiff_t>(start * per),
                              x.storage().begin() + static_cast<std::ptrdiff_t>((start + m) * per));
    const Tensor logits = forward(ad::Variable(Tensor(s, std::move(chunk))), {stage, false}).value();
    std::copy(logits.storage().begin(), logits.storage().end(),
              out.storage().begin() + static_cast<std::ptrdiff_t>(start * spec_.num_classes));
  }
  return out;
}

void Model::set_omega0(double omega0) {
  QuantSpec q = quant_;
  q.omega0 = omega0;
  q.validate();
  quant_ = q;
  for (auto* b : binary_) b->set_quant(q);
}

StateList Model::state() {
  StateList out;
  for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i]->collect_state("layers." + std::to_string(i), out);
  return out;
}

std::size_t Model::parameter_count() {
  std::size_t n = 0;
  for (auto& e : state())
    if (e.param) n += e.param->size();
  return n;
}

void Model::round_to_float32() {
  for (auto& e : state()) biper::round_to_float32(e.tensor());
}

Checkpoint Model::to_checkpoint(nlohmann::json metadata) {
  Checkpoint ck;
  for (auto& e : state()) ck.tensors.push_back({e.name, e.tensor()});
  metadata["model"] = spec_.to_json();
  metadata["quant"] = quant_to_json(quant_);
  ck.metadata = std::move(metadata);
  return ck;
}

void Model::load_state(const Checkpoint& ck) {
  for (auto& e : state()) {
    if (!ck.contains(e.name)) throw CheckpointError("checkpoint lacks tensor '" + e.name + "'");
    const Tensor& t = ck.at(e.name);
    if (t.shape() != e.tensor().shape()) {
      throw CheckpointError("tensor '" + e.name + "' has shape " + shape_str(t.shape()) + ", model expects " +
                            shape_str(e.tensor().shape()));
    }
    e.tensor() = t;
  }
}

Model build_model(const ModelSpec& spec, const QuantSpec& quant, std::uint64_t seed) {
  return Model(spec, quant, seed);
}

void save_model(Model& model, const std::filesystem::path& manifest, nlohmann::json metadata) {
  save_checkpoint(manifest, model.to_checkpoint(std::move(metadata)));
}

Model load_model(const std::filesystem::path& manifest) {
  const Checkpoint ck = load_checkpoint(manifest);
  if (!ck.metadata.contains("model") || !ck.metadata.contains("quant")) {
    throw CheckpointError(manifest.string() + ": manifest does not record a model architecture");
  }
  Model model(ModelSpec::from_json(ck.metadata.at("model")), quant_from_json(ck.metadata.at("quant")), 0);
  model.load_state(ck);
  return model;
}

// ---- packed models -------------------------------------------------------

namespace {

constexpr const char* kPackedFormat = "biper-packed";

template <class U>
void put_le(std::ostream& os, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xffu));
}

template <class U>
U get_le(const std::vector<unsigned char>& blob, std::size_t offset) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(blob[offset + i]) << (8 * i);
  return v;
}

std::vector<unsigned char> read_all(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

PackReport save_packed_model(Model& model, const std::filesystem::path& manifest) {
  if (model.binary_layers().empty()) throw std::invalid_argument("pack: model has no binarized layer");
  const auto blob = blob_path_for(manifest);
  std::ofstream bin(blob, std::ios::binary);
  if (!bin) throw CheckpointError("cannot write " + blob.string());

  PackReport report;
  nlohmann::json entries = nlohmann::json::array();
  std::size_t offset = 0;
  auto record = [&](const std::string& name, const Shape& shape, const char* dtype, std::size_t bytes) {
    entries.push_back({{"name", name}, {"shape", shape}, {"dtype", dtype}, {"offset", offset}, {"bytes", bytes}});
    offset += bytes;
  };

  std::size_t layer_index = 0;
  for (auto& e : model.state()) {
    if (e.latent_binary) {
      BinaryLayer& layer = *model.binary_layers().at(layer_index++);
      const BinarizedTensor b = layer.binarized_weights();
      const bits::PackedBitTensor p = layer.is_conv() ? bits::pack_conv_weights(b) : bits::pack(b);
      for (auto word : bits::to_bitstream(p)) put_le(bin, word);
      record(e.name + ".bits", p.shape, "bits", p.payload_bytes());
      for (double s : p.scale) put_le(bin, std::bit_cast<std::uint64_t>(s));
      record(e.name + ".scale", {p.scale.size()}, "float64", p.scale.size() * sizeof(double));
      report.binary_layers += 1;
      report.binary_weight_count += b.values.size();
      report.float_weight_bytes += b.values.size() * sizeof(float);
      report.packed_weight_bytes += p.payload_bytes();
    } else {
      for (double v : e.tensor().data()) put_le(bin, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      record(e.name, e.tensor().shape(), "float32", e.tensor().size() * sizeof(float));
    }
  }
  bin.close();
  if (!bin) throw CheckpointError("write failed for " + blob.string());

  nlohmann::json j = {{"format", kPackedFormat},
                      {"version", 1},
                      {"blob", blob.filename().string()},
                      {"blob_bytes", offset},
                      {"model", model.spec().to_json()},
                      {"quant", quant_to_json(model.quant())},
                      {"tensors", entries}};
  std::ofstream out(manifest);
  out << j.dump(2) << '\n';
  if (!out) throw CheckpointError("write failed for " + manifest.string());
  return report;
}

Model load_packed_model(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw CheckpointError("cannot open " + manifest.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(manifest.string() + ": " + e.what());
  }
  if (j.value("format", "") != kPackedFormat) {
    throw CheckpointError(manifest.string() + ": not a packed model manifest");
  }
  const auto blob = read_all(manifest.parent_path() / j.at("blob").get<std::string>());
  if (blob.size() != j.at("blob_bytes").get<std::size_t>()) {
    throw CheckpointError("packed blob has " + std::to_string(blob.size()) + " bytes, manifest says " +
                          std::to_string(j.at("blob_bytes").get<std::size_t>()));
  }
  std::map<std::string, nlohmann::json> index;
  for (const auto& e : j.at("tensors")) {
    const auto off = e.at("offset").get<std::size_t>(), bytes = e.at("bytes").get<std::size_t>();
    if (off > blob.size() || bytes > blob.size() - off) {
      throw CheckpointError("tensor '" + e.at("name").get<std::string>() + "' extends past the blob");
    }
    index[e.at("name").get<std::string>()] = e;
  }
  auto find = [&](const std::string& name, const char* dtype) -> const nlohmann::json& {
    auto it = index.find(name);
    if (it == index.end()) throw CheckpointError("packed model lacks '" + name + "'");
    if (it->second.at("dtype").get<std::string>() != dtype) {
      throw CheckpointError("'" + name + "' is not " + std::string(dtype));
    }
    return it->second;
  };

  Model model(ModelSpec::from_json(j.at("model")), quant_from_json(j.at("quant")), 0);
  std::size_t layer_index = 0;
  for (auto& e : model.state()) {
    if (e.latent_binary) {
      const auto& bj = find(e.name + ".bits", "bits");
      const auto& sj = find(e.name + ".scale", "float64");
      std::vector<std::uint64_t> words(bj.at("bytes").get<std::size_t>() / 8);
      for (std::size_t i = 0; i < words.size(); ++i)
        words[i] = get_le<std::uint64_t>(blob, bj.at("offset").get<std::size_t>() + 8 * i);
      std::vector<double> scale(sj.at("bytes").get<std::size_t>() / 8);
      for (std::size_t i = 0; i < scale.size(); ++i)
        scale[i] = std::bit_cast<double>(get_le<std::uint64_t>(blob, sj.at("offset").get<std::size_t>() + 8 * i));
      model.binary_layers().at(layer_index++)->attach_packed(
          bits::from_bitstream(bj.at("shape").get<Shape>(), words, std::move(scale)));
    } else {
      const auto& tj = find(e.name, "float32");
      Tensor& t = e.tensor();
      if (tj.at("shape").get<Shape>() != t.shape()) {
        throw CheckpointError("'" + e.name + "' has shape " + shape_str(tj.at("shape").get<Shape>()) +
                              ", model expects " + shape_str(t.shape()));
      }
      const auto off = tj.at("offset").get<std::size_t>();
      for (std::size_t i = 0; i < t.size(); ++i)
        t[i] = static_cast<double>(std::bit_cast<float>(get_le<std::uint32_t>(blob, off + 4 * i)));
    }
  }
  return model;
}

}  // namespace biper::nn
