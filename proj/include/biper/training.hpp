#pragma once

// Two-stage training. Stage 1 trains real weights w_hat = sin(omega0 w) with
// binary activations; stage 2 warm-starts from stage 1 and binarizes the
// weights. SGD with classical momentum, L2 weight decay folded into the
// gradient, cosine learning rate per epoch.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "biper/checkpoint.hpp"
#include "biper/data_io.hpp"
#include "biper/layers.hpp"
#include "json.hpp"

namespace biper::train {

enum class Scheduler { cosine, constant };

struct TrainConfig {
  int stage = 1;
  std::size_t epochs = 5;
  std::size_t batch_size = 64;
  double lr0 = 0.1;
  double weight_decay = 5e-4;
  double momentum = 0.9;
  Scheduler scheduler = Scheduler::cosine;
  std::uint64_t seed = 0;
  bool augment_crop = false;
  bool augment_flip = false;

  /// Stage 1: lr 0.1, wd 5e-4. Stage 2: lr 0.01, wd 5e-5. Momentum 0.9.
  static TrainConfig for_stage(int stage);
  void validate() const;
  nlohmann::json to_json() const;
};

/// v <- momentum v + (grad + wd param); param <- param - lr v.
/// An empty velocity is treated as zero.
void sgd_momentum_step(Tensor& param, const Tensor& grad, Tensor& velocity, double lr,
                       double momentum, double weight_decay);

/// lr0 * 0.5 * (1 + cos(pi epoch / total)) for 0 <= epoch < total.
double cosine_lr(std::size_t epoch, std::size_t total, double lr0);

struct AugmentFlags {
  bool crop = false;  // random translation within a 4-pixel zero pad
  bool flip = false;  // horizontal flip with probability 1/2
};

/// In-place augmentation of an image batch [N,C,H,W].
void augment(Tensor& batch, AugmentFlags flags, std::mt19937_64& rng);

struct EvalResult {
  double top1 = 0.0;
  double top5 = -1.0;  // negative when there are fewer than 10 classes
  double loss = 0.0;
  std::size_t count = 0;
};

EvalResult evaluate(nn::Model& model, const data::Dataset& ds, nn::Stage stage);

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  double lr = 0.0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_top1 = -1.0;
  double val_top5 = -1.0;
  double seconds = 0.0;
};

struct LayerStats {
  std::size_t index = 0;
  std::size_t weights = 0;
  double qe = 0.0;
  double b_hat = 0.0;
};

/// Worst observed max|dL/dw| / (omega0 max|dL/dw^q|) per binarized layer and
/// step; the BiPer surrogate keeps it at or below 1.
struct GradientBound {
  std::size_t checks = 0;
  double max_ratio = 0.0;
};

struct RunRecord {
  int stage = 1;
  std::string method;
  double omega0 = 0.0;
  std::uint64_t seed = 0;
  std::vector<EpochStats> epochs;
  std::vector<LayerStats> layers;  // end of stage
  double start_qe = -1.0;          // warm-start QE (stage 2)
  double final_qe = 0.0;           // weight-count-weighted mean over layers
  double final_b_hat = 0.0;
  EvalResult final_eval;           // after float32 rounding
  GradientBound gradient_bound;
  nlohmann::json config;

  nlohmann::json to_json() const;
  /// One row per epoch.
  void write_epochs_csv(std::ostream& os) const;
  /// One row per binarized layer.
  void write_layers_csv(std::ostream& os) const;
};

struct TrainResult {
  nn::Model model;
  RunRecord record;
};

using EpochCallback = std::function<void(const EpochStats&)>;

/// Initialises a model from (spec, quant, cfg.seed) and trains it with real
/// weights. Throws NumericError if the loss stops being finite.
TrainResult train_stage1(const TrainConfig& cfg, const nn::ModelSpec& spec, const QuantSpec& quant,
                         const data::Dataset& train, const data::Dataset* val = nullptr,
                         const EpochCallback& on_epoch = {});

/// Warm-starts from a stage-1 checkpoint; its recorded architecture and
/// quantizer must equal (spec, quant).
TrainResult train_stage2(const TrainConfig& cfg, const Checkpoint& warm, const nn::ModelSpec& spec,
                         const QuantSpec& quant, const data::Dataset& train,
                         const data::Dataset* val = nullptr, const EpochCallback& on_epoch = {});

double model_qe(nn::Model& model);
double model_b_hat(nn::Model& model);
std::vector<LayerStats> layer_stats(nn::Model& model);

// ---- frequency ablation -------------------------------------------------

struct AblationRow {
  double omega0 = 0.0;
  std::uint64_t seed = 0;
  double stage1_top1 = 0.0;
  double stage1_qe = 0.0;
  double stage1_b_hat = 0.0;
  double stage2_top1 = -1.0;  // negative when stage 2 was skipped
  double stage2_qe = -1.0;
};

struct AblationSummary {
  double omega0 = 0.0;
  double stage1_top1 = 0.0;  // medians over seeds
  double stage1_qe = 0.0;
  double stage1_b_hat = 0.0;
  double stage2_top1 = -1.0;
};

struct AblationConfig {
  std::vector<double> omegas{5.0, 10.0, 20.0, 30.0};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  TrainConfig stage1 = TrainConfig::for_stage(1);
  TrainConfig stage2 = TrainConfig::for_stage(2);
  bool run_stage2 = false;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  std::vector<AblationSummary> summary;  // one per omega, grid order
};

/// Called after each (omega0, seed) with the trained stage-1 model.
using AblationCallback = std::function<void(const AblationRow&, nn::Model&)>;

AblationResult ablate_omega(const AblationConfig& cfg, const nn::ModelSpec& spec, ScalingMode scaling,
                            const data::Dataset& train, const data::Dataset& val,
                            const AblationCallback& on_row = {});

double median(std::vector<double> v);

/// Panels: precision (top-1), QE and b_hat against omega0; per-seed columns
/// plus the median.
void write_ablation_csv(std::ostream& os, const AblationResult& result, const std::string& panel);

}  // namespace biper::train
