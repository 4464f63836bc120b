#pragma once

// Experiment configuration in INI form:
//
//   [data]    dataset = mnist | cifar10 | two-moons, dir, train_limit, val_limit,
//             synth_train, synth_val, synth_noise, normalize
//   [model]   architecture, width, hidden = 64,64, blocks_per_stage, binarize_activations
//   [quant]   method, omega0, scaling
//   [stage1]  epochs, batch_size, lr, weight_decay, momentum, scheduler, augment_crop, augment_flip
//   [stage2]  same keys as stage1
//   [run]     seed, warm (stage-1 checkpoint for stage 2)
//
// Missing keys keep their defaults; unknown sections or keys are errors.

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>

#include "biper/data_io.hpp"
#include "biper/layers.hpp"
#include "biper/quantization.hpp"
#include "biper/training.hpp"

namespace biper {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataConfig {
  std::string dataset = "mnist";
  std::filesystem::path dir = "data/mnist";
  std::size_t train_limit = 0;  // 0 = everything; otherwise a class-balanced prefix
  std::size_t val_limit = 0;
  std::size_t synth_train = 400;
  std::size_t synth_val = 200;
  double synth_noise = 0.1;
  bool normalize = true;   // per-channel statistics of the training split
};

struct ExperimentConfig {
  DataConfig data;
  nn::ModelSpec model;
  QuantSpec quant;
  train::TrainConfig stage1 = train::TrainConfig::for_stage(1);
  train::TrainConfig stage2 = train::TrainConfig::for_stage(2);
  std::uint64_t seed = 0;
  std::filesystem::path warm;

  static ExperimentConfig from_file(const std::filesystem::path& path);
  static ExperimentConfig from_string(const std::string& ini);
  std::string to_ini() const;

  /// Sets the run seed on both stages.
  void set_seed(std::uint64_t s);
  /// Input shape and class count implied by the dataset.
  void apply_dataset_shape();
  void validate() const;
};

struct DataSplits {
  data::Dataset train;
  data::Dataset val;
};

DataSplits load_datasets(const DataConfig& cfg, std::uint64_t seed);

}  // namespace biper
