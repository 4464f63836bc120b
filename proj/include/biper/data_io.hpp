#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "biper/tensor.hpp"

namespace biper::data {

/// Malformed dataset file; the message names the byte offset.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// images [N,C,H,W] (or [N,F] for tabular tasks), integer labels in [0, classes).
struct Dataset {
  Tensor images;
  std::vector<int> labels;
  std::size_t classes = 0;
  std::string name;

  std::size_t size() const { return labels.size(); }
  void validate() const;
};

/// Unsigned-byte IDX array (type code 0x08) with big-endian dimensions.
struct IdxArray {
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> values;
};

IdxArray load_idx(const std::filesystem::path& path);
void write_idx(const std::filesystem::path& path, const IdxArray& array);

/// Pair of IDX files (images [N,28,28], labels [N]) -> Dataset scaled to [0,1].
Dataset load_mnist_pair(const std::filesystem::path& images, const std::filesystem::path& labels);
/// split is "train" or "test"; uses the canonical MNIST file names in dir.
Dataset load_mnist(const std::filesystem::path& dir, const std::string& split);

constexpr std::size_t kCifarRecordBytes = 1 + 3 * 32 * 32;
constexpr std::size_t kCifarRecordsPerBatch = 10000;

/// One CIFAR-10 binary batch file of exactly 10,000 records.
Dataset load_cifar10_batch(const std::filesystem::path& path);
/// "train" concatenates data_batch_1..5, "test" reads test_batch.bin.
Dataset load_cifar10(const std::filesystem::path& dir, const std::string& split);

/// Two interleaved half circles, n/2 points per class, features [n,2].
Dataset synth_two_moons(std::size_t n, double noise, std::uint64_t seed);

struct Normalization {
  std::vector<double> mean;
  std::vector<double> stddev;
};

/// Per-channel (axis 1) statistics over all samples and positions.
Normalization fit_normalization(const Dataset& ds);
void apply_normalization(Dataset& ds, const Normalization& norm);

/// Random permutation of 0..n-1 determined by seed.
std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed);

Dataset subset(const Dataset& ds, std::span<const std::size_t> indices);
/// First `per_class` examples of each class, in dataset order.
Dataset balanced_prefix(const Dataset& ds, std::size_t per_class);

/// Rows `indices` of images, keeping trailing dims.
Tensor gather(const Tensor& images, std::span<const std::size_t> indices);

}  // namespace biper::data
