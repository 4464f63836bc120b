#include "biper/data_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>

namespace biper::data {

namespace {

constexpr std::uint32_t kIdxUbyte = 0x08;

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& bytes, std::size_t offset,
                        const std::filesystem::path& path) {
  if (offset + 4 > bytes.size()) {
    throw FormatError(path.string() + ": truncated header at offset " + std::to_string(offset));
  }
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void put_be32(std::ofstream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                     static_cast<char>(v >> 8), static_cast<char>(v)};
  out.write(b, 4);
}

}  // namespace

void Dataset::validate() const {
  if (images.empty() || images.dim(0) != labels.size()) {
    throw std::invalid_argument("dataset '" + name + "': " + std::to_string(labels.size()) +
                                " labels for images " + shape_str(images.shape()));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw std::invalid_argument("dataset '" + name + "': label " + std::to_string(y) +
                                  " outside [0," + std::to_string(classes) + ")");
    }
  }
}

IdxArray load_idx(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  const std::uint32_t magic = read_be32(bytes, 0, path);
  if ((magic >> 16) != 0 || ((magic >> 8) & 0xff) != kIdxUbyte) {
    throw FormatError(path.string() + ": bad IDX magic at offset 0");
  }
  const std::size_t ndims = magic & 0xff;
  if (ndims == 0) throw FormatError(path.string() + ": zero-dimensional IDX at offset 3");
  IdxArray arr;
  std::size_t count = 1;
  for (std::size_t d = 0; d < ndims; ++d) {
    arr.dims.push_back(read_be32(bytes, 4 + 4 * d, path));
    count *= arr.dims.back();
  }
  const std::size_t header = 4 + 4 * ndims;
  if (bytes.size() < header + count) {
    throw FormatError(path.string() + ": truncated data at offset " + std::to_string(bytes.size()) +
                      ", expected " + std::to_string(header + count) + " bytes");
  }
  if (bytes.size() > header + count) {
    throw FormatError(path.string() + ": trailing bytes at offset " +
                      std::to_string(header + count));
  }
  arr.values.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header), bytes.end());
  return arr;
}

void write_idx(const std::filesystem::path& path, const IdxArray& array) {
  std::size_t count = 1;
  for (auto d : array.dims) count *= d;
  if (array.dims.empty() || array.dims.size() > 255 || count != array.values.size()) {
    throw std::invalid_argument("write_idx: dims do not match value count");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  put_be32(out, (kIdxUbyte << 8) | static_cast<std::uint32_t>(array.dims.size()));
  for (auto d : array.dims) put_be32(out, d);
  out.write(reinterpret_cast<const char*>(array.values.data()),
            static_cast<std::streamsize>(array.values.size()));
}

Dataset load_mnist_pair(const std::filesystem::path& images, const std::filesystem::path& labels) {
  const IdxArray img = load_idx(images);
  const IdxArray lab = load_idx(labels);
  if (img.dims.size() != 3) throw FormatError(images.string() + ": expected [N,H,W] images");
  if (lab.dims.size() != 1) throw FormatError(labels.string() + ": expected [N] labels");
  if (img.dims[0] != lab.dims[0]) {
    throw FormatError("mnist: " + std::to_string(img.dims[0]) + " images but " +
                      std::to_string(lab.dims[0]) + " labels");
  }
  Dataset ds;
  ds.name = "mnist";
  ds.classes = 10;
  const std::size_t N = img.dims[0], H = img.dims[1], W = img.dims[2];
  ds.images = Tensor({N, 1, H, W});
  for (std::size_t i = 0; i < img.values.size(); ++i) ds.images[i] = img.values[i] / 255.0;
  ds.labels.assign(lab.values.begin(), lab.values.end());
  ds.validate();
  return ds;
}

Dataset load_mnist(const std::filesystem::path& dir, const std::string& split) {
  const std::string prefix = split == "train" ? "train" : split == "test" ? "t10k" : "";
  if (prefix.empty()) throw std::invalid_argument("mnist split must be train or test");
  return load_mnist_pair(dir / (prefix + "-images-idx3-ubyte"), dir / (prefix + "-labels-idx1-ubyte"));
}

Dataset load_cifar10_batch(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  if (bytes.size() != kCifarRecordBytes * kCifarRecordsPerBatch) {
    throw FormatError(path.string() + ": expected " +
                      std::to_string(kCifarRecordsPerBatch) + " records (" +
                      std::to_string(kCifarRecordBytes * kCifarRecordsPerBatch) +
                      " bytes), file ends at offset " + std::to_string(bytes.size()));
  }
  Dataset ds;
  ds.name = "cifar10";
  ds.classes = 10;
  const std::size_t N = kCifarRecordsPerBatch, plane = 32 * 32;
  ds.images = Tensor({N, 3, 32, 32});
  ds.labels.resize(N);
  for (std::size_t r = 0; r < N; ++r) {
    const std::size_t base = r * kCifarRecordBytes;
    if (bytes[base] > 9) {
      throw FormatError(path.string() + ": label " + std::to_string(bytes[base]) + " at offset " +
                        std::to_string(base));
    }
    ds.labels[r] = bytes[base];
    // Record layout: label, then the R, G and B planes, row-major.
    for (std::size_t i = 0; i < 3 * plane; ++i) ds.images[r * 3 * plane + i] = bytes[base + 1 + i] / 255.0;
  }
  return ds;
}

Dataset load_cifar10(const std::filesystem::path& dir, const std::string& split) {
  std::vector<std::filesystem::path> files;
  if (split == "train") {
    for (int i = 1; i <= 5; ++i) files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
  } else if (split == "test") {
    files.push_back(dir / "test_batch.bin");
  } else {
    throw std::invalid_argument("cifar10 split must be train or test");
  }
  Dataset all;
  all.name = "cifar10";
  all.classes = 10;
  std::vector<double> pixels;
  for (const auto& f : files) {
    Dataset part = load_cifar10_batch(f);
    pixels.insert(pixels.end(), part.images.data().begin(), part.images.data().end());
    all.labels.insert(all.labels.end(), part.labels.begin(), part.labels.end());
  }
  all.images = Tensor({all.labels.size(), 3, 32, 32}, std::move(pixels));
  return all;
}

Dataset synth_two_moons(std::size_t n, double noise, std::uint64_t seed) {
  if (n == 0 || n % 2 != 0) throw std::invalid_argument("synth_two_moons: n must be even and > 0");
  if (noise < 0.0) throw std::invalid_argument("synth_two_moons: noise must be >= 0");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
  std::normal_distribution<double> jitter(0.0, 1.0);
  Dataset ds;
  ds.name = "two-moons";
  ds.classes = 2;
  ds.images = Tensor({n, 2});
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    const double t = angle(rng);
    double x = label == 0 ? std::cos(t) : 1.0 - std::cos(t);
    double y = label == 0 ? std::sin(t) : 0.5 - std::sin(t);
    // Pull the arcs apart vertically so the classes stay separable at zero noise.
    y += label == 0 ? 0.3 : -0.3;
    if (noise > 0.0) {
      x += noise * jitter(rng);
      y += noise * jitter(rng);
    }
    ds.images[2 * i] = x;
    ds.images[2 * i + 1] = y;
    ds.labels[i] = label;
  }
  return ds;
}

Normalization fit_normalization(const Dataset& ds) {
  const std::size_t N = ds.images.dim(0), C = ds.images.dim(1);
  const std::size_t inner = ds.images.size() / (N * C);
  Normalization norm{std::vector<double>(C, 0.0), std::vector<double>(C, 0.0)};
  const double count = static_cast<double>(N * inner);
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0.0;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t i = 0; i < inner; ++i) s += ds.images[(n * C + c) * inner + i];
    const double mu = s / count;
    double v = 0.0;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t i = 0; i < inner; ++i) {
        const double d = ds.images[(n * C + c) * inner + i] - mu;
        v += d * d;
      }
    norm.mean[c] = mu;
    norm.stddev[c] = std::sqrt(v / count);
    if (!(norm.stddev[c] > 0.0)) norm.stddev[c] = 1.0;
  }
  return norm;
}

void apply_normalization(Dataset& ds, const Normalization& norm) {
  const std::size_t N = ds.images.dim(0), C = ds.images.dim(1);
  if (norm.mean.size() != C || norm.stddev.size() != C) {
    throw std::invalid_argument("apply_normalization: channel count mismatch");
  }
  const std::size_t inner = ds.images.size() / (N * C);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < inner; ++i) {
        double& v = ds.images[(n * C + c) * inner + i];
        v = (v - norm.mean[c]) / norm.stddev[c];
      }
}

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  // Explicit Fisher-Yates so the order does not depend on the library's shuffle.
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

Tensor gather(const Tensor& images, std::span<const std::size_t> indices) {
  Shape shape = images.shape();
  const std::size_t row = images.size() / shape[0];
  shape[0] = indices.size();
  Tensor out(shape);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= images.dim(0)) throw std::out_of_range("gather: index out of range");
    std::copy_n(images.data().begin() + static_cast<std::ptrdiff_t>(indices[i] * row), row,
                out.data().begin() + static_cast<std::ptrdiff_t>(i * row));
  }
  return out;
}

Dataset subset(const Dataset& ds, std::span<const std::size_t> indices) {
  Dataset out;
  out.name = ds.name;
  out.classes = ds.classes;
  out.images = gather(ds.images, indices);
  out.labels.reserve(indices.size());
  for (auto i : indices) out.labels.push_back(ds.labels.at(i));
  return out;
}

Dataset balanced_prefix(const Dataset& ds, std::size_t per_class) {
  std::vector<std::size_t> counts(ds.classes, 0), keep;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto& c = counts[static_cast<std::size_t>(ds.labels[i])];
    if (c < per_class) {
      ++c;
      keep.push_back(i);
    }
  }
  return subset(ds, keep);
}

}  // namespace biper::data
