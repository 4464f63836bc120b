#include <fstream>

#include "biper/checkpoint.hpp"
#include "biper/data_io.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace biper;
using testing::TempDir;

namespace {

void write_bytes(const std::filesystem::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("IDX files round-trip with big-endian headers") {
  TempDir dir("idx");
  data::IdxArray a{{2, 3}, {0, 1, 2, 250, 254, 255}};
  data::write_idx(dir / "a.idx", a);
  const auto bytes = read_bytes(dir / "a.idx");
  REQUIRE(bytes.size() == 4 + 8 + 6);
  CHECK(bytes[2] == 0x08);
  CHECK(bytes[3] == 2);
  CHECK(bytes[7] == 2);   // low byte of dim 0
  CHECK(bytes[11] == 3);  // low byte of dim 1
  const auto back = data::load_idx(dir / "a.idx");
  CHECK(back.dims == a.dims);
  CHECK(back.values == a.values);
  CHECK_THROWS(data::write_idx(dir / "b.idx", {{2, 2}, {1, 2, 3}}));
}

TEST_CASE("malformed IDX files name the byte offset") {
  TempDir dir("idxbad");
  data::write_idx(dir / "ok.idx", {{4}, {1, 2, 3, 4}});
  auto ok = read_bytes(dir / "ok.idx");

  auto bad_magic = ok;
  bad_magic[2] = 0x09;
  write_bytes(dir / "magic.idx", bad_magic);
  CHECK(error_of([&] { data::load_idx(dir / "magic.idx"); }).find("offset 0") != std::string::npos);

  auto truncated = ok;
  truncated.resize(ok.size() - 2);
  write_bytes(dir / "trunc.idx", truncated);
  const auto msg = error_of([&] { data::load_idx(dir / "trunc.idx"); });
  CHECK(msg.find("truncated") != std::string::npos);
  CHECK(msg.find("offset 10") != std::string::npos);

  write_bytes(dir / "hdr.idx", {0, 0, 8});
  CHECK(error_of([&] { data::load_idx(dir / "hdr.idx"); }).find("offset") != std::string::npos);

  auto trailing = ok;
  trailing.push_back(7);
  write_bytes(dir / "trail.idx", trailing);
  CHECK(error_of([&] { data::load_idx(dir / "trail.idx"); }).find("offset 12") != std::string::npos);

  CHECK_THROWS_AS(data::load_idx(dir / "missing.idx"), data::FormatError);
}

TEST_CASE("MNIST-format pairs load as [N,1,28,28] in [0,1]") {
  TempDir dir("mnist");
  std::vector<std::uint8_t> pix(3 * 28 * 28, 0);
  pix[0] = 255;
  pix[28 * 28 + 5] = 51;
  data::write_idx(dir / "train-images-idx3-ubyte", {{3, 28, 28}, pix});
  data::write_idx(dir / "train-labels-idx1-ubyte", {{3}, {7, 0, 9}});
  const auto ds = data::load_mnist(dir.path, "train");
  CHECK(ds.images.shape() == Shape{3, 1, 28, 28});
  CHECK(ds.labels == std::vector<int>{7, 0, 9});
  CHECK(ds.classes == 10);
  CHECK(ds.images[0] == 1.0);
  CHECK(ds.images[28 * 28 + 5] == doctest::Approx(0.2));
  CHECK_THROWS(data::load_mnist(dir.path, "val"));
  CHECK_THROWS_AS(data::load_mnist(dir.path, "test"), data::FormatError);

  data::write_idx(dir / "t10k-images-idx3-ubyte", {{3, 28, 28}, pix});
  data::write_idx(dir / "t10k-labels-idx1-ubyte", {{2}, {1, 2}});
  CHECK_THROWS_AS(data::load_mnist(dir.path, "test"), data::FormatError);
}

TEST_CASE("CIFAR-10 batches are fixed-size records") {
  TempDir dir("cifar");
  std::vector<std::uint8_t> bytes(data::kCifarRecordBytes * data::kCifarRecordsPerBatch, 0);
  bytes[0] = 3;
  bytes[1] = 255;                                     // record 0, red (0,0)
  bytes[1 + 1024] = 51;                               // record 0, green (0,0)
  bytes[data::kCifarRecordBytes] = 9;                 // record 1 label
  write_bytes(dir / "test_batch.bin", bytes);
  const auto ds = data::load_cifar10(dir.path, "test");
  CHECK(ds.images.shape() == Shape{10000, 3, 32, 32});
  CHECK(ds.labels[0] == 3);
  CHECK(ds.labels[1] == 9);
  CHECK(ds.images[0] == 1.0);
  CHECK(ds.images[1024] == doctest::Approx(0.2));

  bytes[2 * data::kCifarRecordBytes] = 10;
  write_bytes(dir / "bad_label.bin", bytes);
  const auto msg = error_of([&] { data::load_cifar10_batch(dir / "bad_label.bin"); });
  CHECK(msg.find("offset " + std::to_string(2 * data::kCifarRecordBytes)) != std::string::npos);

  bytes.resize(bytes.size() - 1);
  write_bytes(dir / "short.bin", bytes);
  CHECK_THROWS_AS(data::load_cifar10_batch(dir / "short.bin"), data::FormatError);
}

TEST_CASE("two moons: balanced, deterministic, and separable by nearest neighbour") {
  const auto a = data::synth_two_moons(400, 0.1, 3);
  const auto b = data::synth_two_moons(400, 0.1, 3);
  CHECK(a.images == b.images);
  CHECK(a.labels == b.labels);
  CHECK_FALSE(data::synth_two_moons(400, 0.1, 4).images == a.images);
  CHECK(std::count(a.labels.begin(), a.labels.end(), 0) == 200);
  CHECK(a.images.shape() == Shape{400, 2});

  std::size_t correct = 0;
  for (std::size_t i = 0; i < 400; ++i) {
    double best = 1e300;
    int label = -1;
    for (std::size_t j = 0; j < 400; ++j) {
      if (i == j) continue;
      const double dx = a.images[2 * i] - a.images[2 * j], dy = a.images[2 * i + 1] - a.images[2 * j + 1];
      if (dx * dx + dy * dy < best) best = dx * dx + dy * dy, label = a.labels[j];
    }
    correct += label == a.labels[i];
  }
  CHECK(correct >= 396);
  CHECK_THROWS(data::synth_two_moons(3, 0.1, 0));
  CHECK_THROWS(data::synth_two_moons(4, -0.1, 0));
}

TEST_CASE("shuffle, subset and balanced prefix") {
  const auto idx = data::shuffled_indices(50, 9);
  CHECK(idx == data::shuffled_indices(50, 9));
  auto sorted = idx;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < 50; ++i) CHECK(sorted[i] == i);

  data::Dataset ds;
  ds.classes = 3;
  ds.images = Tensor({9, 2});
  ds.labels = {0, 0, 0, 0, 1, 1, 2, 2, 2};
  for (std::size_t i = 0; i < 18; ++i) ds.images[i] = static_cast<double>(i);
  const auto p = data::balanced_prefix(ds, 2);
  CHECK(p.labels == std::vector<int>{0, 0, 1, 1, 2, 2});
  CHECK(p.images[4] == 8.0);  // first class-1 row is row 4
  const std::vector<std::size_t> pick{8, 0};
  const auto s = data::subset(ds, pick);
  CHECK(s.labels == std::vector<int>{2, 0});
  CHECK(s.images[0] == 16.0);
  const std::vector<std::size_t> oob{9};
  CHECK_THROWS(data::gather(ds.images, oob));

  data::Dataset broken = ds;
  broken.labels.back() = 3;
  CHECK_THROWS(broken.validate());
}

TEST_CASE("per-channel normalization gives zero mean and unit variance") {
  std::mt19937_64 rng(2);
  data::Dataset ds;
  ds.classes = 2;
  ds.images = testing::random_tensor({10, 3, 4, 4}, rng, 0.0, 5.0);
  ds.labels.assign(10, 0);
  const auto norm = data::fit_normalization(ds);
  data::apply_normalization(ds, norm);
  const auto after = data::fit_normalization(ds);
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK(std::abs(after.mean[c]) < 1e-12);
    CHECK(after.stddev[c] == doctest::Approx(1.0));
  }
  CHECK_THROWS(data::apply_normalization(ds, {{0.0}, {1.0}}));
}

TEST_CASE("checkpoints round-trip float32 values exactly") {
  TempDir dir("ckpt");
  Checkpoint c;
  Tensor t({2, 3}, std::vector<double>{0.1, -2.5, 3e-8, 1e10, 0.0, -0.0});
  round_to_float32(t);
  c.tensors.push_back({"a", t});
  c.tensors.push_back({"b.c", Tensor::vector({1.0})});
  c.metadata = {{"k", 3}};
  save_checkpoint(dir / "m.json", c);
  CHECK(std::filesystem::exists(blob_path_for(dir / "m.json")));
  const auto back = load_checkpoint(dir / "m.json");
  CHECK(back.at("a") == t);
  CHECK(back.contains("b.c"));
  CHECK_FALSE(back.contains("x"));
  CHECK_THROWS_AS(back.at("x"), CheckpointError);
  CHECK(back.metadata["k"] == 3);

  // Truncated blob.
  std::filesystem::resize_file(blob_path_for(dir / "m.json"), 8);
  CHECK_THROWS_AS(load_checkpoint(dir / "m.json"), CheckpointError);
  CHECK_THROWS_AS(load_checkpoint(dir / "none.json"), CheckpointError);
  write_bytes(dir / "junk.json", {'{', 'x'});
  CHECK_THROWS_AS(load_checkpoint(dir / "junk.json"), CheckpointError);
}
