#include "biper/bitkernel.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <ostream>
#include <random>
#include <stdexcept>

namespace biper::bits {

namespace {

constexpr std::size_t kWordBits = 64;

std::size_t words_for(std::size_t bits) { return (bits + kWordBits - 1) / kWordBits; }

void set_bit(std::span<std::uint64_t> row, std::size_t i) {
  row[i / kWordBits] |= std::uint64_t{1} << (i % kWordBits);
}

bool get_bit(std::span<const std::uint64_t> row, std::size_t i) {
  return (row[i / kWordBits] >> (i % kWordBits)) & 1u;
}

double scale_at(const std::vector<double>& scale, std::size_t c) {
  return scale.size() == 1 ? scale[0] : scale.at(c);
}

bool bit_value(double v) {
  if (v == 1.0) return true;
  if (v == -1.0) return false;
  throw std::invalid_argument("pack: entry " + std::to_string(v) + " is not +-1");
}

}  // namespace

std::size_t PackedBitTensor::payload_bytes() const {
  return words_for(rows * cols) * sizeof(std::uint64_t);
}

PackedBitTensor make_packed(Shape shape) {
  if (shape.empty()) throw ShapeError("pack: scalar shape");
  PackedBitTensor p;
  p.cols = shape.back();
  p.rows = p.cols == 0 ? 0 : shape_numel(shape) / p.cols;
  p.words_per_row = words_for(p.cols);
  p.pad_bits = p.words_per_row * kWordBits - p.cols;
  p.words.assign(p.rows * p.words_per_row, 0);
  p.shape = std::move(shape);
  return p;
}

PackedBitTensor pack(const BinarizedTensor& b) {
  PackedBitTensor p = make_packed(b.values.shape());
  for (std::size_t r = 0; r < p.rows; ++r) {
    auto row = p.row(r);
    for (std::size_t c = 0; c < p.cols; ++c)
      if (bit_value(b.values[r * p.cols + c])) set_bit(row, c);
  }
  p.scale = b.scale;
  return p;
}

BinarizedTensor unpack(const PackedBitTensor& p) {
  Tensor values(p.shape);
  for (std::size_t r = 0; r < p.rows; ++r) {
    const auto row = p.row(r);
    for (std::size_t c = 0; c < p.cols; ++c) values[r * p.cols + c] = get_bit(row, c) ? 1.0 : -1.0;
  }
  return {std::move(values), p.scale};
}

std::int64_t xnor_dot(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b,
                      std::size_t n) {
  if (a.size() != b.size() || a.size() != words_for(n)) {
    throw ShapeError("xnor_dot: length mismatch (" + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()) + " words for " + std::to_string(n) + " bits)");
  }
  std::int64_t matches = 0;
  for (std::size_t i = 0; i < a.size(); ++i) matches += std::popcount(~(a[i] ^ b[i]));
  // Zeroed pad bits agree with each other and count as matches.
  matches -= static_cast<std::int64_t>(a.size() * kWordBits - n);
  return 2 * matches - static_cast<std::int64_t>(n);
}

std::int64_t xnor_dot(const PackedBitTensor& a, std::size_t ra, const PackedBitTensor& b,
                      std::size_t rb) {
  if (a.cols != b.cols) {
    throw ShapeError("xnor_dot: row lengths " + std::to_string(a.cols) + " and " +
                     std::to_string(b.cols) + " differ");
  }
  if (ra >= a.rows || rb >= b.rows) throw std::out_of_range("xnor_dot: row index");
  return xnor_dot(a.row(ra), b.row(rb), a.cols);
}

PackedBitTensor pack_activations_nchw(const Tensor& a) {
  if (a.rank() != 4) throw ShapeError("pack_activations_nchw: expects [N,C,H,W]");
  const std::size_t N = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
  PackedBitTensor p = make_packed({N, H, W, C});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          if (bit_value(a[((n * C + c) * H + y) * W + x])) set_bit(p.row((n * H + y) * W + x), c);
        }
  return p;
}

PackedBitTensor pack_conv_weights(const BinarizedTensor& w) {
  const Tensor& v = w.values;
  if (v.rank() != 4) throw ShapeError("pack_conv_weights: expects [OC,C,KH,KW]");
  const std::size_t OC = v.dim(0), C = v.dim(1), KH = v.dim(2), KW = v.dim(3);
  PackedBitTensor p = make_packed({OC, KH, KW, C});
  for (std::size_t o = 0; o < OC; ++o)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t ky = 0; ky < KH; ++ky)
        for (std::size_t kx = 0; kx < KW; ++kx) {
          if (bit_value(v[((o * C + c) * KH + ky) * KW + kx]))
            set_bit(p.row((o * KH + ky) * KW + kx), c);
        }
  p.scale = w.scale;
  return p;
}

Tensor binary_conv2d(const PackedBitTensor& a, const PackedBitTensor& w,
                     ad::Conv2dGeometry geom) {
  if (a.shape.size() != 4 || w.shape.size() != 4) {
    throw ShapeError("binary_conv2d: expects packed [N,H,W,C] input and [OC,KH,KW,C] kernel");
  }
  const std::size_t N = a.shape[0], H = a.shape[1], W = a.shape[2], C = a.shape[3];
  const std::size_t OC = w.shape[0], KH = w.shape[1], KW = w.shape[2];
  if (w.shape[3] != C) {
    throw ShapeError("binary_conv2d: input has " + std::to_string(C) + " channels, kernel " +
                     std::to_string(w.shape[3]));
  }
  if (w.scale.size() != 1 && w.scale.size() != OC) {
    throw ShapeError("binary_conv2d: need 1 or " + std::to_string(OC) + " scales");
  }
  const std::size_t OH = ad::conv_out_size(H, KH, geom.stride, geom.pad);
  const std::size_t OW = ad::conv_out_size(W, KW, geom.stride, geom.pad);
  const std::size_t P = geom.pad, Hp = H + 2 * P, Wp = W + 2 * P, wpr = a.words_per_row;
  const std::size_t taps = KH * KW;

  // Spatially padded copy; padded pixels stay all-zero words, i.e. -1.
  std::vector<std::uint64_t> padded(N * Hp * Wp * wpr, 0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const auto src = a.row((n * H + y) * W + x);
        std::copy(src.begin(), src.end(),
                  padded.begin() + static_cast<std::ptrdiff_t>(((n * Hp + y + P) * Wp + x + P) * wpr));
      }

  // Kernel sum of each tap: what a -1 pad pixel subtracts.
  std::vector<std::int64_t> tap_sum(OC * taps);
  for (std::size_t r = 0; r < OC * taps; ++r) {
    std::int64_t ones = 0;
    for (auto word : w.row(r)) ones += std::popcount(word);
    tap_sum[r] = 2 * ones - static_cast<std::int64_t>(C);
  }

  const auto pad_matches = static_cast<std::int64_t>(taps * a.pad_bits);
  const auto full_len = static_cast<std::int64_t>(taps * C);
  Tensor out({N, OC, OH, OW});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t oy = 0; oy < OH; ++oy)
      for (std::size_t ox = 0; ox < OW; ++ox) {
        const std::size_t y0 = oy * geom.stride, x0 = ox * geom.stride;
        const bool border = y0 < P || x0 < P || y0 + KH > H + P || x0 + KW > W + P;
        for (std::size_t oc = 0; oc < OC; ++oc) {
          std::int64_t matches = 0;
          std::int64_t correction = 0;
          for (std::size_t ky = 0; ky < KH; ++ky)
            for (std::size_t kx = 0; kx < KW; ++kx) {
              const std::uint64_t* ap = padded.data() + ((n * Hp + y0 + ky) * Wp + x0 + kx) * wpr;
              const std::size_t tap = ky * KW + kx;
              const auto wr = w.row(oc * taps + tap);
              for (std::size_t i = 0; i < wpr; ++i) matches += std::popcount(~(ap[i] ^ wr[i]));
              if (border) {
                const std::size_t py = y0 + ky, px = x0 + kx;
                if (py < P || px < P || py >= H + P || px >= W + P) correction += tap_sum[oc * taps + tap];
              }
            }
          const std::int64_t dot = 2 * (matches - pad_matches) - full_len + correction;
          out[((n * OC + oc) * OH + oy) * OW + ox] = scale_at(w.scale, oc) * static_cast<double>(dot);
        }
      }
  return out;
}

Tensor binary_linear(const PackedBitTensor& a, const PackedBitTensor& w) {
  if (a.shape.size() != 2 || w.shape.size() != 2 || a.cols != w.cols) {
    throw ShapeError("binary_linear: input " + shape_str(a.shape) + " vs weight " +
                     shape_str(w.shape));
  }
  if (w.scale.size() != 1 && w.scale.size() != w.rows) {
    throw ShapeError("binary_linear: need 1 or " + std::to_string(w.rows) + " scales");
  }
  Tensor out({a.rows, w.rows});
  for (std::size_t n = 0; n < a.rows; ++n)
    for (std::size_t o = 0; o < w.rows; ++o)
      out[n * w.rows + o] =
          scale_at(w.scale, o) * static_cast<double>(xnor_dot(a.row(n), w.row(o), a.cols));
  return out;
}

std::vector<std::uint64_t> to_bitstream(const PackedBitTensor& p) {
  std::vector<std::uint64_t> stream(words_for(p.rows * p.cols), 0);
  std::size_t bit = 0;
  for (std::size_t r = 0; r < p.rows; ++r) {
    const auto row = p.row(r);
    for (std::size_t c = 0; c < p.cols; ++c, ++bit)
      if (get_bit(row, c)) set_bit(stream, bit);
  }
  return stream;
}

PackedBitTensor from_bitstream(Shape shape, std::span<const std::uint64_t> stream,
                               std::vector<double> scale) {
  PackedBitTensor p = make_packed(std::move(shape));
  if (stream.size() != words_for(p.rows * p.cols)) {
    throw ShapeError("from_bitstream: expected " + std::to_string(words_for(p.rows * p.cols)) +
                     " words, got " + std::to_string(stream.size()));
  }
  std::size_t bit = 0;
  for (std::size_t r = 0; r < p.rows; ++r) {
    auto row = p.row(r);
    for (std::size_t c = 0; c < p.cols; ++c, ++bit)
      if (get_bit(stream, bit)) set_bit(row, c);
  }
  p.scale = std::move(scale);
  return p;
}

std::vector<BenchRow> bench_gemm(std::span<const std::size_t> sizes, int repeats,
                                 std::uint64_t seed) {
  if (repeats < 1) throw std::invalid_argument("bench_gemm: repeats must be >= 1");
  using clock = std::chrono::steady_clock;
  std::mt19937_64 rng(seed);
  std::vector<BenchRow> rows;
  for (std::size_t n : sizes) {
    if (n == 0) throw std::invalid_argument("bench_gemm: size must be positive");
    Tensor a({n, n}), bt({n, n});
    for (double& v : a.data()) v = (rng() & 1u) ? 1.0 : -1.0;
    for (double& v : bt.data()) v = (rng() & 1u) ? 1.0 : -1.0;
    std::vector<float> af(a.data().begin(), a.data().end());
    std::vector<float> bf(n * n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) bf[i * n + j] = static_cast<float>(bt[j * n + i]);
    const PackedBitTensor ap = pack({a, {1.0}});
    const PackedBitTensor bp = pack({bt, {1.0}});

    std::vector<double> float_t, packed_t;
    std::vector<float> cf(n * n);
    std::vector<std::int64_t> ci(n * n);
    for (int r = 0; r < repeats; ++r) {
      auto t0 = clock::now();
      std::fill(cf.begin(), cf.end(), 0.0f);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          float s = 0.0f;
          for (std::size_t k = 0; k < n; ++k) s += af[i * n + k] * bf[k * n + j];
          cf[i * n + j] = s;
        }
      auto t1 = clock::now();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) ci[i * n + j] = xnor_dot(ap.row(i), bp.row(j), n);
      auto t2 = clock::now();
      float_t.push_back(std::chrono::duration<double>(t1 - t0).count());
      packed_t.push_back(std::chrono::duration<double>(t2 - t1).count());
    }
    for (std::size_t i = 0; i < n * n; ++i) {
      if (static_cast<std::int64_t>(cf[i]) != ci[i]) {
        throw std::logic_error("bench_gemm: packed and float products disagree");
      }
    }
    auto median = [](std::vector<double> v) {
      std::sort(v.begin(), v.end());
      return v[v.size() / 2];
    };
    BenchRow row;
    row.n = n;
    row.float_seconds = median(float_t);
    row.packed_seconds = median(packed_t);
    row.ratio = row.float_seconds / std::max(row.packed_seconds, 1e-12);
    rows.push_back(row);
  }
  return rows;
}

void write_bench_csv(std::ostream& os, std::span<const BenchRow> rows) {
  os << "n,float_seconds,packed_seconds,float_gmacs,packed_gmacs,ratio\n";
  for (const auto& r : rows) {
    const double macs = static_cast<double>(r.n) * static_cast<double>(r.n) * static_cast<double>(r.n);
    os << r.n << ',' << r.float_seconds << ',' << r.packed_seconds << ','
       << macs / r.float_seconds / 1e9 << ',' << macs / std::max(r.packed_seconds, 1e-12) / 1e9 << ','
       << r.ratio << '\n';
  }
}

}  // namespace biper::bits
