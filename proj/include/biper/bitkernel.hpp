#pragma once

// Bit-packed +-1 tensors and XNOR/popcount kernels.
//
// Bit 1 encodes +1 and bit 0 encodes -1. The last logical axis is packed into
// 64-bit words, one word-aligned row per index of the leading axes; unused
// trailing bits of a row are zero. For two rows of length n,
//   dot = 2 * popcount(XNOR(a, b)) - n,
// with the XNOR of the zeroed pad bits subtracted back out.

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "biper/autodiff.hpp"
#include "biper/quantization.hpp"
#include "biper/tensor.hpp"

namespace biper::bits {

struct PackedBitTensor {
  Shape shape;  // logical shape, last axis packed
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t words_per_row = 0;
  std::size_t pad_bits = 0;  // per row
  std::vector<std::uint64_t> words;
  std::vector<double> scale{1.0};

  std::span<const std::uint64_t> row(std::size_t r) const {
    return {words.data() + r * words_per_row, words_per_row};
  }
  std::span<std::uint64_t> row(std::size_t r) {
    return {words.data() + r * words_per_row, words_per_row};
  }
  /// Bytes of the dense bitstream (no per-row padding), rounded up to words.
  std::size_t payload_bytes() const;
};

PackedBitTensor make_packed(Shape shape);

/// Packs along the last axis. Throws on entries other than +-1.
PackedBitTensor pack(const BinarizedTensor& b);
BinarizedTensor unpack(const PackedBitTensor& p);

std::int64_t xnor_dot(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b,
                      std::size_t n);
/// Row ra of a against row rb of b; both must have the same logical length.
std::int64_t xnor_dot(const PackedBitTensor& a, std::size_t ra, const PackedBitTensor& b,
                      std::size_t rb);

/// +-1 activations [N,C,H,W] -> packed pixels [N,H,W,C].
PackedBitTensor pack_activations_nchw(const Tensor& a);
/// +-1 kernel [OC,C,KH,KW] -> packed taps [OC,KH,KW,C], keeps per-channel scale.
PackedBitTensor pack_conv_weights(const BinarizedTensor& w);

/// Scaled binary convolution. Equals gamma[oc] * conv2d(unpacked a, unpacked w)
/// with zero padding: padding is stored as -1 and the kernel-sum of every
/// padded tap is added back. Output [N,OC,OH,OW].
Tensor binary_conv2d(const PackedBitTensor& a, const PackedBitTensor& w,
                     ad::Conv2dGeometry geom);

/// a [N,in] packed rows, w [out,in] packed rows -> [N,out] scaled by w.scale.
Tensor binary_linear(const PackedBitTensor& a, const PackedBitTensor& w);

/// Dense bitstream (logical order, no per-row padding), as stored on disk.
std::vector<std::uint64_t> to_bitstream(const PackedBitTensor& p);
PackedBitTensor from_bitstream(Shape shape, std::span<const std::uint64_t> stream,
                               std::vector<double> scale);

struct BenchRow {
  std::size_t n = 0;
  double float_seconds = 0.0;   // median
  double packed_seconds = 0.0;  // median, packing excluded
  double ratio = 0.0;           // float_seconds / packed_seconds
};

/// Square n x n x n products: naive float32 triple loop vs XNOR/popcount.
std::vector<BenchRow> bench_gemm(std::span<const std::size_t> sizes, int repeats = 5,
                                 std::uint64_t seed = 0);
void write_bench_csv(std::ostream& os, std::span<const BenchRow> rows);

}  // namespace biper::bits
