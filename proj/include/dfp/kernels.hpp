// SPDX-FileCopyrightText: © 2026 The dfp16 Authors
//
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dfp/arith.hpp"
#include "dfp/tensor.hpp"

namespace dfp {

// Structural constants of the emulated QVNNI16 instruction: 16 INT32 output
// lanes, 4 steps of 2-way INT16 pairs, i.e. 8 products per lane per call.
inline constexpr int kSimdWidth = 16;
inline constexpr int kVnniSteps = 4;
inline constexpr int kProductsPerLane = 2 * kVnniSteps;

using VnniWeights = std::array<std::array<int16_t, 2 * kSimdWidth>, kVnniSteps>;
using VnniLanes = std::array<int32_t, kSimdWidth>;

/// vout[o] += w[v][2o] * mem[2v] + w[v][2o+1] * mem[2v+1] for v in [0,4), o in [0,16).
/// Wrapping 32-bit arithmetic, no saturation.
void vnni_madd(std::span<const int16_t, kProductsPerLane> mem, const VnniWeights& w, VnniLanes& vout);

/// Same as vnni_madd on raw storage: `w` points at 4 x 32 contiguous INT16.
void vnni_madd_raw(const int16_t* mem, const int16_t* w, int32_t* vout);

/// vnni_madd with a 64-bit mirror per lane. A lane is flagged when any
/// prefix of its products (in instruction order) leaves the INT32 range.
void vnni_madd_checked(const int16_t* mem, const int16_t* w, int32_t* vout, int64_t* shadow, uint8_t* excursion);

/// Convolution geometry. Output size uses floor division by the stride.
struct ConvSpec {
  int in_channels = 16;   // C
  int out_channels = 16;  // K
  int height = 1;         // H
  int width = 1;          // W
  int kernel_h = 1;       // KH
  int kernel_w = 1;       // KW
  int stride = 1;         // S
  int pad = 0;

  int out_h() const { return (height + 2 * pad - kernel_h) / stride + 1; }
  int out_w() const { return (width + 2 * pad - kernel_w) / stride + 1; }
  void validate() const;
  std::string to_string() const;
  /// Parses "C,K,H,W,KH,KW,S,pad".
  static ConvSpec parse(std::string_view text);
};

/// Kernel blocking. `icblk` input channels are accumulated in INT32 before
/// each spill, so the chain is icblk*KH*KW products. icblk is a multiple of 8
/// (the channels one QVNNI16 call consumes); multiples of 16 match the
/// packed-layout block.
struct BlockingParams {
  int icblk = 16;
  int rb_size = 4;

  void validate() const;
  /// Products per INT32 chain for a layer with `in_channels` channels.
  int64_t chain_length(const ConvSpec& spec) const;
};

struct KernelStats {
  uint64_t fma_count = 0;      // QVNNI16 calls
  uint64_t convert_count = 0;  // INT32 -> FP32 vector conversions
  uint64_t spill_count = 0;    // spill sequences (one per register block per chain)
  uint64_t overflow_count = 0; // lanes whose chain left the INT32 range

  KernelStats& operator+=(const KernelStats& o);
};

/// Exact rational, kept reduced.
struct Ratio {
  int64_t num = 0;
  int64_t den = 1;

  static Ratio make(int64_t num, int64_t den);
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  bool operator==(const Ratio&) const = default;
  std::string to_string() const;
};

/// Converts per QVNNI16 call for the given blocking, counting exactly the
/// spills and calls the kernel issues (channel padding and remainder blocks
/// included).
Ratio overhead_ratio(const ConvSpec& spec, const BlockingParams& blk);

/// The closed-form count RB / ((ICBLK/16) * KH * KW * 2 * RB).
Ratio overhead_ratio_formula(int icblk, int kernel_h, int kernel_w, int rb_size);

/// Measured converts / QVNNI16 calls.
Ratio measured_overhead(const KernelStats& stats);

/// Picks icblk for the layer: a multiple of 16 whose chain is at most 256
/// products, or the smallest one reaching 200 when no multiple lands in
/// [200, 256]; then capped by the channel count and the policy's chain.
/// Throws if no multiple of 8 satisfies a strict policy.
BlockingParams default_blocking(const ConvSpec& spec, const OverflowPolicy& policy);

/// Weights relaid out as [C/16][K/16][KH][KW][8][16][2]: the trailing 2 walks
/// consecutive input channels, the 16 walks output channels.
struct PackedWeights {
  std::vector<int16_t> data;
  int exponent = 0;
  int bit_width = 16;
  int out_channels = 0;
  int in_channels = 0;
  int kernel_h = 1;
  int kernel_w = 1;
  int padded_out = 0;
  int padded_in = 0;

  std::size_t index(int k, int c, int r, int s) const;
  /// Start of the 8x16x2 tile for input block icb, output block ocb at (r, s).
  const int16_t* tile(int icb, int ocb, int r, int s) const;
};

/// W has shape (K, C, KH, KW). Channel counts are zero-padded to 16.
PackedWeights pack_weights(const DfpTensor& w);
DfpTensor unpack_weights(const PackedWeights& p);

struct KernelOptions {
  bool record_partials = false;
};

struct KernelResult {
  FloatTensor output;
  KernelStats stats;
  /// INT32 chain results before each spill, [n][k][oh][ow][chain] for conv
  /// and [m][n][chain] for GEMM. Filled only when requested.
  std::vector<int32_t> partials;
  int chains_per_output = 0;
};

/// Direct convolution of an NCHW DFP input with packed DFP weights. Output is
/// FP32 NCHW. Chains of icblk*KH*KW products are spilled to FP32 with scale
/// 2^(e_input + e_weights).
KernelResult conv_fprop(const DfpTensor& input, const PackedWeights& weights, const ConvSpec& spec,
                        const BlockingParams& blk, const OverflowPolicy& policy, const KernelOptions& opts = {});

/// C = A (M x KK) * B (KK x N) through the same chain/spill machinery; the
/// reduction dimension plays the role of input channels.
KernelResult gemm_dfp(const DfpTensor& a, const DfpTensor& b, const BlockingParams& blk,
                      const OverflowPolicy& policy, const KernelOptions& opts = {});

}  // namespace dfp
