// SPDX-FileCopyrightText: © 2026 The dfp16 Authors
//
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <limits>
#include <string>

#include "dfp/tensor.hpp"

namespace dfp {

inline constexpr int kAccumulatorBits = 32;

/// INT32 accumulation buffer. Value of element n is elements[n] * 2^exponent.
/// The exponent may leave the 8-bit DFP range (it is a sum of two exponents).
struct AccumTensor {
  Shape shape;
  std::vector<int32_t> elements;
  int exponent = 0;
  uint64_t overflow_count = 0;

  std::size_t size() const { return elements.size(); }
  static constexpr int accum_width() { return kAccumulatorBits; }
};

/// Chain-length policy for INT16xINT16 -> INT32 kernels.
///
/// Strict chains are provably overflow-free for operands within the declared
/// precision. Empirical chains follow the long-chain practice and rely on the
/// shadow check to count 32-bit excursions.
struct OverflowPolicy {
  enum class Kind : uint8_t { Strict, Empirical };

  Kind kind = Kind::Empirical;
  int64_t chain = 256;  // Strict: max_chain; Empirical: chain_block
  bool shadow_check = false;
  // Operand precision the policy was validated for (Strict only).
  int bit_width = 16;
  int pre_shift = 1;

  /// Throws std::invalid_argument if max_chain > safe_chain_length(bit_width, pre_shift).
  static OverflowPolicy strict(int64_t max_chain, int bit_width, int pre_shift, bool shadow_check);
  static OverflowPolicy empirical(int64_t chain_block, bool shadow_check);

  bool is_strict() const { return kind == Kind::Strict; }
  std::string describe() const;
};

/// True when DFP_SHADOW_CHECK=1 is set in the environment.
bool shadow_check_from_env();

/// Leading zero bits of a 32-bit word; lzc(0) == 32.
constexpr int lzc(uint32_t x) { return std::countl_zero(x); }

/// Worst-case number of products of magnitude < 2^(P-1-pre_shift) that a
/// signed 32-bit accumulator can hold: floor((2^31-1) / (2^(P-1-s)-1)^2).
/// Returns int64 max when the operand range is {0}.
int64_t safe_chain_length(int bit_width, int pre_shift);

/// Elementwise product; exponents add. `b` may be a single element (broadcast).
AccumTensor dfp_multiply(const DfpTensor& a, const DfpTensor& b);

/// Elementwise sum. The operand with the smaller exponent is arithmetic-shifted
/// right by the exponent difference; a difference >= 32 contributes 0.
AccumTensor dfp_add(const DfpTensor& a, const DfpTensor& b);

struct DownConvertResult {
  DfpTensor tensor;
  int right_shift = 0;
};

/// Scales an INT32 accumulator into P-bit integers using the leading-zero
/// count of its absolute maximum. Never shifts left.
DownConvertResult down_convert(const AccumTensor& acc, int bit_width);

/// dst += float(acc) * 2^acc.exponent elementwise, then zeroes acc.
void spill_to_fp32(AccumTensor& acc, FloatTensor& dst);

/// FP32 power of two for a spill scale; throws std::range_error outside FP32.
float spill_scale(int exponent);

inline int32_t wrapping_add(int32_t a, int32_t b) {
  return static_cast<int32_t>(static_cast<uint32_t>(a) + static_cast<uint32_t>(b));
}

inline constexpr bool fits_int32(int64_t v) {
  return v >= std::numeric_limits<int32_t>::min() && v <= std::numeric_limits<int32_t>::max();
}

}  // namespace dfp
