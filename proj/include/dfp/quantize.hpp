// SPDX-FileCopyrightText: © 2026 The dfp16 Authors
//
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <climits>
#include <cstdint>

#include "dfp/rounding.hpp"
#include "dfp/tensor.hpp"

namespace dfp {

/// Parameters of one quantizer (activations, weights or errors).
///
/// `pre_shift` bits are given up to lengthen safe INT32 accumulation chains;
/// the effective element magnitude is below 2^(bit_width - 1 - pre_shift).
struct QuantConfig {
  int bit_width = 16;
  RoundingMode rounding = RoundingMode::nearest();
  int pre_shift = 0;

  void validate() const;
  int effective_bits() const { return bit_width - pre_shift; }
  /// Largest element magnitude a quantizer with this config emits.
  int32_t max_magnitude() const { return (int32_t{1} << (bit_width - 1 - pre_shift)) - 1; }
};

/// Returned by extract_exponent for 0.0, which has no base-2 exponent.
inline constexpr int kZeroExponent = INT_MIN;

/// Unbiased base-2 exponent e with 2^e <= |f| < 2^(e+1). Denormals use the
/// mathematical exponent, not the stored field. Throws on NaN/Inf.
int extract_exponent(float f);

struct SharedExponent {
  int exponent = 0;      // E_fmax - (P - 2), or 0 for an all-zero tensor
  int max_exponent = 0;  // E_fmax; meaningless when zero is set
  bool zero = false;
};

/// Shared exponent of a tensor from its absolute maximum.
SharedExponent shared_exponent(const FloatTensor& f, int bit_width);

/// FP32 -> DFP. `tensor_id` keys the stochastic rounding stream.
DfpTensor quantize(const FloatTensor& f, const QuantConfig& cfg, uint64_t tensor_id = 0);

/// DFP -> FP32, exact. Throws std::overflow_error if a value leaves FP32 range.
FloatTensor dequantize(const DfpTensor& t);

}  // namespace dfp
