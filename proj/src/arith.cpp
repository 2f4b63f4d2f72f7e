// SPDX-FileCopyrightText: © 2026 The dfp16 Authors
//
// SPDX-License-Identifier: Apache-2.0
#include "dfp/arith.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <stdexcept>

namespace dfp {

OverflowPolicy OverflowPolicy::strict(int64_t max_chain, int bit_width, int pre_shift, bool shadow_check) {
  if (max_chain < 1) throw std::invalid_argument("strict policy: max_chain must be >= 1");
  const int64_t safe = safe_chain_length(bit_width, pre_shift);
  if (max_chain > safe) {
    throw std::invalid_argument("strict policy: chain " + std::to_string(max_chain) +
                                " exceeds safe_chain_length(" + std::to_string(bit_width) + ", " +
                                std::to_string(pre_shift) + ") = " + std::to_string(safe));
  }
  OverflowPolicy p;
  p.kind = Kind::Strict;
  p.chain = max_chain;
  p.shadow_check = shadow_check;
  p.bit_width = bit_width;
  p.pre_shift = pre_shift;
  return p;
}

OverflowPolicy OverflowPolicy::empirical(int64_t chain_block, bool shadow_check) {
  if (chain_block < 1) throw std::invalid_argument("empirical policy: chain_block must be >= 1");
  OverflowPolicy p;
  p.kind = Kind::Empirical;
  p.chain = chain_block;
  p.shadow_check = shadow_check;
  return p;
}

std::string OverflowPolicy::describe() const {
  std::string s = is_strict() ? "strict(max_chain=" : "empirical(chain_block=";
  s += std::to_string(chain) + (shadow_check ? ", shadow)" : ")");
  return s;
}

bool shadow_check_from_env() {
  const char* v = std::getenv("DFP_SHADOW_CHECK");
  return v != nullptr && std::string(v) == "1";
}

int64_t safe_chain_length(int bit_width, int pre_shift) {
  if (bit_width < kMinBitWidth || bit_width > kMaxBitWidth) {
    throw std::invalid_argument("safe_chain_length: bit width outside [2, 16]");
  }
  if (pre_shift < 0 || pre_shift >= bit_width) {
    throw std::invalid_argument("safe_chain_length: pre_shift must be in [0, bit_width)");
  }
  const int64_t max_operand = (int64_t{1} << (bit_width - 1 - pre_shift)) - 1;
  if (max_operand == 0) return std::numeric_limits<int64_t>::max();
  return std::numeric_limits<int32_t>::max() / (max_operand * max_operand);
}

AccumTensor dfp_multiply(const DfpTensor& a, const DfpTensor& b) {
  a.validate();
  b.validate();
  const bool broadcast = b.size() == 1 && a.size() != 1;
  if (!broadcast && a.shape != b.shape) {
    throw std::invalid_argument("dfp_multiply: shape mismatch " + shape_to_string(a.shape) + " vs " +
                                shape_to_string(b.shape));
  }
  AccumTensor out;
  out.shape = a.shape;
  out.exponent = a.exponent + b.exponent;
  out.elements.resize(a.size());
  for (std::size_t n = 0; n < a.size(); ++n) {
    const int32_t rhs = broadcast ? b.elements[0] : b.elements[n];
    out.elements[n] = static_cast<int32_t>(a.elements[n]) * rhs;
  }
  return out;
}

AccumTensor dfp_add(const DfpTensor& a, const DfpTensor& b) {
  a.validate();
  b.validate();
  if (a.shape != b.shape) {
    throw std::invalid_argument("dfp_add: shape mismatch " + shape_to_string(a.shape) + " vs " +
                                shape_to_string(b.shape));
  }
  const bool a_larger = a.exponent >= b.exponent;
  const DfpTensor& big = a_larger ? a : b;
  const DfpTensor& small = a_larger ? b : a;
  const int diff = big.exponent - small.exponent;

  AccumTensor out;
  out.shape = a.shape;
  out.exponent = big.exponent;
  out.elements.resize(a.size());
  for (std::size_t n = 0; n < a.size(); ++n) {
    const int32_t aligned = diff >= kAccumulatorBits ? 0 : (static_cast<int32_t>(small.elements[n]) >> diff);
    out.elements[n] = static_cast<int32_t>(big.elements[n]) + aligned;
  }
  return out;
}

DownConvertResult down_convert(const AccumTensor& acc, int bit_width) {
  if (acc.elements.empty()) throw std::invalid_argument("down_convert: empty accumulator");
  if (bit_width < kMinBitWidth || bit_width > kMaxBitWidth) {
    throw std::invalid_argument("down_convert: bit width outside [2, 16]");
  }
  uint32_t max_mag = 0;
  for (int32_t v : acc.elements) {
    const uint32_t mag = v < 0 ? 0u - static_cast<uint32_t>(v) : static_cast<uint32_t>(v);
    max_mag = std::max(max_mag, mag);
  }
  // Significant bits of the maximum minus the P-1 magnitude bits of the target.
  const int shift = std::max(0, (kAccumulatorBits - lzc(max_mag)) - (bit_width - 1));
  const int32_t limit = (int32_t{1} << (bit_width - 1)) - 1;

  DownConvertResult r;
  r.right_shift = shift;
  r.tensor.shape = acc.shape;
  r.tensor.bit_width = bit_width;
  r.tensor.exponent = acc.exponent + shift;
  if (r.tensor.exponent < kMinExponent || r.tensor.exponent > kMaxExponent) {
    throw std::range_error("down_convert: result exponent " + std::to_string(r.tensor.exponent) +
                           " outside 8-bit range");
  }
  r.tensor.elements.resize(acc.size());
  for (std::size_t n = 0; n < acc.size(); ++n) {
    // Flooring can land a negative value on -2^(P-1); saturate it.
    const int32_t v = std::max(acc.elements[n] >> shift, -limit);
    r.tensor.elements[n] = static_cast<int16_t>(v);
  }
  return r;
}

float spill_scale(int exponent) {
  if (exponent < -149 || exponent > 127) {
    throw std::range_error("spill scale 2^" + std::to_string(exponent) + " is not representable in FP32");
  }
  return std::ldexp(1.0f, exponent);
}

void spill_to_fp32(AccumTensor& acc, FloatTensor& dst) {
  if (acc.shape != dst.shape || acc.size() != dst.size()) {
    throw std::invalid_argument("spill_to_fp32: shape mismatch " + shape_to_string(acc.shape) + " vs " +
                                shape_to_string(dst.shape));
  }
  const float scale = spill_scale(acc.exponent);
  for (std::size_t n = 0; n < acc.size(); ++n) {
    dst.data[n] = std::fma(static_cast<float>(acc.elements[n]), scale, dst.data[n]);
    acc.elements[n] = 0;
  }
}

}  // namespace dfp
