// SPDX-FileCopyrightText: © 2026 The dfp16 Authors
//
// SPDX-License-Identifier: Apache-2.0
#include "dfp/quantize.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace dfp {

void QuantConfig::validate() const {
  if (bit_width < kMinBitWidth || bit_width > kMaxBitWidth) {
    throw std::invalid_argument("QuantConfig: bit width " + std::to_string(bit_width) + " outside [2, 16]");
  }
  if (pre_shift < 0 || pre_shift >= bit_width) {
    throw std::invalid_argument("QuantConfig: pre_shift " + std::to_string(pre_shift) + " must be in [0, " +
                                std::to_string(bit_width) + ")");
  }
}

int extract_exponent(float f) {
  if (!std::isfinite(f)) throw std::domain_error("extract_exponent: non-finite input");
  if (f == 0.0f) return kZeroExponent;
  int e = 0;
  std::frexp(f, &e);  // |f| = m * 2^e with m in [0.5, 1)
  return e - 1;
}

SharedExponent shared_exponent(const FloatTensor& f, int bit_width) {
  if (f.empty()) throw std::invalid_argument("shared_exponent: empty tensor");
  float max_abs = 0.0f;
  for (float v : f.data) {
    if (!std::isfinite(v)) throw std::domain_error("shared_exponent: non-finite input");
    max_abs = std::max(max_abs, std::fabs(v));
  }
  if (max_abs == 0.0f) return {0, 0, true};
  const int e_max = extract_exponent(max_abs);
  return {e_max - (bit_width - 2), e_max, false};
}

DfpTensor quantize(const FloatTensor& f, const QuantConfig& cfg, uint64_t tensor_id) {
  cfg.validate();
  if (f.empty()) throw std::invalid_argument("quantize: empty tensor");
  f.validate();

  DfpTensor out;
  out.shape = f.shape;
  out.bit_width = cfg.bit_width;
  out.elements.assign(f.size(), 0);

  const SharedExponent se = shared_exponent(f, cfg.bit_width);
  if (se.zero) return out;

  int exponent = se.exponent + cfg.pre_shift;
  if (exponent > kMaxExponent) {
    throw std::range_error("quantize: shared exponent " + std::to_string(exponent) + " exceeds 8-bit range");
  }
  // Tensors whose maximum lies below 2^-114 lose low bits instead of leaving the exponent range.
  exponent = std::max(exponent, kMinExponent);
  out.exponent = exponent;

  const int64_t limit = cfg.max_magnitude();
  for (std::size_t n = 0; n < f.size(); ++n) {
    const double scaled = std::ldexp(static_cast<double>(f.data[n]), -exponent);
    const int64_t r = round_value(scaled, cfg.rounding, tensor_id, n);
    out.elements[n] = static_cast<int16_t>(std::clamp(r, -limit, limit));
  }
  return out;
}

FloatTensor dequantize(const DfpTensor& t) {
  t.validate();
  FloatTensor out(t.shape);
  for (std::size_t n = 0; n < t.size(); ++n) {
    const float v = static_cast<float>(std::ldexp(static_cast<double>(t.elements[n]), t.exponent));
    if (!std::isfinite(v)) {
      throw std::overflow_error("dequantize: element " + std::to_string(n) + " overflows FP32 at exponent " +
                                std::to_string(t.exponent));
    }
    out.data[n] = v;
  }
  return out;
}

}  // namespace dfp
