// SPDX-FileCopyrightText: © 2026 The dfp16 Authors
//
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace dfp {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Dense FP32 tensor, row-major. Convolution activations are NCHW.
struct FloatTensor {
  Shape shape;
  std::vector<float> data;

  FloatTensor() = default;
  explicit FloatTensor(Shape s);
  FloatTensor(Shape s, std::vector<float> values);

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  float& operator[](std::size_t i) { return data[i]; }
  float operator[](std::size_t i) const { return data[i]; }

  /// Throws std::invalid_argument on shape/size mismatch or non-finite values.
  void validate() const;
};

/// Dynamic fixed point tensor: integers sharing one power-of-two exponent.
/// Element n represents elements[n] * 2^exponent.
struct DfpTensor {
  Shape shape;
  std::vector<int16_t> elements;
  int exponent = 0;
  int bit_width = 16;

  std::size_t size() const { return elements.size(); }
  bool empty() const { return elements.empty(); }

  /// Largest |element|, widened so that -32768 does not overflow.
  int32_t max_abs() const;

  /// Checks bit width, exponent range, |i| < 2^(P-1) and shape consistency.
  void validate() const;

  bool operator==(const DfpTensor&) const = default;
};

inline constexpr int kMinExponent = -128;
inline constexpr int kMaxExponent = 127;
inline constexpr int kMinBitWidth = 2;
inline constexpr int kMaxBitWidth = 16;

}  // namespace dfp
