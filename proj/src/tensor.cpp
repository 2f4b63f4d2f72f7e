// SPDX-FileCopyrightText: © 2026 The dfp16 Authors
//
// SPDX-License-Identifier: Apache-2.0
#include "dfp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace dfp {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

FloatTensor::FloatTensor(Shape s) : shape(std::move(s)), data(shape_size(shape), 0.0f) {}

FloatTensor::FloatTensor(Shape s, std::vector<float> values) : shape(std::move(s)), data(std::move(values)) {
  if (data.size() != shape_size(shape)) {
    throw std::invalid_argument("FloatTensor: " + std::to_string(data.size()) + " values for shape " +
                                shape_to_string(shape));
  }
}

void FloatTensor::validate() const {
  if (data.size() != shape_size(shape)) {
    throw std::invalid_argument("FloatTensor: element count does not match shape " + shape_to_string(shape));
  }
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!std::isfinite(data[i])) {
      throw std::invalid_argument("FloatTensor: non-finite value at element " + std::to_string(i));
    }
  }
}

int32_t DfpTensor::max_abs() const {
  int32_t m = 0;
  for (int16_t v : elements) m = std::max(m, std::abs(static_cast<int32_t>(v)));
  return m;
}

void DfpTensor::validate() const {
  if (bit_width < kMinBitWidth || bit_width > kMaxBitWidth) {
    throw std::invalid_argument("DfpTensor: bit width " + std::to_string(bit_width) + " outside [2, 16]");
  }
  if (exponent < kMinExponent || exponent > kMaxExponent) {
    throw std::invalid_argument("DfpTensor: shared exponent " + std::to_string(exponent) +
                                " outside signed 8-bit range");
  }
  if (elements.size() != shape_size(shape)) {
    throw std::invalid_argument("DfpTensor: element count does not match shape " + shape_to_string(shape));
  }
  const int32_t limit = int32_t{1} << (bit_width - 1);
  if (max_abs() >= limit) {
    throw std::invalid_argument("DfpTensor: element magnitude exceeds " + std::to_string(bit_width) + "-bit range");
  }
}

}  // namespace dfp
