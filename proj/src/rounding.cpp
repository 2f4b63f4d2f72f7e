// SPDX-FileCopyrightText: © 2026 The dfp16 Authors
//
// SPDX-License-Identifier: Apache-2.0
#include "dfp/rounding.hpp"

#include <cmath>
#include <stdexcept>

namespace dfp {
RoundingMode parse_rounding(std::string_view name, uint64_t seed) {
  if (name == "nearest") return RoundingMode::nearest();
  if (name == "stochastic") return RoundingMode::stochastic(seed);
  if (name == "biased") return RoundingMode::biased();
  throw std::invalid_argument("unknown rounding mode '" + std::string(name) + "'");
}

std::string to_string(RoundingMode mode) {
  switch (mode.kind) {
    case RoundingMode::Kind::Nearest: return "nearest";
    case RoundingMode::Kind::Stochastic: return "stochastic";
    case RoundingMode::Kind::Biased: return "biased";
  }
  return "unknown";
}

double counter_uniform(uint64_t seed, uint64_t tensor_id, uint64_t element_index) {
  uint64_t z = splitmix64(seed);
  z = splitmix64(z ^ tensor_id);
  z = splitmix64(z ^ element_index);
  return static_cast<double>(z >> 11) * 0x1.0p-53;
}

double counter_normal(uint64_t seed, uint64_t stream, uint64_t element_index) {
  const double u1 = counter_uniform(seed, stream, 2 * element_index);
  const double u2 = counter_uniform(seed, stream, 2 * element_index + 1);
  return std::sqrt(-2.0 * std::log1p(-u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

int64_t round_value(double x, RoundingMode mode, uint64_t tensor_id, uint64_t element_index) {
  switch (mode.kind) {
    case RoundingMode::Kind::Nearest:
      return static_cast<int64_t>(std::round(x));
    case RoundingMode::Kind::Biased:
      return static_cast<int64_t>(std::trunc(x));
    case RoundingMode::Kind::Stochastic: {
      const double lo = std::floor(x);
      const double frac = x - lo;
      const double u = counter_uniform(mode.seed, tensor_id, element_index);
      return static_cast<int64_t>(lo) + (u < frac ? 1 : 0);
    }
  }
  return 0;
}

}  // namespace dfp
