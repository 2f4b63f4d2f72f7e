// SPDX-FileCopyrightText: © 2026 The dfp16 Authors
//
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace dfp {

/// How a real-valued scaled element is turned into an integer.
///
/// Nearest rounds half away from zero. Biased truncates toward zero, which is
/// a plain shift in hardware and always pulls values toward zero. Stochastic
/// rounds up with probability equal to the fractional part; the draw comes
/// from a counter-based generator keyed by (seed, tensor_id, element_index),
/// so results do not depend on iteration order or thread count.
struct RoundingMode {
  enum class Kind : uint8_t { Nearest, Stochastic, Biased };

  Kind kind = Kind::Nearest;
  uint64_t seed = 0;

  static constexpr RoundingMode nearest() { return {Kind::Nearest, 0}; }
  static constexpr RoundingMode stochastic(uint64_t seed) { return {Kind::Stochastic, seed}; }
  static constexpr RoundingMode biased() { return {Kind::Biased, 0}; }

  bool operator==(const RoundingMode&) const = default;
};

/// Parses "nearest", "stochastic" or "biased".
RoundingMode parse_rounding(std::string_view name, uint64_t seed = 0);
std::string to_string(RoundingMode mode);

constexpr uint64_t splitmix64(uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Uniform double in [0, 1) derived from a keyed counter. Stateless.
double counter_uniform(uint64_t seed, uint64_t tensor_id, uint64_t element_index);

/// Standard normal draw (Box-Muller over two counter_uniform values).
double counter_normal(uint64_t seed, uint64_t stream, uint64_t element_index);

/// Rounds x to an integer under `mode`. No saturation; |x| < 2^31 expected.
int64_t round_value(double x, RoundingMode mode, uint64_t tensor_id, uint64_t element_index);

}  // namespace dfp
