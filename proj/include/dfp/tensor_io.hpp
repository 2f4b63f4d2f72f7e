// SPDX-FileCopyrightText: © 2026 The dfp16 Authors
//
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "dfp/tensor.hpp"

namespace dfp {

// DFT1 layout, all integers little-endian:
//   "DFT1" | u8 dtype (0 = FP32, 1 = DFP) | u8 bit_width | [i8 exponent, DFP only]
//   | u32 rank | u32 dims[rank] | payload (f32 or i16 per element)

using AnyTensor = std::variant<FloatTensor, DfpTensor>;

/// Malformed DFT1 or IDX input; `offset` is the byte where parsing failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t offset);
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

std::vector<uint8_t> encode_dft(const AnyTensor& t);
AnyTensor decode_dft(std::span<const uint8_t> bytes);

void write_dft(const std::filesystem::path& path, const AnyTensor& t);
AnyTensor read_dft(const std::filesystem::path& path);

std::vector<uint8_t> read_file_bytes(const std::filesystem::path& path);

}  // namespace dfp
