// SPDX-FileCopyrightText: © 2026 The dfp16 Authors
//
// SPDX-License-Identifier: Apache-2.0
#include "dfp/tensor_io.hpp"

#include <bit>
#include <fstream>
#include <iterator>

namespace dfp {
namespace {

constexpr uint8_t kDtypeFp32 = 0;
constexpr uint8_t kDtypeDfp = 1;

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const uint8_t> bytes) : bytes_(bytes) {}

  std::size_t offset() const { return pos_; }

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(std::string("truncated ") + what + ": need " + std::to_string(n) + " bytes, have " +
                            std::to_string(bytes_.size() - pos_),
                        pos_);
    }
  }
  uint8_t u8(const char* what) {
    need(1, what);
    return bytes_[pos_++];
  }
  uint32_t u32(const char* what) {
    need(4, what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  uint16_t u16() {
    uint16_t v = static_cast<uint16_t>(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }

 private:
  std::span<const uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

FormatError::FormatError(const std::string& what, std::size_t offset)
    : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

std::vector<uint8_t> encode_dft(const AnyTensor& t) {
  std::vector<uint8_t> out = {'D', 'F', 'T', '1'};
  const Shape& shape = std::visit([](const auto& x) -> const Shape& { return x.shape; }, t);
  if (std::holds_alternative<FloatTensor>(t)) {
    out.push_back(kDtypeFp32);
    out.push_back(32);
  } else {
    const auto& d = std::get<DfpTensor>(t);
    d.validate();
    out.push_back(kDtypeDfp);
    out.push_back(static_cast<uint8_t>(d.bit_width));
    out.push_back(static_cast<uint8_t>(static_cast<int8_t>(d.exponent)));
  }
  put_u32(out, static_cast<uint32_t>(shape.size()));
  for (std::size_t dim : shape) put_u32(out, static_cast<uint32_t>(dim));
  if (const auto* f = std::get_if<FloatTensor>(&t)) {
    for (float v : f->data) put_u32(out, std::bit_cast<uint32_t>(v));
  } else {
    for (int16_t v : std::get<DfpTensor>(t).elements) {
      const auto u = static_cast<uint16_t>(v);
      out.push_back(static_cast<uint8_t>(u));
      out.push_back(static_cast<uint8_t>(u >> 8));
    }
  }
  return out;
}

AnyTensor decode_dft(std::span<const uint8_t> bytes) {
  Reader r(bytes);
  r.need(4, "magic");
  if (bytes[0] != 'D' || bytes[1] != 'F' || bytes[2] != 'T' || bytes[3] != '1') {
    throw FormatError("bad magic, expected DFT1", 0);
  }
  for (int i = 0; i < 4; ++i) r.u8("magic");

  const std::size_t dtype_at = r.offset();
  const uint8_t dtype = r.u8("dtype");
  if (dtype != kDtypeFp32 && dtype != kDtypeDfp) {
    throw FormatError("unknown dtype tag " + std::to_string(dtype), dtype_at);
  }
  const std::size_t width_at = r.offset();
  const uint8_t width = r.u8("bit width");
  int exponent = 0;
  if (dtype == kDtypeDfp) {
    if (width < kMinBitWidth || width > kMaxBitWidth) {
      throw FormatError("DFP bit width " + std::to_string(width) + " outside [2, 16]", width_at);
    }
    exponent = static_cast<int8_t>(r.u8("shared exponent"));
  } else if (width != 32) {
    throw FormatError("FP32 tensor must declare bit width 32, got " + std::to_string(width), width_at);
  }

  const std::size_t rank_at = r.offset();
  const uint32_t rank = r.u32("rank");
  if (rank > 16) throw FormatError("implausible rank " + std::to_string(rank), rank_at);
  Shape shape(rank);
  uint64_t count = 1;
  for (uint32_t i = 0; i < rank; ++i) {
    shape[i] = r.u32("dims");
    count *= shape[i];
    if (count > (uint64_t{1} << 40)) throw FormatError("tensor too large", r.offset());
  }

  const std::size_t elem_size = dtype == kDtypeFp32 ? 4 : 2;
  r.need(count * elem_size, "payload");
  const std::size_t payload_end = r.offset() + count * elem_size;

  AnyTensor result;
  if (dtype == kDtypeFp32) {
    FloatTensor f;
    f.shape = std::move(shape);
    f.data.resize(count);
    for (auto& v : f.data) v = std::bit_cast<float>(r.u32("payload"));
    result = std::move(f);
  } else {
    DfpTensor d;
    d.shape = std::move(shape);
    d.bit_width = width;
    d.exponent = exponent;
    d.elements.resize(count);
    const std::size_t payload_at = r.offset();
    for (auto& v : d.elements) v = static_cast<int16_t>(r.u16());
    try {
      d.validate();
    } catch (const std::invalid_argument& e) {
      throw FormatError(e.what(), payload_at);
    }
    result = std::move(d);
  }
  if (payload_end != bytes.size()) {
    throw FormatError(std::to_string(bytes.size() - payload_end) + " trailing bytes after payload", payload_end);
  }
  return result;
}

std::vector<uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_dft(const std::filesystem::path& path, const AnyTensor& t) {
  const auto bytes = encode_dft(t);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

AnyTensor read_dft(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return decode_dft(bytes);
}

}  // namespace dfp
