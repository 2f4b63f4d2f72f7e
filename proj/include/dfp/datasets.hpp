// SPDX-FileCopyrightText: © 2026 The dfp16 Authors
//
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dfp/train.hpp"

namespace dfp::data {

inline constexpr uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr uint32_t kIdxLabelsMagic = 0x00000801;

/// Raw unsigned-byte IDX array.
struct IdxArray {
  uint32_t magic = 0;
  std::vector<uint32_t> dims;
  std::vector<uint8_t> values;
};

/// Reads an IDX file, gzip-compressed or plain. `expected_magic` 0 accepts
/// any unsigned-byte array. Errors name expected vs actual byte lengths.
IdxArray read_idx(const std::filesystem::path& path, uint32_t expected_magic = 0);
IdxArray parse_idx(const std::vector<uint8_t>& bytes, uint32_t expected_magic, const std::string& name);
std::vector<uint8_t> encode_idx(const IdxArray& a);

struct LoadOptions {
  std::size_t train_limit = 0;  // 0 keeps everything
  std::size_t val_limit = 0;
};

struct DatasetHandle {
  train::Dataset data;
  std::string source;                          // directory or synthetic spec
  std::string normalization;                   // human-readable description
  std::map<std::string, uint32_t> checksums;   // CRC-32 per input (file name or tensor)
};

/// `source` is a directory with {train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]
/// or a synthetic generator spec:
///   gauss2:n=1000[,val=250,sep=2,sigma=1,seed=1]      two 2-D Gaussian classes at +-sep
///   linreg:n=512[,val=128,slope=3,intercept=1,noise=0,seed=1]
DatasetHandle load_idx(const std::string& source, const LoadOptions& opts = {});

bool is_synthetic_spec(const std::string& source);

uint32_t crc32_of(const void* data, std::size_t size);

}  // namespace dfp::data
