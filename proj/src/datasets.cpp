// SPDX-FileCopyrightText: © 2026 The dfp16 Authors
//
// SPDX-License-Identifier: Apache-2.0
#include "dfp/datasets.hpp"

#include <zlib.h>

#include <charconv>
#include <random>
#include <sstream>
#include <stdexcept>

namespace dfp::data {
namespace {

std::vector<uint8_t> read_maybe_gzip(const std::filesystem::path& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::vector<uint8_t> out;
  uint8_t buf[1 << 16];
  for (;;) {
    const int n = gzread(f, buf, sizeof buf);
    if (n < 0) {
      int code = 0;
      const std::string msg = gzerror(f, &code);
      gzclose(f);
      throw std::runtime_error(path.string() + ": " + msg);
    }
    if (n == 0) break;
    out.insert(out.end(), buf, buf + n);
  }
  gzclose(f);
  return out;
}

uint32_t be32(const std::vector<uint8_t>& b, std::size_t at) {
  return (uint32_t{b[at]} << 24) | (uint32_t{b[at + 1]} << 16) | (uint32_t{b[at + 2]} << 8) | uint32_t{b[at + 3]};
}

std::filesystem::path find_file(const std::filesystem::path& dir, const std::string& stem) {
  for (const char* ext : {"", ".gz"}) {
    const auto p = dir / (stem + ext);
    if (std::filesystem::exists(p)) return p;
  }
  throw std::runtime_error("dataset directory " + dir.string() + " has no " + stem + "[.gz]");
}

std::map<std::string, std::string> parse_params(const std::string& spec, std::string& kind) {
  const auto colon = spec.find(':');
  kind = spec.substr(0, colon);
  std::map<std::string, std::string> out;
  if (colon == std::string::npos) return out;
  std::stringstream ss(spec.substr(colon + 1));
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("synthetic spec '" + spec + "': expected key=value, got '" + item + "'");
    out[item.substr(0, eq)] = item.substr(eq + 1);
  }
  return out;
}

template <typename T>
T take(std::map<std::string, std::string>& params, const std::string& key, T fallback, const std::string& spec) {
  auto it = params.find(key);
  if (it == params.end()) return fallback;
  T v{};
  const std::string s = it->second;
  params.erase(it);
  if constexpr (std::is_floating_point_v<T>) {
    std::size_t used = 0;
    try {
      v = static_cast<T>(std::stod(s, &used));
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != s.size() || s.empty()) throw std::invalid_argument("synthetic spec '" + spec + "': bad value for " + key);
  } else {
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw std::invalid_argument("synthetic spec '" + spec + "': bad value for " + key);
  }
  return v;
}

void checksum_tensor(DatasetHandle& h, const std::string& name, const FloatTensor& t) {
  h.checksums[name] = crc32_of(t.data.data(), t.size() * sizeof(float));
}

DatasetHandle gauss2(const std::string& spec, std::map<std::string, std::string> p) {
  const auto n = take<std::size_t>(p, "n", 1000, spec);
  const auto val = take<std::size_t>(p, "val", n / 4, spec);
  const auto sep = take<double>(p, "sep", 2.0, spec);
  const auto sigma = take<double>(p, "sigma", 1.0, spec);
  const auto seed = take<uint64_t>(p, "seed", 1, spec);
  if (!p.empty()) throw std::invalid_argument("synthetic spec '" + spec + "': unknown key '" + p.begin()->first + "'");
  if (n == 0) throw std::invalid_argument("synthetic spec '" + spec + "': n must be positive");
  DatasetHandle h;
  h.source = spec;
  h.normalization = "none";
  auto& d = h.data;
  d.name = spec;
  d.sample_shape = {2};
  d.num_classes = 2;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, sigma);
  auto fill = [&](FloatTensor& x, std::vector<int32_t>& y, std::size_t count) {
    x = FloatTensor({count, 2});
    y.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
      y[i] = static_cast<int32_t>(i % 2);
      const double mu = y[i] ? sep : -sep;
      x.data[2 * i] = static_cast<float>(mu + g(rng));
      x.data[2 * i + 1] = static_cast<float>(mu + g(rng));
    }
  };
  fill(d.train_x, d.train_labels, n);
  fill(d.val_x, d.val_labels, val);
  checksum_tensor(h, "train_x", d.train_x);
  checksum_tensor(h, "val_x", d.val_x);
  return h;
}

DatasetHandle linreg(const std::string& spec, std::map<std::string, std::string> p) {
  const auto n = take<std::size_t>(p, "n", 512, spec);
  const auto val = take<std::size_t>(p, "val", n / 4, spec);
  const auto slope = take<double>(p, "slope", 3.0, spec);
  const auto intercept = take<double>(p, "intercept", 1.0, spec);
  const auto noise = take<double>(p, "noise", 0.0, spec);
  const auto seed = take<uint64_t>(p, "seed", 1, spec);
  if (!p.empty()) throw std::invalid_argument("synthetic spec '" + spec + "': unknown key '" + p.begin()->first + "'");
  if (n == 0) throw std::invalid_argument("synthetic spec '" + spec + "': n must be positive");
  DatasetHandle h;
  h.source = spec;
  h.normalization = "none";
  auto& d = h.data;
  d.name = spec;
  d.sample_shape = {1};
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::normal_distribution<double> g(0.0, 1.0);
  auto fill = [&](FloatTensor& x, FloatTensor& t, std::size_t count) {
    x = FloatTensor({count, 1});
    t = FloatTensor({count, 1});
    for (std::size_t i = 0; i < count; ++i) {
      const double xv = u(rng);
      x.data[i] = static_cast<float>(xv);
      t.data[i] = static_cast<float>(slope * xv + intercept + (noise > 0.0 ? noise * g(rng) : 0.0));
    }
  };
  fill(d.train_x, d.train_targets, n);
  fill(d.val_x, d.val_targets, val);
  checksum_tensor(h, "train_x", d.train_x);
  checksum_tensor(h, "train_targets", d.train_targets);
  return h;
}

void images_to_tensor(const IdxArray& a, std::size_t limit, FloatTensor& x) {
  std::size_t count = a.dims[0];
  if (limit > 0) count = std::min(count, limit);
  Shape shape{count, 1};
  for (std::size_t i = 1; i < a.dims.size(); ++i) shape.push_back(a.dims[i]);
  x = FloatTensor(shape);
  for (std::size_t i = 0; i < x.size(); ++i) x.data[i] = static_cast<float>(a.values[i]) / 255.0f;
}

void labels_to_vector(const IdxArray& a, std::size_t limit, std::vector<int32_t>& y) {
  std::size_t count = a.dims[0];
  if (limit > 0) count = std::min(count, limit);
  y.assign(a.values.begin(), a.values.begin() + count);
}

}  // namespace

uint32_t crc32_of(const void* data, std::size_t size) {
  uLong crc = crc32(0L, Z_NULL, 0);
  const auto* p = static_cast<const Bytef*>(data);
  while (size > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
    crc = crc32(crc, p, chunk);
    p += chunk;
    size -= chunk;
  }
  return static_cast<uint32_t>(crc);
}

IdxArray parse_idx(const std::vector<uint8_t>& b, uint32_t expected_magic, const std::string& name) {
  if (b.size() < 4) throw std::runtime_error(name + ": truncated IDX header (" + std::to_string(b.size()) + " bytes)");
  IdxArray a;
  a.magic = be32(b, 0);
  if (b[0] != 0 || b[1] != 0 || b[2] != 0x08)
    throw std::runtime_error(name + ": unsupported IDX magic 0x" + [&] {
      char buf[16];
      std::snprintf(buf, sizeof buf, "%08x", a.magic);
      return std::string(buf);
    }() + " (only unsigned-byte arrays are supported)");
  if (expected_magic != 0 && a.magic != expected_magic)
    throw std::runtime_error(name + ": IDX magic " + std::to_string(a.magic) + " does not match expected " +
                             std::to_string(expected_magic));
  const std::size_t rank = b[3];
  if (rank == 0) throw std::runtime_error(name + ": IDX rank 0");
  const std::size_t header = 4 + 4 * rank;
  if (b.size() < header)
    throw std::runtime_error(name + ": truncated IDX header: expected " + std::to_string(header) + " bytes, got " +
                             std::to_string(b.size()));
  std::size_t count = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    a.dims.push_back(be32(b, 4 + 4 * i));
    count *= a.dims.back();
  }
  if (b.size() != header + count)
    throw std::runtime_error(name + ": IDX byte length mismatch: expected " + std::to_string(header + count) +
                             " bytes, got " + std::to_string(b.size()));
  a.values.assign(b.begin() + header, b.end());
  return a;
}

std::vector<uint8_t> encode_idx(const IdxArray& a) {
  std::vector<uint8_t> out;
  auto put = [&](uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<uint8_t>(v >> s));
  };
  put((a.magic & 0xffffff00u) | static_cast<uint32_t>(a.dims.size()));
  for (uint32_t d : a.dims) put(d);
  out.insert(out.end(), a.values.begin(), a.values.end());
  return out;
}

IdxArray read_idx(const std::filesystem::path& path, uint32_t expected_magic) {
  return parse_idx(read_maybe_gzip(path), expected_magic, path.string());
}

bool is_synthetic_spec(const std::string& source) {
  return source.rfind("gauss2:", 0) == 0 || source.rfind("linreg:", 0) == 0 || source == "gauss2" || source == "linreg";
}

DatasetHandle load_idx(const std::string& source, const LoadOptions& opts) {
  if (is_synthetic_spec(source)) {
    std::string kind;
    auto params = parse_params(source, kind);
    DatasetHandle h = kind == "gauss2" ? gauss2(source, std::move(params)) : linreg(source, std::move(params));
    return h;
  }
  const std::filesystem::path dir(source);
  if (!std::filesystem::is_directory(dir))
    throw std::runtime_error("data source '" + source + "' is neither a directory nor a synthetic spec (gauss2:, linreg:)");
  DatasetHandle h;
  h.source = source;
  h.normalization = "pixels / 255 -> [0, 1]";
  auto& d = h.data;
  d.name = dir.filename().string();
  d.num_classes = 10;
  struct Part {
    const char* stem;
    uint32_t magic;
  };
  IdxArray parts[4];
  const Part names[4] = {{"train-images-idx3-ubyte", kIdxImagesMagic}, {"train-labels-idx1-ubyte", kIdxLabelsMagic},
                         {"t10k-images-idx3-ubyte", kIdxImagesMagic}, {"t10k-labels-idx1-ubyte", kIdxLabelsMagic}};
  for (int i = 0; i < 4; ++i) {
    const auto path = find_file(dir, names[i].stem);
    const auto bytes = read_maybe_gzip(path);
    h.checksums[path.filename().string()] = crc32_of(bytes.data(), bytes.size());
    parts[i] = parse_idx(bytes, names[i].magic, path.string());
  }
  for (int i : {0, 2})
    if (parts[i].dims.size() != 3 || parts[i].dims[0] != parts[i + 1].dims[0])
      throw std::runtime_error("dataset " + source + ": image/label count mismatch (" + std::to_string(parts[i].dims[0]) +
                               " vs " + std::to_string(parts[i + 1].dims[0]) + ")");
  if (parts[0].dims[1] != parts[2].dims[1] || parts[0].dims[2] != parts[2].dims[2])
    throw std::runtime_error("dataset " + source + ": train and test image sizes differ");
  images_to_tensor(parts[0], opts.train_limit, d.train_x);
  labels_to_vector(parts[1], opts.train_limit, d.train_labels);
  images_to_tensor(parts[2], opts.val_limit, d.val_x);
  labels_to_vector(parts[3], opts.val_limit, d.val_labels);
  d.sample_shape = {1, parts[0].dims[1], parts[0].dims[2]};
  for (int32_t y : d.train_labels)
    if (y > 9) throw std::runtime_error("dataset " + source + ": label " + std::to_string(y) + " out of range");
  d.validate();
  return h;
}

}  // namespace dfp::data
