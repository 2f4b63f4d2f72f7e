// SPDX-FileCopyrightText: © 2026 The dfp16 Authors
//
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dfp/config.hpp"
#include "dfp/model.hpp"

namespace dfp::train {

/// In-memory dataset. Axis 0 of every tensor indexes samples.
struct Dataset {
  std::string name;
  Shape sample_shape;
  FloatTensor train_x, val_x;
  std::vector<int32_t> train_labels, val_labels;  // classification
  FloatTensor train_targets, val_targets;         // regression, (N, T)
  int num_classes = 0;                            // 0 for regression

  bool classification() const { return num_classes > 0; }
  std::size_t train_size() const { return train_x.shape.empty() ? 0 : train_x.shape[0]; }
  std::size_t val_size() const { return val_x.shape.empty() ? 0 : val_x.shape[0]; }
  void validate() const;
};

struct MetricsRow {
  uint64_t iteration = 0;  // 1-based, counted after the update
  int epoch = 0;
  double train_loss = 0.0;
  std::optional<double> val_acc;
  std::optional<double> val_loss;
  uint64_t overflow_count = 0;  // cumulative
  double wall_ms = 0.0;
};

void write_metrics_header(std::ostream& os);
void write_metrics_row(std::ostream& os, const MetricsRow& row);

struct EvalResult {
  double loss = 0.0;
  std::optional<double> accuracy;
};

/// Inference-mode pass over (x, labels or targets) in chunks of `batch`.
EvalResult evaluate(Model& model, const TrainConfig& cfg, const FloatTensor& x, const std::vector<int32_t>& labels,
                    const FloatTensor& targets, StepContext& ctx);

/// Loss is NaN/Inf or a layer produced non-finite values.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, int layer, uint64_t iteration)
      : std::runtime_error(what), layer_(layer), iteration_(iteration) {}
  int layer() const { return layer_; }
  uint64_t iteration() const { return iteration_; }

 private:
  int layer_;
  uint64_t iteration_;
};

struct TrainOptions {
  std::function<void(const MetricsRow&)> on_row;
  /// Where the offending layer's tensors are written on divergence. Empty: no dump.
  std::filesystem::path dump_dir;
};

struct TrainResult {
  Model model;
  std::vector<MetricsRow> rows;
  uint64_t iterations = 0;
  KernelStats stats;
};

TrainResult train_loop(const TrainConfig& cfg, const Dataset& data, PrecisionMode mode, const TrainOptions& opts = {});

/// Per-epoch sample order; identical in both precision modes.
std::vector<std::size_t> epoch_order(std::size_t n, uint64_t seed, int epoch);

/// Writes each parameter as DFT1 (FP32 master and, for DFP layers, Q_w) plus manifest.json.
void save_checkpoint(const std::filesystem::path& dir, Model& model, const TrainConfig& cfg, PrecisionMode mode,
                     uint64_t iteration);

struct Checkpoint {
  std::string manifest;  // JSON text
  std::vector<NamedTensor> tensors;
};
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace dfp::train
