// SPDX-FileCopyrightText: © 2026 The dfp16 Authors
//
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "dfp/train.hpp"

namespace dfp::data {

/// Parses a metrics CSV written by write_metrics_row.
std::vector<train::MetricsRow> read_metrics_csv(std::istream& is, const std::string& name = "metrics");
std::vector<train::MetricsRow> read_metrics_csv(const std::filesystem::path& path);

struct CompareTolerance {
  double accuracy = 0.005;         // absolute, on the final validation accuracy
  std::optional<double> loss;      // relative per-epoch train-loss gap
  int loss_from_epoch = 1;         // 0-based first epoch inside the envelope
};

struct CompareReport {
  double final_acc_a = 0.0, final_acc_b = 0.0;
  double acc_delta = 0.0;                       // b - a
  std::vector<double> epoch_loss_a, epoch_loss_b;
  double max_loss_gap = 0.0;                    // max |b - a| / a over checked epochs
  int max_loss_gap_epoch = -1;
  double mean_train_val_gap_a = 0.0, mean_train_val_gap_b = 0.0;  // mean (val_loss - train_loss) per epoch
  double final_train_val_gap_a = 0.0, final_train_val_gap_b = 0.0;
  std::vector<std::string> failures;
  bool pass() const { return failures.empty(); }
};

/// Throws std::invalid_argument when the two runs do not share an iteration grid.
CompareReport compare_metrics(const std::vector<train::MetricsRow>& a, const std::vector<train::MetricsRow>& b,
                              const CompareTolerance& tol = {});

void print_report(std::ostream& os, const CompareReport& r, const CompareTolerance& tol = {});

/// Per-epoch mean training loss.
std::vector<double> epoch_mean_loss(const std::vector<train::MetricsRow>& rows);

}  // namespace dfp::data
