// SPDX-FileCopyrightText: © 2026 The dfp16 Authors
//
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "dfp/arith.hpp"
#include "dfp/kernels.hpp"

namespace dfp::cli {

struct QuantizeArgs {
  std::filesystem::path input;
  std::filesystem::path output;
  int bits = 16;
  std::string rounding = "nearest";
  int pre_shift = 0;
  uint64_t seed = 0;       // stochastic rounding only
  uint64_t tensor_id = 0;
};

struct QuantizeReport {
  int exponent = 0;
  bool zero = false;
  std::size_t elements = 0;
  double max_abs_residual = 0.0;
  double mean_abs_residual = 0.0;
  double bound = 0.0;   // 2^(E_s-1) for nearest, 2^E_s otherwise
  bool within = true;   // max residual <= bound (strictly below for non-nearest modes)
};

QuantizeReport run_quantize(const QuantizeArgs& args);
/// Prints the report; returns 0 when the residual is within the bound, 1 otherwise.
int cmd_quantize(const QuantizeArgs& args, std::ostream& out);

struct BenchArgs {
  // GEMM: C (m x n) = A (m x k) * B (k x n)
  int m = 256, n = 256, k = 256;
  // conv
  ConvSpec spec{32, 32, 8, 8, 3, 3, 1, 1};
  int batch = 1;

  int icblk = 0;  // 0 picks default_blocking
  int rb = 4;
  std::string policy = "empirical";  // strict | empirical
  int64_t chain = 0;                 // 0: safe_chain_length (strict), max(512, explicit chain) (empirical)
  int bits = 16;
  int pre_shift = 1;
  std::string input = "gaussian";    // gaussian | uniform | max
  int trials = 1;
  uint64_t seed = 1;
  bool shadow_check = true;
  bool oracle = true;                // compute FP64 error norms
};

struct BenchRow {
  int trial = 0;
  BlockingParams blocking;
  int64_t chain_length = 0;
  KernelStats stats;
  Ratio analytic;
  Ratio formula;
  Ratio measured;
  double max_abs_error = 0.0;
  double rel_frobenius_error = 0.0;
  double rel_frobenius_bound = 0.0;
  bool within_bound = true;
};

struct BenchSummary {
  std::string shape;
  OverflowPolicy policy;
  std::vector<BenchRow> rows;
  uint64_t total_overflow = 0;
  bool ratios_match = true;
  bool all_within_bound = true;  // every overflow-free trial met its bound
  int outside_bound = 0;
  double max_rel_frobenius_error = 0.0;
  double min_rel_frobenius_bound = 0.0;
};

BenchSummary run_bench_gemm(const BenchArgs& args);
BenchSummary run_bench_conv(const BenchArgs& args);

void write_bench_csv(std::ostream& csv, const BenchArgs& args, const BenchSummary& s);
/// CSV rows to `csv`, a summary to `log`. Returns 1 when an analytic/measured
/// ratio disagrees or an overflow-free trial leaves its error bound.
int cmd_bench_gemm(const BenchArgs& args, std::ostream& csv, std::ostream& log);
int cmd_bench_conv(const BenchArgs& args, std::ostream& csv, std::ostream& log);

struct TrainArgs {
  std::filesystem::path config;
  std::string data;
  std::string precision = "dfp16";
  std::optional<uint64_t> seed;
  std::filesystem::path out = "metrics.csv";
  std::filesystem::path checkpoint;  // default: <out>.ckpt
};

/// Runs a full training; writes <out>, <out>.config.json, <out>.run.json and the checkpoint.
int cmd_train(const TrainArgs& args, std::ostream& log);

struct CompareArgs {
  std::filesystem::path a;
  std::filesystem::path b;
  double tol_acc = 0.005;
  std::optional<double> tol_loss;
  int loss_from_epoch = 1;
};

/// Returns 0 on pass, 1 on fail. Mismatched grids throw.
int cmd_compare(const CompareArgs& args, std::ostream& out);

}  // namespace dfp::cli
