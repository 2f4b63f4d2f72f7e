// SPDX-FileCopyrightText: © 2026 The dfp16 Authors
//
// SPDX-License-Identifier: Apache-2.0
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "dfp/commands.hpp"
#include "dfp/parallel.hpp"
#include "dfp/tensor_io.hpp"

namespace {

void add_bench_options(CLI::App* cmd, dfp::cli::BenchArgs& a, std::string& out) {
  cmd->add_option("--icblk", a.icblk, "Input channels per chain (multiple of 8); 0 picks the default blocking");
  cmd->add_option("--rb", a.rb, "Output columns per register block");
  cmd->add_option("--policy", a.policy, "Overflow policy")->check(CLI::IsMember({"strict", "empirical"}));
  cmd->add_option("--chain", a.chain, "Chain limit; 0 uses safe_chain_length (strict) or 512 (empirical)");
  cmd->add_option("--bits", a.bits, "Operand bit width");
  cmd->add_option("--pre-shift", a.pre_shift, "Bits given up per operand");
  cmd->add_option("--input", a.input, "Operand data")->check(CLI::IsMember({"gaussian", "uniform", "max"}));
  cmd->add_option("--trials", a.trials, "Kernel invocations");
  cmd->add_option("--seed", a.seed, "Root seed");
  cmd->add_flag("!--no-shadow-check", a.shadow_check, "Skip the 64-bit overflow mirror");
  cmd->add_flag("!--no-oracle", a.oracle, "Skip the FP64 reference");
  cmd->add_option("--out", out, "CSV destination (default stdout)");
}

template <class Fn>
int with_csv(const std::string& path, Fn&& fn) {
  if (path.empty()) return fn(std::cout);
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  return fn(os);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic fixed point (DFP16) tensors, integer kernels and training"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "Worker threads (default: DFP_THREADS or 1)");

  dfp::cli::QuantizeArgs q;
  auto* quant = app.add_subcommand("quantize", "Quantize an FP32 DFT1 tensor and report residuals");
  quant->add_option("--in", q.input, "FP32 DFT1 input")->required();
  quant->add_option("--out", q.output, "DFP DFT1 output")->required();
  quant->add_option("--bits", q.bits, "Bit width P");
  quant->add_option("--round", q.rounding, "Rounding mode")->check(CLI::IsMember({"nearest", "stochastic", "biased"}));
  quant->add_option("--pre-shift", q.pre_shift, "Pre-shift bits");
  quant->add_option("--seed", q.seed, "Stochastic rounding seed");
  quant->add_option("--tensor-id", q.tensor_id, "Stochastic rounding stream");

  dfp::cli::BenchArgs gemm;
  std::string gemm_out;
  auto* bench_gemm = app.add_subcommand("bench-gemm", "Run gemm_dfp and report counters, overhead and error");
  bench_gemm->add_option("--m", gemm.m, "Rows of A and C");
  bench_gemm->add_option("--n", gemm.n, "Columns of B and C");
  bench_gemm->add_option("--k", gemm.k, "Reduction length");
  add_bench_options(bench_gemm, gemm, gemm_out);

  dfp::cli::BenchArgs conv;
  std::string conv_out, conv_spec = conv.spec.to_string();
  auto* bench_conv = app.add_subcommand("bench-conv", "Run conv_fprop and report counters, overhead and error");
  bench_conv->add_option("--spec", conv_spec, "C,K,H,W,KH,KW,S,pad");
  bench_conv->add_option("--batch", conv.batch, "Images per invocation");
  add_bench_options(bench_conv, conv, conv_out);

  dfp::cli::TrainArgs t;
  uint64_t seed = 0;
  auto* train = app.add_subcommand("train", "Train a model from a JSON config");
  train->add_option("--config", t.config, "Training config (JSON)")->required();
  train->add_option("--data", t.data, "IDX directory or synthetic spec (gauss2:..., linreg:...)")->required();
  train->add_option("--precision", t.precision, "Precision mode")->check(CLI::IsMember({"fp32", "dfp16"}));
  auto* seed_opt = train->add_option("--seed", seed, "Override the config seed");
  train->add_option("--out", t.out, "Metrics CSV");
  train->add_option("--checkpoint", t.checkpoint, "Checkpoint directory (default <out>.ckpt)");

  dfp::cli::CompareArgs c;
  double tol_loss = 0.0;
  auto* compare = app.add_subcommand("compare", "Compare two metrics CSVs");
  compare->add_option("--a", c.a, "Baseline metrics")->required();
  compare->add_option("--b", c.b, "Candidate metrics")->required();
  compare->add_option("--tol-acc", c.tol_acc, "Allowed final accuracy delta (fraction)");
  auto* tol_loss_opt = compare->add_option("--tol-loss", tol_loss, "Allowed relative per-epoch train-loss gap");
  compare->add_option("--loss-from-epoch", c.loss_from_epoch, "First epoch (0-based) checked against --tol-loss");

  CLI11_PARSE(app, argc, argv);
  if (threads > 0) dfp::set_num_threads(threads);

  try {
    if (*quant) return dfp::cli::cmd_quantize(q, std::cout);
    if (*bench_gemm) return with_csv(gemm_out, [&](std::ostream& os) { return dfp::cli::cmd_bench_gemm(gemm, os, std::cerr); });
    if (*bench_conv) {
      conv.spec = dfp::ConvSpec::parse(conv_spec);
      return with_csv(conv_out, [&](std::ostream& os) { return dfp::cli::cmd_bench_conv(conv, os, std::cerr); });
    }
    if (*train) {
      if (*seed_opt) t.seed = seed;
      return dfp::cli::cmd_train(t, std::cerr);
    }
    if (*compare) {
      if (*tol_loss_opt) c.tol_loss = tol_loss;
      return dfp::cli::cmd_compare(c, std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 2;
}
