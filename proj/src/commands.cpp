// SPDX-FileCopyrightText: © 2026 The dfp16 Authors
//
// SPDX-License-Identifier: Apache-2.0
#include "dfp/commands.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <random>
#include <stdexcept>

#include "dfp/compare.hpp"
#include "dfp/config.hpp"
#include "dfp/datasets.hpp"
#include "dfp/parallel.hpp"
#include "dfp/quantize.hpp"
#include "dfp/tensor_io.hpp"
#include "dfp/train.hpp"
#include "json.hpp"

namespace dfp::cli {
namespace {

constexpr double kFp32Unit = 0x1.0p-24;

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---- quantize ----

void check_args(const QuantizeArgs& a) {
  if (a.input.empty() || a.output.empty()) throw std::invalid_argument("quantize: --in and --out are required");
}

// ---- bench ----

struct Operand {
  FloatTensor source;  // real values the oracle multiplies
  DfpTensor q;
  double ulp = 0.0;    // worst-case |q - source| per element
};

OverflowPolicy make_policy(const BenchArgs& a, const ConvSpec& spec) {
  if (a.policy == "strict") {
    const int64_t chain = a.chain > 0 ? a.chain : safe_chain_length(a.bits, a.pre_shift);
    return OverflowPolicy::strict(chain, a.bits, a.pre_shift, a.shadow_check);
  }
  if (a.policy == "empirical") {
    int64_t chain = a.chain;
    if (chain <= 0) chain = std::max<int64_t>(512, int64_t(a.icblk) * spec.kernel_h * spec.kernel_w);
    return OverflowPolicy::empirical(chain, a.shadow_check);
  }
  throw std::invalid_argument("unknown policy '" + a.policy + "' (expected strict or empirical)");
}

Operand make_operand(const BenchArgs& a, const Shape& shape, std::mt19937_64& rng) {
  const QuantConfig qc{a.bits, RoundingMode::nearest(), a.pre_shift};
  qc.validate();
  Operand op;
  const std::size_t n = shape_size(shape);
  if (a.input == "max") {
    op.q = DfpTensor{shape, std::vector<int16_t>(n, static_cast<int16_t>(qc.max_magnitude())), -14, a.bits};
    op.source = dequantize(op.q);
    return op;
  }
  op.source = FloatTensor(shape);
  if (a.input == "gaussian") {
    std::normal_distribution<float> d(0.0f, 1.0f);
    for (auto& v : op.source.data) v = d(rng);
  } else if (a.input == "uniform") {
    std::uniform_real_distribution<float> d(-1.0f, 1.0f);
    for (auto& v : op.source.data) v = d(rng);
  } else {
    throw std::invalid_argument("unknown input '" + a.input + "' (expected gaussian, uniform or max)");
  }
  op.q = quantize(op.source, qc);
  op.ulp = std::ldexp(1.0, op.q.exponent);
  return op;
}

std::vector<double> values(const DfpTensor& t) {
  std::vector<double> out(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = std::ldexp(static_cast<double>(t.elements[i]), t.exponent);
  return out;
}

// Per output element: exact result, |x| * u_w + u_x * |w_hat| and |x_hat| * |w_hat| summed over taps.
struct ConvOracle {
  std::vector<double> exact, quant_err, magnitude;
};

ConvOracle conv_oracle(const Operand& x, const Operand& w, int batch, const ConvSpec& s) {
  const int C = s.in_channels, K = s.out_channels, H = s.height, W = s.width;
  const int OH = s.out_h(), OW = s.out_w();
  const auto xq = values(x.q), wq = values(w.q);
  ConvOracle o;
  const std::size_t total = std::size_t(batch) * K * OH * OW;
  o.exact.assign(total, 0.0);
  o.quant_err.assign(total, 0.0);
  o.magnitude.assign(total, 0.0);
  parallel_for(std::size_t(batch) * K, [&](std::size_t begin, std::size_t end, int) {
    for (std::size_t nk = begin; nk < end; ++nk) {
      const int n = int(nk / K), k = int(nk % K);
      for (int oh = 0; oh < OH; ++oh)
        for (int ow = 0; ow < OW; ++ow) {
          double e = 0.0, q = 0.0, m = 0.0;
          for (int c = 0; c < C; ++c)
            for (int r = 0; r < s.kernel_h; ++r) {
              const int ih = oh * s.stride - s.pad + r;
              if (ih < 0 || ih >= H) continue;
              for (int t = 0; t < s.kernel_w; ++t) {
                const int iw = ow * s.stride - s.pad + t;
                if (iw < 0 || iw >= W) continue;
                const std::size_t xi = ((std::size_t(n) * C + c) * H + ih) * W + iw;
                const std::size_t wi = ((std::size_t(k) * C + c) * s.kernel_h + r) * s.kernel_w + t;
                const double xv = x.source.data[xi], wv = w.source.data[wi];
                e += xv * wv;
                q += std::fabs(xv) * w.ulp + x.ulp * std::fabs(wq[wi]);
                m += std::fabs(xq[xi] * wq[wi]);
              }
            }
          const std::size_t oi = ((std::size_t(n) * K + k) * OH + oh) * OW + ow;
          o.exact[oi] = e;
          o.quant_err[oi] = q;
          o.magnitude[oi] = m;
        }
    }
  });
  return o;
}

void score(BenchRow& row, const ConvOracle& o, const FloatTensor& got, int64_t chains) {
  double num = 0.0, den = 0.0, bnd = 0.0;
  row.within_bound = true;
  for (std::size_t i = 0; i < o.exact.size(); ++i) {
    const double bound = o.quant_err[i] + 2.0 * double(chains + 1) * kFp32Unit * o.magnitude[i];
    const double err = std::fabs(double(got.data[i]) - o.exact[i]);
    row.max_abs_error = std::max(row.max_abs_error, err);
    if (err > bound) row.within_bound = false;
    num += err * err;
    den += o.exact[i] * o.exact[i];
    bnd += bound * bound;
  }
  row.rel_frobenius_error = den > 0.0 ? std::sqrt(num / den) : std::sqrt(num);
  row.rel_frobenius_bound = den > 0.0 ? std::sqrt(bnd / den) : std::sqrt(bnd);
}

BenchSummary run_bench(const BenchArgs& a, const ConvSpec& spec, int batch, bool gemm) {
  if (a.trials < 1) throw std::invalid_argument("trials must be >= 1");
  if (batch < 1) throw std::invalid_argument("batch must be >= 1");
  spec.validate();
  BenchSummary s;
  s.shape = gemm ? std::to_string(spec.out_channels) + "x" + std::to_string(spec.width) + "x" + std::to_string(spec.in_channels)
                 : spec.to_string() + " N=" + std::to_string(batch);
  s.policy = make_policy(a, spec);
  BlockingParams blk = a.icblk > 0 ? BlockingParams{a.icblk, a.rb} : default_blocking(spec, s.policy);
  blk.rb_size = a.rb;
  blk.validate();
  const int64_t chains = (spec.in_channels + blk.icblk - 1) / blk.icblk;
  const Ratio analytic = overhead_ratio(spec, blk);
  const Ratio formula = overhead_ratio_formula(blk.icblk, spec.kernel_h, spec.kernel_w, blk.rb_size);

  s.min_rel_frobenius_bound = INFINITY;
  for (int t = 0; t < a.trials; ++t) {
    std::mt19937_64 rng(splitmix64(a.seed ^ (uint64_t(t) << 32)));
    BenchRow row;
    row.trial = t;
    row.blocking = blk;
    row.chain_length = blk.chain_length(spec);
    row.analytic = analytic;
    row.formula = formula;
    KernelResult r;
    if (gemm) {
      // A is the weight side (M x KK), B the input side (KK x N)
      Operand A = make_operand(a, {std::size_t(spec.out_channels), std::size_t(spec.in_channels)}, rng);
      Operand B = make_operand(a, {std::size_t(spec.in_channels), std::size_t(spec.width)}, rng);
      r = gemm_dfp(A.q, B.q, blk, s.policy);
      if (a.oracle) {
        // a GEMM is the 1x1 convolution of B (1, KK, 1, N) with A (M, KK, 1, 1)
        Operand x = B, w = A;
        x.source.shape = x.q.shape = {1, std::size_t(spec.in_channels), 1, std::size_t(spec.width)};
        w.source.shape = w.q.shape = {std::size_t(spec.out_channels), std::size_t(spec.in_channels), 1, 1};
        score(row, conv_oracle(x, w, 1, spec), r.output, chains);
        // conv output is (1, M, 1, N), the same memory order as (M, N)
      }
    } else {
      Operand x = make_operand(a, {std::size_t(batch), std::size_t(spec.in_channels), std::size_t(spec.height),
                                   std::size_t(spec.width)}, rng);
      Operand w = make_operand(a, {std::size_t(spec.out_channels), std::size_t(spec.in_channels),
                                   std::size_t(spec.kernel_h), std::size_t(spec.kernel_w)}, rng);
      r = conv_fprop(x.q, pack_weights(w.q), spec, blk, s.policy);
      if (a.oracle) score(row, conv_oracle(x, w, batch, spec), r.output, chains);
    }
    row.stats = r.stats;
    row.measured = measured_overhead(r.stats);
    s.total_overflow += r.stats.overflow_count;
    if (!(row.measured == row.analytic)) s.ratios_match = false;
    if (a.oracle) {
      if (!row.within_bound) ++s.outside_bound;
      if (!row.within_bound && r.stats.overflow_count == 0) s.all_within_bound = false;
      s.max_rel_frobenius_error = std::max(s.max_rel_frobenius_error, row.rel_frobenius_error);
      s.min_rel_frobenius_bound = std::min(s.min_rel_frobenius_bound, row.rel_frobenius_bound);
    }
    s.rows.push_back(row);
  }
  if (!a.oracle) s.min_rel_frobenius_bound = 0.0;
  return s;
}

int report_bench(const BenchArgs& a, const BenchSummary& s, std::ostream& csv, std::ostream& log) {
  write_bench_csv(csv, a, s);
  log << "shape " << s.shape << ", policy " << s.policy.describe() << ", icblk " << s.rows.front().blocking.icblk
      << ", rb " << s.rows.front().blocking.rb_size << ", chain " << s.rows.front().chain_length << '\n';
  log << "trials " << s.rows.size() << ", overflow events " << s.total_overflow << '\n';
  log << "overhead analytic " << s.rows.front().analytic.to_string() << " (" << fmt("%.4f", s.rows.front().analytic.value())
      << "), measured " << (s.ratios_match ? "equal on every trial" : "DIFFERENT") << '\n';
  if (a.oracle)
    log << "rel_frobenius_error max " << fmt("%.3e", s.max_rel_frobenius_error) << ", bound min "
        << fmt("%.3e", s.min_rel_frobenius_bound) << ", trials outside bound " << s.outside_bound
        << (s.all_within_bound ? "" : " (some without overflow)") << '\n';
  return s.ratios_match && s.all_within_bound ? 0 : 1;
}

}  // namespace

QuantizeReport run_quantize(const QuantizeArgs& args) {
  check_args(args);
  const AnyTensor in = read_dft(args.input);
  if (!std::holds_alternative<FloatTensor>(in)) throw std::invalid_argument(args.input.string() + ": expected an FP32 tensor");
  const auto& f = std::get<FloatTensor>(in);
  const QuantConfig qc{args.bits, parse_rounding(args.rounding, args.seed), args.pre_shift};
  qc.validate();
  const DfpTensor q = quantize(f, qc, args.tensor_id);
  write_dft(args.output, q);

  QuantizeReport r;
  r.exponent = q.exponent;
  r.zero = shared_exponent(f, args.bits).zero;
  r.elements = f.size();
  double sum = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    const double back = std::ldexp(double(q.elements[i]), q.exponent);
    const double res = std::fabs(back - double(f.data[i]));
    r.max_abs_residual = std::max(r.max_abs_residual, res);
    sum += res;
  }
  r.mean_abs_residual = f.size() ? sum / double(f.size()) : 0.0;
  const bool nearest = qc.rounding.kind == RoundingMode::Kind::Nearest;
  r.bound = std::ldexp(1.0, nearest ? q.exponent - 1 : q.exponent);
  r.within = nearest ? r.max_abs_residual <= r.bound : (r.max_abs_residual < r.bound || r.zero);
  return r;
}

int cmd_quantize(const QuantizeArgs& args, std::ostream& out) {
  const QuantizeReport r = run_quantize(args);
  out << "elements " << r.elements << "\nbits " << args.bits << "\nrounding " << args.rounding << "\nexponent "
      << r.exponent << (r.zero ? " (zero tensor)" : "") << "\nmax_abs_residual " << fmt("%.9g", r.max_abs_residual)
      << "\nmean_abs_residual " << fmt("%.9g", r.mean_abs_residual) << "\nbound " << fmt("%.9g", r.bound)
      << (args.rounding == "nearest" ? " (2^(E_s-1))" : " (2^E_s)") << "\nwithin_bound " << (r.within ? "yes" : "no")
      << "\nwrote " << args.output.string() << '\n';
  return r.within ? 0 : 1;
}

BenchSummary run_bench_gemm(const BenchArgs& a) {
  if (a.m < 1 || a.n < 1 || a.k < 1) throw std::invalid_argument("gemm dimensions must be positive");
  return run_bench(a, ConvSpec{a.k, a.m, 1, a.n, 1, 1, 1, 0}, 1, true);
}

BenchSummary run_bench_conv(const BenchArgs& a) { return run_bench(a, a.spec, a.batch, false); }

void write_bench_csv(std::ostream& csv, const BenchArgs& a, const BenchSummary& s) {
  csv << "trial,shape,icblk,rb,chain,policy,bits,pre_shift,input,fma_count,convert_count,spill_count,overflow_count,"
         "analytic_ratio,formula_ratio,measured_ratio,ratio_match,max_abs_error,rel_frobenius_error,rel_frobenius_bound,"
         "within_bound\n";
  for (const auto& r : s.rows) {
    csv << r.trial << ",\"" << s.shape << "\"," << r.blocking.icblk << ',' << r.blocking.rb_size << ',' << r.chain_length
        << ',' << a.policy << ',' << a.bits << ',' << a.pre_shift << ',' << a.input << ',' << r.stats.fma_count << ','
        << r.stats.convert_count << ',' << r.stats.spill_count << ',' << r.stats.overflow_count << ','
        << r.analytic.to_string() << ',' << r.formula.to_string() << ',' << r.measured.to_string() << ','
        << (r.measured == r.analytic ? 1 : 0) << ',';
    if (a.oracle)
      csv << fmt("%.9g", r.max_abs_error) << ',' << fmt("%.9g", r.rel_frobenius_error) << ','
          << fmt("%.9g", r.rel_frobenius_bound) << ',' << (r.within_bound ? 1 : 0);
    else
      csv << ",,,";
    csv << '\n';
  }
}

int cmd_bench_gemm(const BenchArgs& a, std::ostream& csv, std::ostream& log) {
  return report_bench(a, run_bench_gemm(a), csv, log);
}

int cmd_bench_conv(const BenchArgs& a, std::ostream& csv, std::ostream& log) {
  return report_bench(a, run_bench_conv(a), csv, log);
}

int cmd_train(const TrainArgs& args, std::ostream& log) {
  const auto read_text = [](const std::filesystem::path& p) {
    std::ifstream is(p);
    if (!is) throw std::runtime_error("cannot read " + p.string());
    return std::string(std::istreambuf_iterator<char>(is), {});
  };
  train::TrainConfig cfg = train::parse_train_config(read_text(args.config));
  if (args.seed) cfg.seed = *args.seed;
  cfg.validate();
  const auto mode = train::parse_precision_mode(args.precision);
  const data::DatasetHandle handle = data::load_idx(args.data);

  const std::filesystem::path out = args.out;
  if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
  const std::filesystem::path config_out = out.string() + ".config.json";
  const std::filesystem::path run_out = out.string() + ".run.json";
  const std::filesystem::path ckpt = args.checkpoint.empty() ? std::filesystem::path(out.string() + ".ckpt") : args.checkpoint;
  {
    std::ofstream c(config_out);
    c << train::to_json(cfg) << '\n';
    if (!c) throw std::runtime_error("cannot write " + config_out.string());
  }

  std::ofstream csv(out);
  if (!csv) throw std::runtime_error("cannot write " + out.string());
  train::write_metrics_header(csv);
  train::TrainOptions opts;
  opts.dump_dir = out.string() + ".divergence";
  opts.on_row = [&](const train::MetricsRow& row) {
    train::write_metrics_row(csv, row);
    csv.flush();
    if (row.val_acc) {
      log << "iter " << row.iteration << " epoch " << row.epoch << " loss " << fmt("%.5f", row.train_loss) << " val_acc "
          << fmt("%.4f", *row.val_acc) << '\n';
    }
  };
  log << "training " << handle.data.name << " (" << handle.data.train_x.shape[0] << " train, "
      << handle.data.val_x.shape[0] << " val) precision " << train::to_string(mode) << " seed " << cfg.seed
      << " threads " << num_threads() << '\n';

  const auto t0 = std::chrono::steady_clock::now();
  train::TrainResult result = train::train_loop(cfg, handle.data, mode, opts);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  train::save_checkpoint(ckpt, result.model, cfg, mode, result.iterations);

  nlohmann::ordered_json meta;
  meta["config"] = args.config.string();
  meta["resolved_config"] = config_out.string();
  meta["data"] = handle.source;
  meta["normalization"] = handle.normalization;
  nlohmann::ordered_json sums = nlohmann::ordered_json::object();
  for (const auto& [name, crc] : handle.checksums) {
    char hex[16];
    std::snprintf(hex, sizeof hex, "%08x", unsigned(crc));
    sums[name] = hex;
  }
  meta["checksums"] = sums;
  meta["precision"] = train::to_string(mode);
  meta["seed"] = cfg.seed;
  meta["threads"] = num_threads();
  meta["iterations"] = result.iterations;
  meta["overflow_count"] = result.stats.overflow_count;
  meta["wall_seconds"] = seconds;
  meta["metrics"] = out.string();
  meta["checkpoint"] = ckpt.string();
  for (auto it = result.rows.rbegin(); it != result.rows.rend(); ++it)
    if (it->val_acc) {
      meta["final_val_acc"] = *it->val_acc;
      break;
    }
  std::ofstream(run_out) << meta.dump(2) << '\n';

  log << "done: " << result.iterations << " iterations in " << fmt("%.1f", seconds) << " s; metrics " << out.string()
      << ", checkpoint " << ckpt.string() << '\n';
  return 0;
}

int cmd_compare(const CompareArgs& args, std::ostream& out) {
  const auto a = data::read_metrics_csv(args.a);
  const auto b = data::read_metrics_csv(args.b);
  const data::CompareTolerance tol{args.tol_acc, args.tol_loss, args.loss_from_epoch};
  const auto report = data::compare_metrics(a, b, tol);
  data::print_report(out, report, tol);
  return report.pass() ? 0 : 1;
}

}  // namespace dfp::cli
