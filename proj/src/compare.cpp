// SPDX-FileCopyrightText: © 2026 The dfp16 Authors
//
// SPDX-License-Identifier: Apache-2.0
#include "dfp/compare.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace dfp::data {
namespace {

using train::MetricsRow;

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double to_double(const std::string& s, const std::string& where) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (s.empty() || used != s.size()) throw std::invalid_argument(where + ": not a number: '" + s + "'");
  return v;
}

struct EpochSummary {
  double train_loss = 0.0;
  std::optional<double> val_loss;
};

std::vector<EpochSummary> summarize(const std::vector<MetricsRow>& rows) {
  std::vector<EpochSummary> out;
  std::vector<std::size_t> counts;
  for (const auto& r : rows) {
    if (r.epoch < 0) throw std::invalid_argument("negative epoch in metrics");
    if (std::size_t(r.epoch) >= out.size()) {
      out.resize(r.epoch + 1);
      counts.resize(r.epoch + 1, 0);
    }
    out[r.epoch].train_loss += r.train_loss;
    ++counts[r.epoch];
    if (r.val_loss) out[r.epoch].val_loss = r.val_loss;
  }
  for (std::size_t e = 0; e < out.size(); ++e)
    if (counts[e] > 0) out[e].train_loss /= double(counts[e]);
  return out;
}

std::optional<double> final_accuracy(const std::vector<MetricsRow>& rows) {
  for (auto it = rows.rbegin(); it != rows.rend(); ++it)
    if (it->val_acc) return it->val_acc;
  return std::nullopt;
}

}  // namespace

std::vector<MetricsRow> read_metrics_csv(std::istream& is, const std::string& name) {
  std::string line;
  if (!std::getline(is, line)) throw std::invalid_argument(name + ": empty metrics file");
  const auto header = split(line);
  const std::vector<std::string> expect{"iteration", "epoch", "train_loss", "val_acc", "overflow_count", "wall_ms"};
  if (header.size() < expect.size() || !std::equal(expect.begin(), expect.end(), header.begin()))
    throw std::invalid_argument(name + ": unexpected header '" + line + "'");
  const bool has_val_loss = header.size() > 6 && header[6] == "val_loss";
  std::vector<MetricsRow> rows;
  for (std::size_t ln = 2; std::getline(is, line); ++ln) {
    if (line.empty()) continue;
    const std::string where = name + ":" + std::to_string(ln);
    const auto cells = split(line);
    if (cells.size() != header.size()) throw std::invalid_argument(where + ": expected " + std::to_string(header.size()) + " columns");
    MetricsRow r;
    r.iteration = static_cast<uint64_t>(to_double(cells[0], where));
    r.epoch = static_cast<int>(to_double(cells[1], where));
    r.train_loss = to_double(cells[2], where);
    if (!cells[3].empty()) r.val_acc = to_double(cells[3], where);
    r.overflow_count = static_cast<uint64_t>(to_double(cells[4], where));
    r.wall_ms = to_double(cells[5], where);
    if (has_val_loss && !cells[6].empty()) r.val_loss = to_double(cells[6], where);
    rows.push_back(r);
  }
  return rows;
}

std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  return read_metrics_csv(is, path.string());
}

std::vector<double> epoch_mean_loss(const std::vector<MetricsRow>& rows) {
  std::vector<double> out;
  for (const auto& s : summarize(rows)) out.push_back(s.train_loss);
  return out;
}

CompareReport compare_metrics(const std::vector<MetricsRow>& a, const std::vector<MetricsRow>& b, const CompareTolerance& tol) {
  if (a.size() != b.size())
    throw std::invalid_argument("metrics grids differ: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()) + " rows");
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].iteration != b[i].iteration || a[i].epoch != b[i].epoch || a[i].val_acc.has_value() != b[i].val_acc.has_value())
      throw std::invalid_argument("metrics grids differ at row " + std::to_string(i + 1) + " (iteration " +
                                  std::to_string(a[i].iteration) + " vs " + std::to_string(b[i].iteration) + ")");
  CompareReport r;
  const auto fa = final_accuracy(a), fb = final_accuracy(b);
  if (fa && fb) {
    r.final_acc_a = *fa;
    r.final_acc_b = *fb;
    r.acc_delta = *fb - *fa;
    if (std::fabs(r.acc_delta) > tol.accuracy + 1e-12) {
      char buf[128];
      std::snprintf(buf, sizeof buf, "final accuracy delta %.4f exceeds %.4f", r.acc_delta, tol.accuracy);
      r.failures.emplace_back(buf);
    }
  }
  const auto sa = summarize(a), sb = summarize(b);
  double gap_a = 0.0, gap_b = 0.0;
  int gaps = 0;
  for (std::size_t e = 0; e < sa.size(); ++e) {
    r.epoch_loss_a.push_back(sa[e].train_loss);
    r.epoch_loss_b.push_back(sb[e].train_loss);
    if (int(e) >= tol.loss_from_epoch && sa[e].train_loss > 0.0) {
      const double gap = std::fabs(sb[e].train_loss - sa[e].train_loss) / sa[e].train_loss;
      if (gap > r.max_loss_gap || r.max_loss_gap_epoch < 0) {
        r.max_loss_gap = gap;
        r.max_loss_gap_epoch = int(e);
      }
    }
    if (sa[e].val_loss && sb[e].val_loss) {
      r.final_train_val_gap_a = *sa[e].val_loss - sa[e].train_loss;
      r.final_train_val_gap_b = *sb[e].val_loss - sb[e].train_loss;
      gap_a += r.final_train_val_gap_a;
      gap_b += r.final_train_val_gap_b;
      ++gaps;
    }
  }
  if (gaps > 0) {
    r.mean_train_val_gap_a = gap_a / gaps;
    r.mean_train_val_gap_b = gap_b / gaps;
  }
  if (tol.loss && r.max_loss_gap > *tol.loss) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "epoch %d train-loss gap %.4f exceeds %.4f", r.max_loss_gap_epoch, r.max_loss_gap, *tol.loss);
    r.failures.emplace_back(buf);
  }
  return r;
}

void print_report(std::ostream& os, const CompareReport& r, const CompareTolerance& tol) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "final_val_acc a=%.4f b=%.4f delta=%+.4f (tol %.4f)\n", r.final_acc_a, r.final_acc_b,
                r.acc_delta, tol.accuracy);
  os << buf;
  for (std::size_t e = 0; e < r.epoch_loss_a.size(); ++e) {
    const double rel = r.epoch_loss_a[e] > 0.0 ? (r.epoch_loss_b[e] - r.epoch_loss_a[e]) / r.epoch_loss_a[e] : 0.0;
    std::snprintf(buf, sizeof buf, "epoch %zu train_loss a=%.6f b=%.6f rel_gap=%+.4f%s\n", e, r.epoch_loss_a[e],
                  r.epoch_loss_b[e], rel, int(e) < tol.loss_from_epoch ? " (not checked)" : "");
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "max_loss_gap %.4f at epoch %d%s\n", r.max_loss_gap, r.max_loss_gap_epoch,
                tol.loss ? "" : " (no loss tolerance)");
  os << buf;
  std::snprintf(buf, sizeof buf, "train_val_gap mean a=%+.4f b=%+.4f final a=%+.4f b=%+.4f\n", r.mean_train_val_gap_a,
                r.mean_train_val_gap_b, r.final_train_val_gap_a, r.final_train_val_gap_b);
  os << buf;
  for (const auto& f : r.failures) os << "FAIL " << f << '\n';
  os << (r.pass() ? "PASS" : "FAIL") << '\n';
}

}  // namespace dfp::data
