// SPDX-FileCopyrightText: © 2026 The dfp16 Authors
//
// SPDX-License-Identifier: Apache-2.0
#include "dfp/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>

#include "dfp/tensor_io.hpp"
#include "json.hpp"

namespace dfp::train {
namespace {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

FloatTensor gather(const FloatTensor& src, const std::vector<std::size_t>& idx, std::size_t begin, std::size_t count) {
  const std::size_t per = src.size() / src.shape[0];
  Shape shape = src.shape;
  shape[0] = count;
  FloatTensor out(shape);
  for (std::size_t i = 0; i < count; ++i) {
    const float* from = src.data.data() + idx[begin + i] * per;
    std::copy(from, from + per, out.data.data() + i * per);
  }
  return out;
}

LossResult compute_loss(const TrainConfig& cfg, const FloatTensor& out, const std::vector<int32_t>& labels,
                        const FloatTensor& targets) {
  if (cfg.loss == "mse") return mse_loss(out, targets);
  return softmax_cross_entropy(out, labels);
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string sanitize(std::string s) {
  for (char& c : s)
    if (!std::isalnum(static_cast<unsigned char>(c))) c = '_';
  return s;
}

void dump_layer(const std::filesystem::path& dir, const Model& model, int index) {
  if (dir.empty()) return;
  std::filesystem::create_directories(dir);
  const Layer& l = model.layer(index);
  const std::string stem = "layer" + std::to_string(index) + "_" + l.type() + "_";
  write_dft(dir / (stem + "input.dft"), model.layer_input(index));
  for (const auto& [name, t] : l.debug_tensors()) write_dft(dir / (stem + sanitize(name) + ".dft"), t);
}

}  // namespace

void Dataset::validate() const {
  auto check_x = [&](const FloatTensor& x, const char* which) {
    if (x.shape.size() != sample_shape.size() + 1 || !std::equal(sample_shape.begin(), sample_shape.end(), x.shape.begin() + 1))
      throw std::invalid_argument("dataset " + name + ": " + which + " shape " + shape_to_string(x.shape) +
                                  " does not match sample shape " + shape_to_string(sample_shape));
  };
  check_x(train_x, "train");
  if (!val_x.empty() || !val_x.shape.empty()) check_x(val_x, "val");
  if (classification()) {
    if (train_labels.size() != train_size() || val_labels.size() != val_size())
      throw std::invalid_argument("dataset " + name + ": label count mismatch");
    for (const auto* v : {&train_labels, &val_labels})
      for (int32_t y : *v)
        if (y < 0 || y >= num_classes) throw std::invalid_argument("dataset " + name + ": label out of range");
  } else {
    if (train_targets.shape.empty() || train_targets.shape[0] != train_size() ||
        (val_size() > 0 && (val_targets.shape.empty() || val_targets.shape[0] != val_size())))
      throw std::invalid_argument("dataset " + name + ": target count mismatch");
  }
}

void write_metrics_header(std::ostream& os) {
  os << "iteration,epoch,train_loss,val_acc,overflow_count,wall_ms,val_loss\n";
}

void write_metrics_row(std::ostream& os, const MetricsRow& r) {
  os << r.iteration << ',' << r.epoch << ',' << format_double(r.train_loss) << ','
     << (r.val_acc ? format_double(*r.val_acc) : "") << ',' << r.overflow_count << ',' << format_double(r.wall_ms) << ','
     << (r.val_loss ? format_double(*r.val_loss) : "") << '\n';
}

std::vector<std::size_t> epoch_order(std::size_t n, uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  const uint64_t stream = 0x73687566ULL ^ (static_cast<uint64_t>(epoch) << 32);
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(counter_uniform(seed, stream, i) * static_cast<double>(i));
    std::swap(order[i - 1], order[std::min(j, i - 1)]);
  }
  return order;
}

EvalResult evaluate(Model& model, const TrainConfig& cfg, const FloatTensor& x, const std::vector<int32_t>& labels,
                    const FloatTensor& targets, StepContext& ctx) {
  const std::size_t n = x.shape.empty() ? 0 : x.shape[0];
  EvalResult r;
  if (n == 0) return r;
  const bool was_training = ctx.training;
  ctx.training = false;
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t b = 0; b < n; b += cfg.eval_batch) {
    const std::size_t count = std::min<std::size_t>(cfg.eval_batch, n - b);
    const FloatTensor out = model.forward(gather(x, idx, b, count), ctx);
    std::vector<int32_t> yb;
    FloatTensor tb;
    if (cfg.loss == "mse") tb = gather(targets, idx, b, count);
    else yb.assign(labels.begin() + b, labels.begin() + b + count);
    const LossResult lr = compute_loss(cfg, out, yb, tb);
    loss_sum += lr.loss * static_cast<double>(count);
    correct += lr.correct;
  }
  ctx.training = was_training;
  r.loss = loss_sum / static_cast<double>(n);
  if (cfg.loss != "mse") r.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  return r;
}

TrainResult train_loop(const TrainConfig& cfg, const Dataset& data, PrecisionMode mode, const TrainOptions& opts) {
  cfg.validate();
  data.validate();
  if (data.sample_shape != cfg.input_shape)
    throw std::invalid_argument("dataset sample shape " + shape_to_string(data.sample_shape) +
                                " does not match config input_shape " + shape_to_string(cfg.input_shape));
  if ((cfg.loss == "mse") == data.classification())
    throw std::invalid_argument("loss " + cfg.loss + " does not fit dataset " + data.name);

  TrainResult result{build_model(cfg, mode), {}, 0, {}};
  Model& model = result.model;
  StepContext ctx;
  ctx.policy = cfg.kernel.make_policy(cfg.quant.bits, cfg.quant.pre_shift);
  ctx.rb_size = cfg.kernel.rb;

  const std::size_t batch = cfg.batch_size;
  const std::size_t per_epoch = data.train_size() / batch;
  if (cfg.epochs > 0 && per_epoch == 0)
    throw std::invalid_argument("batch_size " + std::to_string(batch) + " exceeds the training set");

  uint64_t it = 0, overflows = 0;
  const auto diverged = [&](int layer, const std::string& why) -> DivergenceError {
    dump_layer(opts.dump_dir, model, layer);
    std::string msg = "training diverged at iteration " + std::to_string(it + 1) + " in " + model.layer(layer).label() + ": " + why;
    if (!opts.dump_dir.empty()) msg += " (tensors dumped to " + opts.dump_dir.string() + ")";
    return DivergenceError(msg, layer, it + 1);
  };

  bool done = false;
  for (int epoch = 0; epoch < cfg.epochs && !done; ++epoch) {
    const auto order = epoch_order(data.train_size(), cfg.seed, epoch);
    const auto lr = static_cast<float>(cfg.solver.learning_rate(epoch));
    for (std::size_t b = 0; b < per_epoch; ++b) {
      if (cfg.max_iterations > 0 && it >= static_cast<uint64_t>(cfg.max_iterations)) {
        done = true;
        break;
      }
      const auto t0 = Clock::now();
      const FloatTensor xb = gather(data.train_x, order, b * batch, batch);
      std::vector<int32_t> yb;
      FloatTensor tb;
      if (data.classification())
        for (std::size_t i = 0; i < batch; ++i) yb.push_back(data.train_labels[order[b * batch + i]]);
      else
        tb = gather(data.train_targets, order, b * batch, batch);

      ctx.iteration = it;
      ctx.training = true;
      ctx.stats = {};
      FloatTensor out;
      try {
        out = model.forward(xb, ctx);
      } catch (const NonFiniteError& e) {
        throw diverged(e.layer(), e.what());
      }
      const LossResult loss = compute_loss(cfg, out, yb, tb);
      if (!std::isfinite(loss.loss)) throw diverged(static_cast<int>(model.size()) - 1, "loss is " + format_double(loss.loss));
      model.backward(loss.grad, ctx);
      model.sgd_step(lr, static_cast<float>(cfg.solver.momentum), static_cast<float>(cfg.solver.weight_decay), it + 1);

      MetricsRow row;
      row.iteration = it + 1;
      row.epoch = epoch;
      row.train_loss = loss.loss;
      const bool end_of_epoch = b + 1 == per_epoch ||
                                (cfg.max_iterations > 0 && it + 1 == static_cast<uint64_t>(cfg.max_iterations));
      const bool eval_now = end_of_epoch || (cfg.eval_every > 0 && (it + 1) % cfg.eval_every == 0);
      if (eval_now && data.val_size() > 0) {
        ctx.iteration = it + 1;
        const EvalResult ev = evaluate(model, cfg, data.val_x, data.val_labels, data.val_targets, ctx);
        row.val_acc = ev.accuracy;
        row.val_loss = ev.loss;
      }
      overflows += ctx.stats.overflow_count;
      result.stats += ctx.stats;
      row.overflow_count = overflows;
      row.wall_ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
      result.rows.push_back(row);
      if (opts.on_row) opts.on_row(row);
      ++it;
    }
  }
  result.iterations = it;
  return result;
}

void save_checkpoint(const std::filesystem::path& dir, Model& model, const TrainConfig& cfg, PrecisionMode mode,
                     uint64_t iteration) {
  std::filesystem::create_directories(dir);
  json layers = json::array();
  for (std::size_t i = 0; i < model.size(); ++i) {
    Layer& l = model.layer(i);
    json params = json::array();
    for (Param* p : l.params()) {
      const std::string file = "layer" + std::to_string(i) + "_" + p->name + ".dft";
      write_dft(dir / file, p->value);
      json entry{{"name", p->name}, {"file", file}, {"shape", p->value.shape}};
      if (p->name == "weight" && l.precision().is_dfp()) {
        const DfpTensor* q = nullptr;
        if (auto* c = dynamic_cast<Conv2d*>(&l)) q = &c->quantized_weight();
        if (auto* f = dynamic_cast<Linear*>(&l)) q = &f->quantized_weight();
        if (q) {
          const std::string qfile = "layer" + std::to_string(i) + "_" + p->name + "_q.dft";
          write_dft(dir / qfile, *q);
          entry["quantized_file"] = qfile;
          entry["exponent"] = q->exponent;
        }
      }
      params.push_back(entry);
    }
    layers.push_back({{"index", i}, {"type", l.type()}, {"precision", l.precision().describe()}, {"params", params}});
  }
  const json manifest{{"format", "dfp-checkpoint"},
                      {"version", 1},
                      {"iteration", iteration},
                      {"precision", to_string(mode)},
                      {"layers", layers},
                      {"config", json::parse(to_json(cfg))}};
  std::ofstream os(dir / "manifest.json");
  if (!os) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
  os << manifest.dump(2) << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw std::runtime_error("cannot read " + (dir / "manifest.json").string());
  Checkpoint c;
  c.manifest.assign(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
  const json m = json::parse(c.manifest);
  for (const auto& l : m.at("layers"))
    for (const auto& p : l.at("params")) {
      const std::string prefix = "layer" + std::to_string(l.at("index").get<int>()) + "_";
      c.tensors.emplace_back(prefix + p.at("name").get<std::string>(), read_dft(dir / p.at("file").get<std::string>()));
      if (p.contains("quantized_file"))
        c.tensors.emplace_back(prefix + p.at("name").get<std::string>() + "_q",
                               read_dft(dir / p.at("quantized_file").get<std::string>()));
    }
  return c;
}

}  // namespace dfp::train
