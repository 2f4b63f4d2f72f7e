// SPDX-FileCopyrightText: © 2026 The dfp16 Authors
//
// SPDX-License-Identifier: Apache-2.0
#include "dfp/model.hpp"

#include <algorithm>
#include <cmath>

namespace dfp::train {
namespace {

FloatTensor with_batch(const FloatTensor& t, std::size_t n, const Shape& sample) {
  FloatTensor out = t;
  out.shape.assign(1, n);
  out.shape.insert(out.shape.end(), sample.begin(), sample.end());
  return out;
}

std::unique_ptr<Layer> make_layer(const LayerConfig& l, const Shape& in, LayerPrecision p) {
  if (l.type == "conv") {
    if (in.size() != 3) throw std::invalid_argument("conv needs a (C, H, W) input, got " + shape_to_string(in));
    const ConvSpec spec{int(in[0]), l.out, int(in[1]), int(in[2]), l.kernel, l.kernel, l.stride, l.pad};
    return std::make_unique<Conv2d>(spec, l.bias, std::move(p));
  }
  if (l.type == "linear") return std::make_unique<Linear>(int(shape_size(in)), l.out, l.bias, std::move(p));
  if (l.type == "relu") return std::make_unique<ReLU>();
  if (l.type == "maxpool") return std::make_unique<MaxPool>(l.kernel, l.stride, std::move(p));
  if (l.type == "avgpool") return std::make_unique<AvgPool>(l.kernel, l.stride);
  if (l.type == "batchnorm") return std::make_unique<BatchNorm>(int(in.at(0)), l.eps, l.momentum, std::move(p));
  if (l.type == "flatten") return std::make_unique<Flatten>();
  if (l.type == "add") return std::make_unique<EltwiseAdd>(l.from);
  throw std::invalid_argument("unknown layer type '" + l.type + "'");
}

}  // namespace

bool all_finite(const FloatTensor& t) {
  return std::all_of(t.data.begin(), t.data.end(), [](float v) { return std::isfinite(v); });
}

Model::Model(Shape input_shape) : input_shape_(std::move(input_shape)) {}

int Model::add(std::unique_ptr<Layer> layer) {
  const int index = static_cast<int>(layers_.size());
  const Shape& in = layers_.empty() ? input_shape_ : shapes_.back();
  if (auto* a = dynamic_cast<EltwiseAdd*>(layer.get())) {
    if (a->from() < -1 || a->from() >= index) throw std::invalid_argument("add: source layer must precede it");
    const Shape& skip = a->from() < 0 ? input_shape_ : shapes_[a->from()];
    if (skip != in)
      throw std::invalid_argument("add: shapes " + shape_to_string(in) + " and " + shape_to_string(skip) + " differ");
  }
  layer->set_index(index);
  layer->set_need_input_grad(index > 0);
  shapes_.push_back(layer->output_shape(in));
  layers_.push_back(std::move(layer));
  return index;
}

FloatTensor Model::forward(const FloatTensor& x, StepContext& ctx) {
  if (x.shape.size() != input_shape_.size() + 1 || !std::equal(input_shape_.begin(), input_shape_.end(), x.shape.begin() + 1))
    throw std::invalid_argument("model: input " + shape_to_string(x.shape) + " does not match " + shape_to_string(input_shape_));
  const std::size_t n = x.shape[0];
  acts_.assign(layers_.size() + 1, FloatTensor{});
  acts_[0] = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (auto* a = dynamic_cast<EltwiseAdd*>(layers_[i].get())) a->bind_skip(&acts_[a->from() + 1]);
    FloatTensor y = layers_[i]->forward(acts_[i], ctx);
    if (!all_finite(y)) throw NonFiniteError(int(i), layers_[i]->label() + ": non-finite output");
    acts_[i + 1] = with_batch(y, n, shapes_[i]);
  }
  return acts_.back();
}

FloatTensor Model::backward(const FloatTensor& dy, StepContext& ctx) {
  if (acts_.size() != layers_.size() + 1) throw std::logic_error("model: backward called without a forward pass");
  std::vector<FloatTensor> grads(layers_.size() + 1);
  grads.back() = dy;
  auto accumulate = [](FloatTensor& into, const FloatTensor& g) {
    if (into.empty()) {
      into = g;
      return;
    }
    for (std::size_t k = 0; k < g.size(); ++k) into.data[k] += g.data[k];
  };
  for (std::size_t i = layers_.size(); i-- > 0;) {
    Layer& l = *layers_[i];
    FloatTensor g = with_batch(grads[i + 1], acts_[i + 1].shape[0], shapes_[i]);
    FloatTensor dx = l.backward(g, ctx);
    if (auto* a = dynamic_cast<EltwiseAdd*>(&l)) accumulate(grads[a->from() + 1], g);
    if (!dx.empty()) accumulate(grads[i], dx);
    grads[i + 1] = FloatTensor{};
  }
  return grads[0];
}

void Model::sgd_step(float lr, float momentum, float weight_decay, uint64_t next_iteration) {
  for (auto& l : layers_)
    for (Param* p : l->params()) sgd_update(*p, lr, momentum, weight_decay, l->label());
  requantize(next_iteration);
}

void Model::requantize(uint64_t iteration) {
  for (auto& l : layers_) l->requantize(iteration);
}

Model build_model(const TrainConfig& cfg, PrecisionMode mode) {
  cfg.validate();
  Model m(cfg.input_shape);
  for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
    const auto& l = cfg.layers[i];
    const Shape& in = i == 0 ? cfg.input_shape : m.output_shape(i - 1);
    try {
      m.add(make_layer(l, in, resolve_precision(l, mode, cfg.quant, cfg.seed)));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("config: layers[" + std::to_string(i) + "]: " + e.what());
    }
    // Same draws in every precision mode.
    for (Param* p : m.layer(i).params())
      if (p->name == "weight") he_init(p->value, p->value.size() / p->value.shape[0], cfg.seed, 1000 + i);
  }
  m.requantize(0);
  return m;
}

LossResult softmax_cross_entropy(const FloatTensor& logits, std::span<const int32_t> labels) {
  if (logits.shape.size() != 2 || logits.shape[0] != labels.size())
    throw std::invalid_argument("softmax_cross_entropy: logits " + shape_to_string(logits.shape) + " vs " +
                                std::to_string(labels.size()) + " labels");
  const std::size_t N = logits.shape[0], K = logits.shape[1];
  LossResult r;
  r.grad = FloatTensor(logits.shape);
  const float inv_n = 1.0f / static_cast<float>(N);
  for (std::size_t n = 0; n < N; ++n) {
    const float* z = logits.data.data() + n * K;
    const int32_t y = labels[n];
    if (y < 0 || std::size_t(y) >= K) throw std::invalid_argument("softmax_cross_entropy: label out of range");
    const std::size_t arg = std::max_element(z, z + K) - z;
    const float zmax = z[arg];
    float sum = 0.0f;
    for (std::size_t k = 0; k < K; ++k) sum += std::exp(z[k] - zmax);
    const float log_sum = std::log(sum);
    r.loss += static_cast<double>(log_sum - (z[y] - zmax));
    r.correct += arg == std::size_t(y);
    float* g = r.grad.data.data() + n * K;
    for (std::size_t k = 0; k < K; ++k) g[k] = (std::exp(z[k] - zmax) / sum - (k == std::size_t(y) ? 1.0f : 0.0f)) * inv_n;
  }
  r.loss /= static_cast<double>(N);
  return r;
}

LossResult mse_loss(const FloatTensor& pred, const FloatTensor& target) {
  if (pred.shape != target.shape)
    throw std::invalid_argument("mse_loss: shapes " + shape_to_string(pred.shape) + " and " + shape_to_string(target.shape));
  LossResult r;
  r.grad = FloatTensor(pred.shape);
  const float scale = 2.0f / static_cast<float>(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const float d = pred.data[i] - target.data[i];
    r.loss += static_cast<double>(d) * d;
    r.grad.data[i] = scale * d;
  }
  r.loss /= static_cast<double>(pred.size());
  return r;
}

void sgd_update(Param& p, float lr, float momentum, float weight_decay, const std::string& owner) {
  if (p.grad.shape != p.value.shape)
    throw std::invalid_argument(owner + ": gradient shape " + shape_to_string(p.grad.shape) + " does not match " + p.name);
  if (!all_finite(p.grad)) throw std::runtime_error(owner + ": non-finite gradient in " + p.name);
  const float wd = p.decay ? weight_decay : 0.0f;
  for (std::size_t i = 0; i < p.value.size(); ++i) {
    float& v = p.velocity.data[i];
    v = momentum * v + p.grad.data[i] + wd * p.value.data[i];
    p.value.data[i] -= lr * v;
  }
}

}  // namespace dfp::train
