// SPDX-FileCopyrightText: © 2026 The dfp16 Authors
//
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dfp/config.hpp"
#include "dfp/layers.hpp"

namespace dfp::train {

/// A layer produced a NaN or Inf.
class NonFiniteError : public std::runtime_error {
 public:
  NonFiniteError(int layer, const std::string& what) : std::runtime_error(what), layer_(layer) {}
  int layer() const { return layer_; }

 private:
  int layer_;
};

/// Layer chain with optional residual (add) edges.
class Model {
 public:
  explicit Model(Shape input_shape);

  /// Appends a layer; returns its index.
  int add(std::unique_ptr<Layer> layer);

  FloatTensor forward(const FloatTensor& x, StepContext& ctx);
  /// Back-propagates dL/d(output); fills every parameter gradient.
  FloatTensor backward(const FloatTensor& dy, StepContext& ctx);

  /// Momentum SGD on every parameter, then Q_w for `next_iteration`.
  void sgd_step(float lr, float momentum, float weight_decay, uint64_t next_iteration);
  void requantize(uint64_t iteration);

  std::size_t size() const { return layers_.size(); }
  Layer& layer(std::size_t i) { return *layers_.at(i); }
  const Layer& layer(std::size_t i) const { return *layers_.at(i); }
  const Shape& input_shape() const { return input_shape_; }
  /// Per-sample output shape of layer i.
  const Shape& output_shape(std::size_t i) const { return shapes_.at(i); }
  /// Input seen by layer i in the last forward pass.
  const FloatTensor& layer_input(std::size_t i) const { return acts_.at(i); }

 private:
  Shape input_shape_;
  std::vector<std::unique_ptr<Layer>> layers_;
  std::vector<Shape> shapes_;
  std::vector<FloatTensor> acts_;
};

Model build_model(const TrainConfig& cfg, PrecisionMode mode);

struct LossResult {
  double loss = 0.0;  // batch mean
  FloatTensor grad;   // dL/d(prediction)
  std::size_t correct = 0;
};

LossResult softmax_cross_entropy(const FloatTensor& logits, std::span<const int32_t> labels);
/// Mean over all elements of (pred - target)^2.
LossResult mse_loss(const FloatTensor& pred, const FloatTensor& target);

/// v = momentum * v + g + wd * W (wd only if p.decay); W -= lr * v.
/// Throws if the gradient holds NaN or Inf, naming `owner`.
void sgd_update(Param& p, float lr, float momentum, float weight_decay, const std::string& owner);

bool all_finite(const FloatTensor& t);

}  // namespace dfp::train
