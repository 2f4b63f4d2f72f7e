// SPDX-FileCopyrightText: © 2026 The dfp16 Authors
//
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dfp/arith.hpp"
#include "dfp/kernels.hpp"
#include "dfp/quantize.hpp"
#include "dfp/tensor.hpp"
#include "dfp/tensor_io.hpp"

namespace dfp::train {

/// Per-layer numeric format. Fp32 layers never quantize anything.
struct LayerPrecision {
  enum class Kind : uint8_t { Fp32, Dfp };
  Kind kind = Kind::Fp32;
  QuantConfig activation;  // Q_a
  QuantConfig weight;      // Q_w
  QuantConfig error;       // Q_e

  static LayerPrecision fp32() { return {}; }
  static LayerPrecision dfp(const QuantConfig& q) { return {Kind::Dfp, q, q, q}; }
  bool is_dfp() const { return kind == Kind::Dfp; }
  std::string describe() const;
};

enum class QuantRole : uint8_t { Activation = 0, Weight = 1, Error = 2 };

/// Stochastic-rounding stream id for one quantizer application.
constexpr uint64_t tensor_id(uint64_t iteration, int layer, QuantRole role) {
  return (iteration << 20) ^ (static_cast<uint64_t>(layer) << 2) ^ static_cast<uint64_t>(role);
}

/// Per-pass state shared by all layers.
struct StepContext {
  uint64_t iteration = 0;
  bool training = true;
  OverflowPolicy policy = OverflowPolicy::empirical(512, false);
  int rb_size = 4;
  KernelStats stats;
};

/// A trainable FP32 master tensor with its gradient and momentum buffer.
struct Param {
  std::string name;
  FloatTensor value;
  FloatTensor grad;
  FloatTensor velocity;
  bool decay = true;
};

using NamedTensor = std::pair<std::string, AnyTensor>;

class Layer {
 public:
  virtual ~Layer() = default;

  virtual std::string type() const = 0;
  /// Output shape for a per-sample input shape (no batch axis).
  virtual Shape output_shape(const Shape& in) const = 0;
  virtual FloatTensor forward(const FloatTensor& x, StepContext& ctx) = 0;
  /// Returns dL/dx and fills parameter gradients. Requires a cached forward.
  virtual FloatTensor backward(const FloatTensor& dy, StepContext& ctx) = 0;

  virtual std::vector<Param*> params() { return {}; }
  /// Applies Q_w to the master weights (no-op for FP32 or parameter-free layers).
  virtual void requantize(uint64_t /*iteration*/) {}
  /// Tensors written by the divergence dump.
  virtual std::vector<NamedTensor> debug_tensors() const;

  const LayerPrecision& precision() const { return precision_; }
  int index() const { return index_; }
  void set_index(int i) { index_ = i; }
  std::string label() const { return "layer " + std::to_string(index_) + " (" + type() + ")"; }
  /// When false, backward may skip computing dL/dx and return an empty tensor.
  void set_need_input_grad(bool v) { need_input_grad_ = v; }

 protected:
  explicit Layer(LayerPrecision p = LayerPrecision::fp32()) : precision_(std::move(p)) {}
  [[noreturn]] void missing_cache() const;

  LayerPrecision precision_;
  int index_ = 0;
  bool need_input_grad_ = true;
};

class Conv2d final : public Layer {
 public:
  /// spec carries the input spatial size; weights (K, C, KH, KW) start at zero.
  Conv2d(const ConvSpec& spec, bool bias, LayerPrecision p);

  std::string type() const override { return "conv"; }
  Shape output_shape(const Shape& in) const override;
  FloatTensor forward(const FloatTensor& x, StepContext& ctx) override;
  /// FPROP on an already quantized activation. Errors on precision mismatch.
  FloatTensor forward_quantized(const DfpTensor& a_q, StepContext& ctx);
  FloatTensor backward(const FloatTensor& dy, StepContext& ctx) override;
  std::vector<Param*> params() override;
  void requantize(uint64_t iteration) override;
  std::vector<NamedTensor> debug_tensors() const override;

  const ConvSpec& spec() const { return spec_; }
  Param& weight() { return weight_; }
  std::optional<Param>& bias() { return bias_; }
  const DfpTensor& quantized_weight() const { return w_q_; }

 private:
  FloatTensor backward_dfp(const FloatTensor& dy, StepContext& ctx);

  ConvSpec spec_;
  Param weight_;
  std::optional<Param> bias_;
  DfpTensor w_q_;
  PackedWeights packed_;
  PackedWeights packed_bprop_;
  std::optional<FloatTensor> x_;
  std::optional<DfpTensor> x_q_;
  FloatTensor y_;
};

class Linear final : public Layer {
 public:
  Linear(int in_features, int out_features, bool bias, LayerPrecision p);

  std::string type() const override { return "linear"; }
  Shape output_shape(const Shape& in) const override;
  FloatTensor forward(const FloatTensor& x, StepContext& ctx) override;
  FloatTensor backward(const FloatTensor& dy, StepContext& ctx) override;
  std::vector<Param*> params() override;
  void requantize(uint64_t iteration) override;
  std::vector<NamedTensor> debug_tensors() const override;

  Param& weight() { return weight_; }
  std::optional<Param>& bias() { return bias_; }
  const DfpTensor& quantized_weight() const { return w_q_; }

 private:
  int in_, out_;
  Param weight_;
  std::optional<Param> bias_;
  DfpTensor w_q_;
  std::optional<FloatTensor> x_;
  std::optional<DfpTensor> x_q_;
  FloatTensor y_;
};

class ReLU final : public Layer {
 public:
  std::string type() const override { return "relu"; }
  Shape output_shape(const Shape& in) const override { return in; }
  FloatTensor forward(const FloatTensor& x, StepContext& ctx) override;
  FloatTensor backward(const FloatTensor& dy, StepContext& ctx) override;

 private:
  std::optional<FloatTensor> y_;
};

/// Max pooling. A Dfp precision quantizes the input and pools the integers.
class MaxPool final : public Layer {
 public:
  MaxPool(int kernel, int stride, LayerPrecision p);
  std::string type() const override { return "maxpool"; }
  Shape output_shape(const Shape& in) const override;
  FloatTensor forward(const FloatTensor& x, StepContext& ctx) override;
  FloatTensor backward(const FloatTensor& dy, StepContext& ctx) override;

 private:
  int kernel_, stride_;
  Shape in_shape_;
  std::vector<uint32_t> argmax_;
};

/// Average pooling in FP32. kernel 0 pools the whole plane.
class AvgPool final : public Layer {
 public:
  AvgPool(int kernel, int stride);
  std::string type() const override { return "avgpool"; }
  Shape output_shape(const Shape& in) const override;
  FloatTensor forward(const FloatTensor& x, StepContext& ctx) override;
  FloatTensor backward(const FloatTensor& dy, StepContext& ctx) override;

 private:
  std::pair<int, int> window(const Shape& in) const;
  int kernel_, stride_;
  Shape in_shape_;
};

/// Batch normalization with FP32 statistics over every axis but 1.
class BatchNorm final : public Layer {
 public:
  BatchNorm(int channels, float eps, float momentum, LayerPrecision p);
  std::string type() const override { return "batchnorm"; }
  Shape output_shape(const Shape& in) const override { return in; }
  FloatTensor forward(const FloatTensor& x, StepContext& ctx) override;
  FloatTensor backward(const FloatTensor& dy, StepContext& ctx) override;
  std::vector<Param*> params() override { return {&gamma_, &beta_}; }
  std::vector<NamedTensor> debug_tensors() const override;

  Param& gamma() { return gamma_; }
  Param& beta() { return beta_; }
  const std::vector<float>& running_mean() const { return running_mean_; }
  const std::vector<float>& running_var() const { return running_var_; }

 private:
  int channels_;
  float eps_, momentum_;
  Param gamma_, beta_;
  std::vector<float> running_mean_, running_var_;
  std::optional<FloatTensor> xhat_;
  std::vector<float> inv_std_;
};

class Flatten final : public Layer {
 public:
  std::string type() const override { return "flatten"; }
  Shape output_shape(const Shape& in) const override { return {shape_size(in)}; }
  FloatTensor forward(const FloatTensor& x, StepContext& ctx) override;
  FloatTensor backward(const FloatTensor& dy, StepContext& ctx) override;

 private:
  Shape in_shape_;
};

/// y = x + output of layer `from` (-1 is the model input), in FP32.
class EltwiseAdd final : public Layer {
 public:
  explicit EltwiseAdd(int from) : from_(from) {}
  std::string type() const override { return "add"; }
  Shape output_shape(const Shape& in) const override { return in; }
  FloatTensor forward(const FloatTensor& x, StepContext& ctx) override;
  FloatTensor backward(const FloatTensor& dy, StepContext&) override { return dy; }

  int from() const { return from_; }
  void bind_skip(const FloatTensor* skip) { skip_ = skip; }

 private:
  int from_;
  const FloatTensor* skip_ = nullptr;
};

/// Fan-in scaled Gaussian (std sqrt(2 / fan_in)) drawn from a counter stream.
void he_init(FloatTensor& w, std::size_t fan_in, uint64_t seed, uint64_t stream);

}  // namespace dfp::train
