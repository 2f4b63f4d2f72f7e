// SPDX-FileCopyrightText: © 2026 The dfp16 Authors
//
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "dfp/arith.hpp"
#include "dfp/layers.hpp"
#include "dfp/tensor.hpp"

namespace dfp::train {

enum class PrecisionMode : uint8_t { Fp32, Dfp16 };

PrecisionMode parse_precision_mode(std::string_view s);
std::string to_string(PrecisionMode m);

struct LayerConfig {
  std::string type;        // conv, linear, relu, maxpool, avgpool, batchnorm, flatten, add
  int out = 0;             // output channels (conv) or features (linear)
  int kernel = 3;
  int stride = 1;
  int pad = 0;
  bool bias = true;
  int from = -1;           // add: source layer index, -1 is the model input
  float eps = 1e-5f;       // batchnorm
  float momentum = 0.1f;   // batchnorm running statistics
  std::string precision;   // "fp32", "dfp" or empty for the type default
};

struct QuantSettings {
  int bits = 16;
  int pre_shift = 1;
  std::string activation_rounding = "nearest";
  std::string weight_rounding = "nearest";
  std::string error_rounding = "nearest";
};

struct KernelSettings {
  std::string policy = "empirical";  // empirical | strict
  int64_t chain = 512;
  int rb = 4;
  bool shadow_check = false;         // DFP_SHADOW_CHECK=1 also enables it

  OverflowPolicy make_policy(int bits, int pre_shift) const;
};

struct SolverConfig {
  double base_lr = 0.01;
  double gamma = 0.1;
  int step_epochs = 0;  // 0 disables decay
  double momentum = 0.9;
  double weight_decay = 0.0;

  double learning_rate(int epoch) const;
};

struct TrainConfig {
  Shape input_shape;
  std::vector<LayerConfig> layers;
  std::string loss = "softmax_cross_entropy";  // or mse
  QuantSettings quant;
  KernelSettings kernel;
  SolverConfig solver;
  int batch_size = 64;
  int epochs = 1;
  uint64_t seed = 1;
  int eval_every = 0;        // iterations between validations; 0 = once per epoch
  int eval_batch = 500;
  int64_t max_iterations = 0;  // 0 = no cap

  void validate() const;
};

TrainConfig parse_train_config(std::string_view json_text);
/// Resolved configuration: every field, defaults filled in.
std::string to_json(const TrainConfig& cfg, int indent = 2);

/// Precision of a layer under a run mode. Unset precisions default to DFP
/// for conv, maxpool and batchnorm and to FP32 for linear layers.
LayerPrecision resolve_precision(const LayerConfig& layer, PrecisionMode mode, const QuantSettings& q, uint64_t seed);

}  // namespace dfp::train
