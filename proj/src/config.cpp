// SPDX-FileCopyrightText: © 2026 The dfp16 Authors
//
// SPDX-License-Identifier: Apache-2.0
#include "dfp/config.hpp"

#include <cmath>
#include <set>
#include <stdexcept>

#include "json.hpp"

namespace dfp::train {
namespace {

using nlohmann::json;

const std::set<std::string> kLayerTypes{"conv", "linear", "relu", "maxpool", "avgpool", "batchnorm", "flatten", "add"};

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (auto it = j.find(key); it != j.end()) {
    try {
      out = it->get<T>();
    } catch (const json::exception& e) {
      throw std::invalid_argument(std::string("config: field '") + key + "': " + e.what());
    }
  }
}

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw std::invalid_argument("config: unknown field '" + key + "' in " + where);
}

LayerConfig layer_from_json(const json& j, std::size_t index) {
  const std::string where = "layers[" + std::to_string(index) + "]";
  if (!j.is_object()) throw std::invalid_argument("config: " + where + " is not an object");
  reject_unknown(j, {"type", "out", "kernel", "stride", "pad", "bias", "from", "eps", "momentum", "precision"}, where);
  LayerConfig l;
  read(j, "type", l.type);
  read(j, "out", l.out);
  read(j, "kernel", l.kernel);
  read(j, "stride", l.stride);
  read(j, "pad", l.pad);
  read(j, "bias", l.bias);
  read(j, "from", l.from);
  read(j, "eps", l.eps);
  read(j, "momentum", l.momentum);
  read(j, "precision", l.precision);
  if (!kLayerTypes.count(l.type)) throw std::invalid_argument("config: " + where + " has unknown type '" + l.type + "'");
  return l;
}

json layer_to_json(const LayerConfig& l) {
  json j{{"type", l.type}};
  if (l.type == "conv" || l.type == "linear") {
    j["out"] = l.out;
    j["bias"] = l.bias;
  }
  if (l.type == "conv" || l.type == "maxpool" || l.type == "avgpool") {
    j["kernel"] = l.kernel;
    j["stride"] = l.stride;
  }
  if (l.type == "conv") j["pad"] = l.pad;
  if (l.type == "add") j["from"] = l.from;
  if (l.type == "batchnorm") {
    j["eps"] = l.eps;
    j["momentum"] = l.momentum;
  }
  if (!l.precision.empty()) j["precision"] = l.precision;
  return j;
}

}  // namespace

PrecisionMode parse_precision_mode(std::string_view s) {
  if (s == "fp32") return PrecisionMode::Fp32;
  if (s == "dfp16") return PrecisionMode::Dfp16;
  throw std::invalid_argument("unknown precision '" + std::string(s) + "' (expected fp32 or dfp16)");
}

std::string to_string(PrecisionMode m) { return m == PrecisionMode::Fp32 ? "fp32" : "dfp16"; }

OverflowPolicy KernelSettings::make_policy(int bits, int pre_shift) const {
  const bool shadow = shadow_check || shadow_check_from_env();
  if (policy == "strict") return OverflowPolicy::strict(chain, bits, pre_shift, shadow);
  if (policy == "empirical") return OverflowPolicy::empirical(chain, shadow);
  throw std::invalid_argument("unknown overflow policy '" + policy + "'");
}

double SolverConfig::learning_rate(int epoch) const {
  if (step_epochs <= 0) return base_lr;
  return base_lr * std::pow(gamma, epoch / step_epochs);
}

void TrainConfig::validate() const {
  if (input_shape.empty() || shape_size(input_shape) == 0) throw std::invalid_argument("config: input_shape is empty");
  if (layers.empty()) throw std::invalid_argument("config: no layers");
  if (loss != "softmax_cross_entropy" && loss != "mse") throw std::invalid_argument("config: unknown loss '" + loss + "'");
  if (batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");
  if (epochs < 0) throw std::invalid_argument("config: epochs must be >= 0");
  if (eval_batch < 1 || eval_every < 0 || max_iterations < 0) throw std::invalid_argument("config: invalid eval settings");
  if (!(solver.base_lr >= 0.0) || !(solver.momentum >= 0.0) || !(solver.weight_decay >= 0.0))
    throw std::invalid_argument("config: solver values must be non-negative");
  QuantConfig{quant.bits, RoundingMode::nearest(), quant.pre_shift}.validate();
  for (const auto* r : {&quant.activation_rounding, &quant.weight_rounding, &quant.error_rounding}) parse_rounding(*r);
  if (kernel.rb < 1) throw std::invalid_argument("config: kernel.rb must be >= 1");
  kernel.make_policy(quant.bits, quant.pre_shift);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    if (!l.precision.empty() && l.precision != "fp32" && l.precision != "dfp")
      throw std::invalid_argument("config: layers[" + std::to_string(i) + "] precision must be fp32 or dfp");
    if (l.type == "add" && (l.from < -1 || l.from >= static_cast<int>(i)))
      throw std::invalid_argument("config: layers[" + std::to_string(i) + "] add source must precede it");
  }
}

TrainConfig parse_train_config(std::string_view json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
  if (!j.is_object()) throw std::invalid_argument("config: top level must be an object");
  reject_unknown(j, {"input_shape", "layers", "loss", "quant", "kernel", "solver", "batch_size", "epochs", "seed",
                     "eval_every", "eval_batch", "max_iterations"}, "top level");
  TrainConfig c;
  read(j, "input_shape", c.input_shape);
  if (auto it = j.find("layers"); it != j.end()) {
    if (!it->is_array()) throw std::invalid_argument("config: layers must be an array");
    for (std::size_t i = 0; i < it->size(); ++i) c.layers.push_back(layer_from_json((*it)[i], i));
  }
  read(j, "loss", c.loss);
  if (auto it = j.find("quant"); it != j.end()) {
    reject_unknown(*it, {"bits", "pre_shift", "rounding", "activation_rounding", "weight_rounding", "error_rounding"}, "quant");
    std::string all;
    read(*it, "rounding", all);
    if (!all.empty()) c.quant.activation_rounding = c.quant.weight_rounding = c.quant.error_rounding = all;
    read(*it, "bits", c.quant.bits);
    read(*it, "pre_shift", c.quant.pre_shift);
    read(*it, "activation_rounding", c.quant.activation_rounding);
    read(*it, "weight_rounding", c.quant.weight_rounding);
    read(*it, "error_rounding", c.quant.error_rounding);
  }
  if (auto it = j.find("kernel"); it != j.end()) {
    reject_unknown(*it, {"policy", "chain", "rb", "shadow_check"}, "kernel");
    read(*it, "policy", c.kernel.policy);
    read(*it, "chain", c.kernel.chain);
    read(*it, "rb", c.kernel.rb);
    read(*it, "shadow_check", c.kernel.shadow_check);
  }
  if (auto it = j.find("solver"); it != j.end()) {
    reject_unknown(*it, {"base_lr", "gamma", "step_epochs", "momentum", "weight_decay"}, "solver");
    read(*it, "base_lr", c.solver.base_lr);
    read(*it, "gamma", c.solver.gamma);
    read(*it, "step_epochs", c.solver.step_epochs);
    read(*it, "momentum", c.solver.momentum);
    read(*it, "weight_decay", c.solver.weight_decay);
  }
  read(j, "batch_size", c.batch_size);
  read(j, "epochs", c.epochs);
  read(j, "seed", c.seed);
  read(j, "eval_every", c.eval_every);
  read(j, "eval_batch", c.eval_batch);
  read(j, "max_iterations", c.max_iterations);
  c.validate();
  return c;
}

std::string to_json(const TrainConfig& c, int indent) {
  json layers = json::array();
  for (const auto& l : c.layers) layers.push_back(layer_to_json(l));
  const json j{
      {"input_shape", c.input_shape},
      {"layers", layers},
      {"loss", c.loss},
      {"quant",
       {{"bits", c.quant.bits},
        {"pre_shift", c.quant.pre_shift},
        {"activation_rounding", c.quant.activation_rounding},
        {"weight_rounding", c.quant.weight_rounding},
        {"error_rounding", c.quant.error_rounding}}},
      {"kernel", {{"policy", c.kernel.policy}, {"chain", c.kernel.chain}, {"rb", c.kernel.rb}, {"shadow_check", c.kernel.shadow_check}}},
      {"solver",
       {{"base_lr", c.solver.base_lr},
        {"gamma", c.solver.gamma},
        {"step_epochs", c.solver.step_epochs},
        {"momentum", c.solver.momentum},
        {"weight_decay", c.solver.weight_decay}}},
      {"batch_size", c.batch_size},
      {"epochs", c.epochs},
      {"seed", c.seed},
      {"eval_every", c.eval_every},
      {"eval_batch", c.eval_batch},
      {"max_iterations", c.max_iterations},
  };
  return j.dump(indent);
}

LayerPrecision resolve_precision(const LayerConfig& layer, PrecisionMode mode, const QuantSettings& q, uint64_t seed) {
  if (mode == PrecisionMode::Fp32) return LayerPrecision::fp32();
  std::string p = layer.precision;
  if (p.empty()) p = (layer.type == "conv" || layer.type == "maxpool" || layer.type == "batchnorm") ? "dfp" : "fp32";
  if (p == "fp32") return LayerPrecision::fp32();
  const uint64_t rseed = splitmix64(seed ^ 0x726f756e64ULL);
  LayerPrecision lp;
  lp.kind = LayerPrecision::Kind::Dfp;
  lp.activation = {q.bits, parse_rounding(q.activation_rounding, rseed), q.pre_shift};
  lp.weight = {q.bits, parse_rounding(q.weight_rounding, rseed), q.pre_shift};
  lp.error = {q.bits, parse_rounding(q.error_rounding, rseed), q.pre_shift};
  return lp;
}

}  // namespace dfp::train
