// SPDX-FileCopyrightText: © 2026 The dfp16 Authors
//
// SPDX-License-Identifier: Apache-2.0
#include "dfp/layers.hpp"

#include <cmath>
#include <stdexcept>

#include "dfp/fp32_ops.hpp"

namespace dfp::train {
namespace {

Param make_param(std::string name, Shape shape, bool decay) {
  Param p;
  p.name = std::move(name);
  p.value = FloatTensor(shape);
  p.grad = FloatTensor(shape);
  p.velocity = FloatTensor(std::move(shape));
  p.decay = decay;
  return p;
}

DfpTensor transpose2d(const DfpTensor& t) {
  const std::size_t rows = t.shape.at(0), cols = t.shape.at(1);
  DfpTensor out{{cols, rows}, std::vector<int16_t>(t.size()), t.exponent, t.bit_width};
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out.elements[j * rows + i] = t.elements[i * cols + j];
  return out;
}

FloatTensor transpose2d(const FloatTensor& t) {
  const std::size_t rows = t.shape.at(0), cols = t.shape.at(1);
  FloatTensor out({cols, rows});
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out.data[j * rows + i] = t.data[i * cols + j];
  return out;
}

/// gemm_dfp with the default chain blocking for a KK-long reduction.
FloatTensor gemm_auto(const DfpTensor& a, const DfpTensor& b, StepContext& ctx) {
  const ConvSpec as_conv{static_cast<int>(a.shape.at(1)), static_cast<int>(a.shape.at(0)), 1,
                         static_cast<int>(b.shape.at(1)), 1, 1, 1, 0};
  BlockingParams blk = default_blocking(as_conv, ctx.policy);
  blk.rb_size = ctx.rb_size;
  auto r = gemm_dfp(a, b, blk, ctx.policy);
  ctx.stats += r.stats;
  return std::move(r.output);
}

void check_operand(const DfpTensor& t, const QuantConfig& cfg, const std::string& who) {
  if (t.bit_width != cfg.bit_width || t.max_abs() > cfg.max_magnitude())
    throw std::invalid_argument(who + ": tensor precision (P=" + std::to_string(t.bit_width) + ", max |i|=" +
                                std::to_string(t.max_abs()) + ") does not match layer precision " +
                                LayerPrecision::dfp(cfg).describe());
}

void add_bias(FloatTensor& y, const std::optional<Param>& bias) {
  if (!bias) return;
  const std::size_t N = y.shape[0], C = y.shape[1], inner = y.size() / (N * C);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      float* p = y.data.data() + (n * C + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) p[i] += bias->value.data[c];
    }
}

std::vector<float> bias_values(const std::optional<Param>& bias) {
  return bias ? bias->value.data : std::vector<float>{};
}

}  // namespace

std::string LayerPrecision::describe() const {
  if (!is_dfp()) return "fp32";
  return "dfp" + std::to_string(activation.bit_width) + "(pre_shift=" + std::to_string(activation.pre_shift) +
         ", a=" + to_string(activation.rounding) + ", w=" + to_string(weight.rounding) + ", e=" +
         to_string(error.rounding) + ")";
}

std::vector<NamedTensor> Layer::debug_tensors() const { return {}; }

void Layer::missing_cache() const {
  throw std::logic_error(label() + ": backward called without a cached forward pass");
}

void he_init(FloatTensor& w, std::size_t fan_in, uint64_t seed, uint64_t stream) {
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (std::size_t i = 0; i < w.size(); ++i) w.data[i] = static_cast<float>(sd * counter_normal(seed, stream, i));
}

// ---- Conv2d -------------------------------------------------------------

Conv2d::Conv2d(const ConvSpec& spec, bool bias, LayerPrecision p) : Layer(std::move(p)), spec_(spec) {
  spec_.validate();
  if (spec_.pad > spec_.kernel_h - 1 || spec_.pad > spec_.kernel_w - 1)
    throw std::invalid_argument("conv: padding must be smaller than the kernel (" + spec_.to_string() + ")");
  weight_ = make_param("weight", {std::size_t(spec_.out_channels), std::size_t(spec_.in_channels),
                                  std::size_t(spec_.kernel_h), std::size_t(spec_.kernel_w)}, true);
  if (bias) bias_ = make_param("bias", {std::size_t(spec_.out_channels)}, false);
}

Shape Conv2d::output_shape(const Shape& in) const {
  if (in != Shape{std::size_t(spec_.in_channels), std::size_t(spec_.height), std::size_t(spec_.width)})
    throw std::invalid_argument("conv: input shape " + shape_to_string(in) + " does not match " + spec_.to_string());
  return {std::size_t(spec_.out_channels), std::size_t(spec_.out_h()), std::size_t(spec_.out_w())};
}

std::vector<Param*> Conv2d::params() {
  std::vector<Param*> out{&weight_};
  if (bias_) out.push_back(&*bias_);
  return out;
}

void Conv2d::requantize(uint64_t iteration) {
  if (!precision_.is_dfp()) return;
  w_q_ = quantize(weight_.value, precision_.weight, tensor_id(iteration, index_, QuantRole::Weight));
  packed_ = pack_weights(w_q_);
  // BPROP weights: swap K and C, rotate each stencil by 180 degrees.
  const int K = spec_.out_channels, C = spec_.in_channels, KH = spec_.kernel_h, KW = spec_.kernel_w;
  DfpTensor wt{{std::size_t(C), std::size_t(K), std::size_t(KH), std::size_t(KW)}, std::vector<int16_t>(w_q_.size()),
               w_q_.exponent, w_q_.bit_width};
  for (int k = 0; k < K; ++k)
    for (int c = 0; c < C; ++c)
      for (int r = 0; r < KH; ++r)
        for (int s = 0; s < KW; ++s)
          wt.elements[((std::size_t(c) * K + k) * KH + (KH - 1 - r)) * KW + (KW - 1 - s)] =
              w_q_.elements[((std::size_t(k) * C + c) * KH + r) * KW + s];
  packed_bprop_ = pack_weights(wt);
}

FloatTensor Conv2d::forward(const FloatTensor& x, StepContext& ctx) {
  if (x.shape.size() != 4) throw std::invalid_argument(label() + ": expected NCHW input, got " + shape_to_string(x.shape));
  output_shape({x.shape[1], x.shape[2], x.shape[3]});
  if (precision_.is_dfp())
    return forward_quantized(quantize(x, precision_.activation, tensor_id(ctx.iteration, index_, QuantRole::Activation)), ctx);
  x_ = x;
  y_ = fp32::conv2d_forward(x, weight_.value, bias_values(bias_), spec_);
  return y_;
}

FloatTensor Conv2d::forward_quantized(const DfpTensor& a_q, StepContext& ctx) {
  if (!precision_.is_dfp()) throw std::invalid_argument(label() + ": FP32 layer given a DFP tensor");
  check_operand(a_q, precision_.activation, label());
  if (w_q_.empty()) throw std::logic_error(label() + ": weights not quantized");
  BlockingParams blk = default_blocking(spec_, ctx.policy);
  blk.rb_size = ctx.rb_size;
  auto r = conv_fprop(a_q, packed_, spec_, blk, ctx.policy);
  ctx.stats += r.stats;
  add_bias(r.output, bias_);
  x_q_ = a_q;
  y_ = std::move(r.output);
  return y_;
}

FloatTensor Conv2d::backward(const FloatTensor& dy, StepContext& ctx) {
  if (precision_.is_dfp()) return backward_dfp(dy, ctx);
  if (!x_) missing_cache();
  weight_.grad = fp32::conv2d_backward_weight(dy, *x_, spec_);
  if (bias_) bias_->grad.data = fp32::channel_sum(dy);
  if (!need_input_grad_) return {};
  return fp32::conv2d_backward_input(dy, weight_.value, spec_, x_->shape[0]);
}

FloatTensor Conv2d::backward_dfp(const FloatTensor& dy, StepContext& ctx) {
  if (!x_q_) missing_cache();
  const DfpTensor& x_q = *x_q_;
  const std::size_t N = x_q.shape[0], K = spec_.out_channels, C = spec_.in_channels;
  const std::size_t OH = spec_.out_h(), OW = spec_.out_w(), P = OH * OW;
  if (dy.shape != Shape{N, K, OH, OW}) throw std::invalid_argument(label() + ": gradient shape " + shape_to_string(dy.shape));

  const DfpTensor e_q = quantize(dy, precision_.error, tensor_id(ctx.iteration, index_, QuantRole::Error));
  if (bias_) bias_->grad.data = fp32::channel_sum(dequantize(e_q));

  // WTGRAD: dW (K x C*KH*KW) = e (K x N*P) * im2col(x) (N*P x C*KH*KW).
  const std::size_t J = C * spec_.kernel_h * spec_.kernel_w;
  DfpTensor a{{K, N * P}, std::vector<int16_t>(K * N * P), e_q.exponent, e_q.bit_width};
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t p = 0; p < P; ++p) a.elements[k * N * P + n * P + p] = e_q.elements[(n * K + k) * P + p];
  DfpTensor b{{N * P, J}, std::vector<int16_t>(N * P * J), x_q.exponent, x_q.bit_width};
  std::vector<int16_t> col(J * P);
  const std::size_t in_plane = C * spec_.height * spec_.width;
  for (std::size_t n = 0; n < N; ++n) {
    fp32::im2col(x_q.elements.data() + n * in_plane, spec_, col.data());
    for (std::size_t j = 0; j < J; ++j)
      for (std::size_t p = 0; p < P; ++p) b.elements[(n * P + p) * J + j] = col[j * P + p];
  }
  weight_.grad.data = gemm_auto(a, b, ctx).data;

  if (!need_input_grad_) return {};
  // BPROP: valid convolution of the stride-dilated, padded error with rotated weights.
  const int ph = spec_.kernel_h - 1 - spec_.pad, pw = spec_.kernel_w - 1 - spec_.pad;
  const int rem_h = (spec_.height + 2 * spec_.pad - spec_.kernel_h) % spec_.stride;
  const int rem_w = (spec_.width + 2 * spec_.pad - spec_.kernel_w) % spec_.stride;
  const std::size_t Hd = (OH - 1) * spec_.stride + 1 + 2 * ph + rem_h;
  const std::size_t Wd = (OW - 1) * spec_.stride + 1 + 2 * pw + rem_w;
  DfpTensor dyp{{N, K, Hd, Wd}, std::vector<int16_t>(N * K * Hd * Wd), e_q.exponent, e_q.bit_width};
  for (std::size_t nk = 0; nk < N * K; ++nk)
    for (std::size_t oh = 0; oh < OH; ++oh)
      for (std::size_t ow = 0; ow < OW; ++ow)
        dyp.elements[(nk * Hd + ph + oh * spec_.stride) * Wd + pw + ow * spec_.stride] = e_q.elements[(nk * OH + oh) * OW + ow];
  const ConvSpec bspec{static_cast<int>(K), static_cast<int>(C), static_cast<int>(Hd), static_cast<int>(Wd),
                       spec_.kernel_h, spec_.kernel_w, 1, 0};
  BlockingParams blk = default_blocking(bspec, ctx.policy);
  blk.rb_size = ctx.rb_size;
  auto r = conv_fprop(dyp, packed_bprop_, bspec, blk, ctx.policy);
  ctx.stats += r.stats;
  return std::move(r.output);
}

std::vector<NamedTensor> Conv2d::debug_tensors() const {
  std::vector<NamedTensor> out{{"weight", weight_.value}};
  if (bias_) out.emplace_back("bias", bias_->value);
  if (!w_q_.empty()) out.emplace_back("weight_q", w_q_);
  if (x_q_) out.emplace_back("input_q", *x_q_);
  if (x_) out.emplace_back("input", *x_);
  if (!y_.empty()) out.emplace_back("output", y_);
  return out;
}

// ---- Linear -------------------------------------------------------------

Linear::Linear(int in_features, int out_features, bool bias, LayerPrecision p)
    : Layer(std::move(p)), in_(in_features), out_(out_features) {
  if (in_ <= 0 || out_ <= 0) throw std::invalid_argument("linear: feature counts must be positive");
  weight_ = make_param("weight", {std::size_t(out_), std::size_t(in_)}, true);
  if (bias) bias_ = make_param("bias", {std::size_t(out_)}, false);
}

Shape Linear::output_shape(const Shape& in) const {
  if (shape_size(in) != std::size_t(in_) || in.size() != 1)
    throw std::invalid_argument("linear: input shape " + shape_to_string(in) + ", expected [" + std::to_string(in_) + "]");
  return {std::size_t(out_)};
}

std::vector<Param*> Linear::params() {
  std::vector<Param*> out{&weight_};
  if (bias_) out.push_back(&*bias_);
  return out;
}

void Linear::requantize(uint64_t iteration) {
  if (precision_.is_dfp())
    w_q_ = quantize(weight_.value, precision_.weight, tensor_id(iteration, index_, QuantRole::Weight));
}

FloatTensor Linear::forward(const FloatTensor& x, StepContext& ctx) {
  if (x.shape.size() != 2 || x.shape[1] != std::size_t(in_))
    throw std::invalid_argument(label() + ": input shape " + shape_to_string(x.shape));
  if (!precision_.is_dfp()) {
    x_ = x;
    y_ = fp32::linear_forward(x, weight_.value, bias_values(bias_));
    return y_;
  }
  if (w_q_.empty()) throw std::logic_error(label() + ": weights not quantized");
  x_q_ = quantize(x, precision_.activation, tensor_id(ctx.iteration, index_, QuantRole::Activation));
  y_ = transpose2d(gemm_auto(w_q_, transpose2d(*x_q_), ctx));
  add_bias(y_, bias_);
  return y_;
}

FloatTensor Linear::backward(const FloatTensor& dy, StepContext& ctx) {
  if (!precision_.is_dfp()) {
    if (!x_) missing_cache();
    weight_.grad = fp32::linear_backward_weight(dy, *x_);
    if (bias_) bias_->grad.data = fp32::channel_sum(dy);
    if (!need_input_grad_) return {};
    return fp32::linear_backward_input(dy, weight_.value);
  }
  if (!x_q_) missing_cache();
  if (dy.shape != Shape{x_q_->shape[0], std::size_t(out_)})
    throw std::invalid_argument(label() + ": gradient shape " + shape_to_string(dy.shape));
  const DfpTensor e_q = quantize(dy, precision_.error, tensor_id(ctx.iteration, index_, QuantRole::Error));
  const DfpTensor e_t = transpose2d(e_q);
  if (bias_) bias_->grad.data = fp32::channel_sum(dequantize(e_q));
  weight_.grad.data = gemm_auto(e_t, *x_q_, ctx).data;
  if (!need_input_grad_) return {};
  return transpose2d(gemm_auto(transpose2d(w_q_), e_t, ctx));
}

std::vector<NamedTensor> Linear::debug_tensors() const {
  std::vector<NamedTensor> out{{"weight", weight_.value}};
  if (bias_) out.emplace_back("bias", bias_->value);
  if (!w_q_.empty()) out.emplace_back("weight_q", w_q_);
  if (x_q_) out.emplace_back("input_q", *x_q_);
  if (x_) out.emplace_back("input", *x_);
  if (!y_.empty()) out.emplace_back("output", y_);
  return out;
}

// ---- ReLU ---------------------------------------------------------------

FloatTensor ReLU::forward(const FloatTensor& x, StepContext&) {
  FloatTensor y(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = x.data[i] > 0.0f ? x.data[i] : 0.0f;
  y_ = y;
  return y;
}

FloatTensor ReLU::backward(const FloatTensor& dy, StepContext&) {
  if (!y_) missing_cache();
  if (dy.size() != y_->size()) throw std::invalid_argument(label() + ": gradient shape " + shape_to_string(dy.shape));
  FloatTensor dx(dy.shape);
  for (std::size_t i = 0; i < dy.size(); ++i) dx.data[i] = y_->data[i] > 0.0f ? dy.data[i] : 0.0f;
  return dx;
}

// ---- MaxPool ------------------------------------------------------------

MaxPool::MaxPool(int kernel, int stride, LayerPrecision p) : Layer(std::move(p)), kernel_(kernel), stride_(stride) {
  if (kernel_ < 1 || stride_ < 1) throw std::invalid_argument("maxpool: kernel and stride must be >= 1");
}

Shape MaxPool::output_shape(const Shape& in) const {
  if (in.size() != 3 || in[1] < std::size_t(kernel_) || in[2] < std::size_t(kernel_))
    throw std::invalid_argument("maxpool: input shape " + shape_to_string(in));
  return {in[0], (in[1] - kernel_) / stride_ + 1, (in[2] - kernel_) / stride_ + 1};
}

FloatTensor MaxPool::forward(const FloatTensor& x, StepContext& ctx) {
  if (x.shape.size() != 4) throw std::invalid_argument(label() + ": expected NCHW input");
  const Shape o = output_shape({x.shape[1], x.shape[2], x.shape[3]});
  const std::size_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3], OH = o[1], OW = o[2];
  in_shape_ = x.shape;
  FloatTensor y({N, C, OH, OW});
  argmax_.assign(y.size(), 0);
  std::optional<DfpTensor> q;
  if (precision_.is_dfp())
    q = quantize(x, precision_.activation, tensor_id(ctx.iteration, index_, QuantRole::Activation));
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t oh = 0; oh < OH; ++oh)
      for (std::size_t ow = 0; ow < OW; ++ow) {
        std::size_t best = (nc * H + oh * stride_) * W + ow * stride_;
        for (int r = 0; r < kernel_; ++r)
          for (int s = 0; s < kernel_; ++s) {
            const std::size_t at = (nc * H + oh * stride_ + r) * W + ow * stride_ + s;
            const bool larger = q ? q->elements[at] > q->elements[best] : x.data[at] > x.data[best];
            if (larger) best = at;
          }
        const std::size_t out = (nc * OH + oh) * OW + ow;
        argmax_[out] = static_cast<uint32_t>(best);
        y.data[out] = q ? std::ldexp(static_cast<float>(q->elements[best]), q->exponent) : x.data[best];
      }
  return y;
}

FloatTensor MaxPool::backward(const FloatTensor& dy, StepContext&) {
  if (in_shape_.empty()) missing_cache();
  if (dy.size() != argmax_.size()) throw std::invalid_argument(label() + ": gradient shape " + shape_to_string(dy.shape));
  FloatTensor dx(in_shape_);
  for (std::size_t i = 0; i < dy.size(); ++i) dx.data[argmax_[i]] += dy.data[i];
  return dx;
}

// ---- AvgPool ------------------------------------------------------------

AvgPool::AvgPool(int kernel, int stride) : kernel_(kernel), stride_(stride) {
  if (kernel_ < 0 || (kernel_ > 0 && stride_ < 1)) throw std::invalid_argument("avgpool: invalid kernel or stride");
}

std::pair<int, int> AvgPool::window(const Shape& in) const {
  if (kernel_ == 0) return {static_cast<int>(in[1]), static_cast<int>(in[2])};
  return {kernel_, kernel_};
}

Shape AvgPool::output_shape(const Shape& in) const {
  if (in.size() != 3) throw std::invalid_argument("avgpool: input shape " + shape_to_string(in));
  const auto [kh, kw] = window(in);
  const int s = kernel_ == 0 ? 1 : stride_;
  if (in[1] < std::size_t(kh) || in[2] < std::size_t(kw)) throw std::invalid_argument("avgpool: window exceeds input");
  return {in[0], (in[1] - kh) / s + 1, (in[2] - kw) / s + 1};
}

FloatTensor AvgPool::forward(const FloatTensor& x, StepContext&) {
  if (x.shape.size() != 4) throw std::invalid_argument(label() + ": expected NCHW input");
  const Shape o = output_shape({x.shape[1], x.shape[2], x.shape[3]});
  const auto [kh, kw] = window({x.shape[1], x.shape[2], x.shape[3]});
  const int s = kernel_ == 0 ? 1 : stride_;
  const std::size_t NC = x.shape[0] * x.shape[1], H = x.shape[2], W = x.shape[3], OH = o[1], OW = o[2];
  in_shape_ = x.shape;
  FloatTensor y({x.shape[0], x.shape[1], OH, OW});
  const float inv = 1.0f / static_cast<float>(kh * kw);
  for (std::size_t nc = 0; nc < NC; ++nc)
    for (std::size_t oh = 0; oh < OH; ++oh)
      for (std::size_t ow = 0; ow < OW; ++ow) {
        float acc = 0.0f;
        for (int r = 0; r < kh; ++r)
          for (int c = 0; c < kw; ++c) acc += x.data[(nc * H + oh * s + r) * W + ow * s + c];
        y.data[(nc * OH + oh) * OW + ow] = acc * inv;
      }
  return y;
}

FloatTensor AvgPool::backward(const FloatTensor& dy, StepContext&) {
  if (in_shape_.empty()) missing_cache();
  const auto [kh, kw] = window({in_shape_[1], in_shape_[2], in_shape_[3]});
  const int s = kernel_ == 0 ? 1 : stride_;
  const std::size_t NC = in_shape_[0] * in_shape_[1], H = in_shape_[2], W = in_shape_[3];
  const std::size_t OH = dy.shape.at(2), OW = dy.shape.at(3);
  FloatTensor dx(in_shape_);
  const float inv = 1.0f / static_cast<float>(kh * kw);
  for (std::size_t nc = 0; nc < NC; ++nc)
    for (std::size_t oh = 0; oh < OH; ++oh)
      for (std::size_t ow = 0; ow < OW; ++ow) {
        const float g = dy.data[(nc * OH + oh) * OW + ow] * inv;
        for (int r = 0; r < kh; ++r)
          for (int c = 0; c < kw; ++c) dx.data[(nc * H + oh * s + r) * W + ow * s + c] += g;
      }
  return dx;
}

// ---- BatchNorm ----------------------------------------------------------

BatchNorm::BatchNorm(int channels, float eps, float momentum, LayerPrecision p)
    : Layer(std::move(p)), channels_(channels), eps_(eps), momentum_(momentum) {
  if (channels_ <= 0 || !(eps_ > 0.0f)) throw std::invalid_argument("batchnorm: channels and eps must be positive");
  gamma_ = make_param("gamma", {std::size_t(channels_)}, false);
  beta_ = make_param("beta", {std::size_t(channels_)}, false);
  std::fill(gamma_.value.data.begin(), gamma_.value.data.end(), 1.0f);
  running_mean_.assign(channels_, 0.0f);
  running_var_.assign(channels_, 1.0f);
}

FloatTensor BatchNorm::forward(const FloatTensor& x_in, StepContext& ctx) {
  if ((x_in.shape.size() != 2 && x_in.shape.size() != 4) || x_in.shape[1] != std::size_t(channels_))
    throw std::invalid_argument(label() + ": input shape " + shape_to_string(x_in.shape));
  // Q_a, then up-convert so statistics are computed in FP32.
  const FloatTensor x = precision_.is_dfp()
      ? dequantize(quantize(x_in, precision_.activation, tensor_id(ctx.iteration, index_, QuantRole::Activation)))
      : x_in;
  const std::size_t N = x.shape[0], C = channels_, inner = x.size() / (N * C), count = N * inner;
  FloatTensor y(x.shape);
  std::vector<float> mean(C), inv_std(C);
  if (ctx.training) {
    if (N < 2) throw std::invalid_argument(label() + ": training needs a minibatch of at least 2");
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < inner; ++i) s += x.data[(n * C + c) * inner + i];
      const double mu = s / static_cast<double>(count);
      double v = 0.0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < inner; ++i) {
          const double d = x.data[(n * C + c) * inner + i] - mu;
          v += d * d;
        }
      v /= static_cast<double>(count);
      mean[c] = static_cast<float>(mu);
      inv_std[c] = static_cast<float>(1.0 / std::sqrt(v + eps_));
      const double unbiased = v * static_cast<double>(count) / static_cast<double>(count - 1);
      running_mean_[c] = (1.0f - momentum_) * running_mean_[c] + momentum_ * static_cast<float>(mu);
      running_var_[c] = (1.0f - momentum_) * running_var_[c] + momentum_ * static_cast<float>(unbiased);
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = running_mean_[c];
      inv_std[c] = 1.0f / std::sqrt(running_var_[c] + eps_);
    }
  }
  FloatTensor xhat(x.shape);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t at = (n * C + c) * inner + i;
        xhat.data[at] = (x.data[at] - mean[c]) * inv_std[c];
        y.data[at] = gamma_.value.data[c] * xhat.data[at] + beta_.value.data[c];
      }
  if (ctx.training) {
    xhat_ = std::move(xhat);
    inv_std_ = std::move(inv_std);
  }
  return y;
}

FloatTensor BatchNorm::backward(const FloatTensor& dy, StepContext&) {
  if (!xhat_) missing_cache();
  const FloatTensor& xhat = *xhat_;
  if (dy.shape != xhat.shape) throw std::invalid_argument(label() + ": gradient shape " + shape_to_string(dy.shape));
  const std::size_t N = dy.shape[0], C = channels_, inner = dy.size() / (N * C);
  const double count = static_cast<double>(N * inner);
  FloatTensor dx(dy.shape);
  for (std::size_t c = 0; c < C; ++c) {
    double dbeta = 0.0, dgamma = 0.0;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t at = (n * C + c) * inner + i;
        dbeta += dy.data[at];
        dgamma += static_cast<double>(dy.data[at]) * xhat.data[at];
      }
    gamma_.grad.data[c] = static_cast<float>(dgamma);
    beta_.grad.data[c] = static_cast<float>(dbeta);
    if (!need_input_grad_) continue;
    const double scale = static_cast<double>(gamma_.value.data[c]) * inv_std_[c] / count;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t at = (n * C + c) * inner + i;
        dx.data[at] = static_cast<float>(scale * (count * dy.data[at] - dbeta - xhat.data[at] * dgamma));
      }
  }
  if (!need_input_grad_) return {};
  return dx;
}

std::vector<NamedTensor> BatchNorm::debug_tensors() const {
  std::vector<NamedTensor> out{{"gamma", gamma_.value}, {"beta", beta_.value}};
  out.emplace_back("running_mean", FloatTensor({std::size_t(channels_)}, running_mean_));
  out.emplace_back("running_var", FloatTensor({std::size_t(channels_)}, running_var_));
  if (xhat_) out.emplace_back("normalized", *xhat_);
  return out;
}

// ---- Flatten / EltwiseAdd -----------------------------------------------

FloatTensor Flatten::forward(const FloatTensor& x, StepContext&) {
  in_shape_ = x.shape;
  FloatTensor y = x;
  y.shape = {x.shape.at(0), x.size() / x.shape.at(0)};
  return y;
}

FloatTensor Flatten::backward(const FloatTensor& dy, StepContext&) {
  if (in_shape_.empty()) missing_cache();
  FloatTensor dx = dy;
  dx.shape = in_shape_;
  return dx;
}

FloatTensor EltwiseAdd::forward(const FloatTensor& x, StepContext&) {
  if (!skip_ || skip_->shape != x.shape)
    throw std::invalid_argument(label() + ": skip input missing or shaped differently from " + shape_to_string(x.shape));
  FloatTensor y(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = x.data[i] + skip_->data[i];
  return y;
}

}  // namespace dfp::train
