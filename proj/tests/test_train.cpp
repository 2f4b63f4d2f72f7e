// SPDX-FileCopyrightText: © 2026 The dfp16 Authors
//
// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <filesystem>
#include <random>
#include <sstream>
#include <stdexcept>

#include "doctest.h"
#include "dfp/fp32_ops.hpp"
#include "dfp/parallel.hpp"
#include "dfp/train.hpp"
#include "grad_check.hpp"
#include "oracles.hpp"

using namespace dfp;
using namespace dfp::train;

namespace {

const QuantConfig kQ{16, RoundingMode::nearest(), 1};
const LayerPrecision kDfp = LayerPrecision::dfp(kQ);

std::vector<double> as_double(const FloatTensor& t) { return {t.data.begin(), t.data.end()}; }

double rel_frobenius(const FloatTensor& got, const FloatTensor& ref) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const double d = double(got.data[i]) - ref.data[i];
    num += d * d;
    den += double(ref.data[i]) * ref.data[i];
  }
  return std::sqrt(num / std::max(den, 1e-300));
}

FloatTensor scalar(float v) { return FloatTensor({1, 1}, {v}); }

Dataset two_gaussians(std::size_t n, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> g(0.0f, 1.0f);
  Dataset d;
  d.name = "two-gaussians";
  d.sample_shape = {2};
  d.num_classes = 2;
  auto fill = [&](FloatTensor& x, std::vector<int32_t>& y, std::size_t count) {
    x = FloatTensor({count, 2});
    y.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
      y[i] = static_cast<int32_t>(i % 2);
      const float mu = y[i] ? 2.0f : -2.0f;
      x.data[2 * i] = mu + g(rng);
      x.data[2 * i + 1] = mu + g(rng);
    }
  };
  fill(d.train_x, d.train_labels, n);
  fill(d.val_x, d.val_labels, n / 4);
  return d;
}

Dataset line(std::size_t n, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  Dataset d;
  d.name = "line";
  d.sample_shape = {1};
  auto fill = [&](FloatTensor& x, FloatTensor& t, std::size_t count) {
    x = FloatTensor({count, 1});
    t = FloatTensor({count, 1});
    for (std::size_t i = 0; i < count; ++i) {
      x.data[i] = u(rng);
      t.data[i] = 3.0f * x.data[i] + 1.0f;
    }
  };
  fill(d.train_x, d.train_targets, n);
  fill(d.val_x, d.val_targets, n / 4);
  return d;
}

TrainConfig mlp_config(const std::string& hidden_precision, int iterations) {
  return parse_train_config(R"({"input_shape":[2],"layers":[
      {"type":"linear","out":16,"precision":")" + hidden_precision + R"("},{"type":"relu"},
      {"type":"linear","out":2,"precision":")" + hidden_precision + R"("}],
    "solver":{"base_lr":0.05,"momentum":0.9},"batch_size":32,"epochs":100,"max_iterations":)" +
                            std::to_string(iterations) + "}");
}

const char* kSmallCnn = R"({"input_shape":[3,8,8],"layers":[
    {"type":"conv","out":8,"kernel":3,"pad":1,"precision":"fp32"},{"type":"relu"},
    {"type":"conv","out":16,"kernel":3,"pad":1},{"type":"batchnorm"},{"type":"relu"},
    {"type":"maxpool","kernel":2,"stride":2},
    {"type":"conv","out":16,"kernel":3,"pad":1},{"type":"relu"},{"type":"add","from":5},
    {"type":"avgpool","kernel":2,"stride":2},{"type":"flatten"},{"type":"linear","out":4}],
  "solver":{"base_lr":0.02,"momentum":0.9,"weight_decay":0.0005},"batch_size":8,"epochs":2,"seed":11,"eval_every":3})";

Dataset random_images(std::size_t n, uint64_t seed) {
  std::mt19937_64 rng(seed);
  Dataset d;
  d.name = "random-images";
  d.sample_shape = {3, 8, 8};
  d.num_classes = 4;
  d.train_x = oracle::gaussian(rng, {n, 3, 8, 8});
  d.val_x = oracle::gaussian(rng, {n / 2, 3, 8, 8});
  for (std::size_t i = 0; i < n; ++i) d.train_labels.push_back(static_cast<int32_t>(i % 4));
  for (std::size_t i = 0; i < n / 2; ++i) d.val_labels.push_back(static_cast<int32_t>(i % 4));
  return d;
}

void check_rows_equal(const std::vector<MetricsRow>& a, const std::vector<MetricsRow>& b) {
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].iteration == b[i].iteration);
    CHECK(a[i].train_loss == b[i].train_loss);
    CHECK(a[i].val_acc == b[i].val_acc);
    CHECK(a[i].val_loss == b[i].val_loss);
    CHECK(a[i].overflow_count == b[i].overflow_count);
  }
}

}  // namespace

TEST_CASE("linear chain rule, scalar case") {
  for (const LayerPrecision& p : {LayerPrecision::fp32(), kDfp}) {
    Model m({1});
    m.add(std::make_unique<ReLU>());  // keeps the linear layer off index 0 so dL/dx is produced
    m.add(std::make_unique<Linear>(1, 1, false, p));
    auto& l = dynamic_cast<Linear&>(m.layer(1));
    l.weight().value.data = {2.0f};
    m.requantize(0);
    StepContext ctx;
    const FloatTensor y = m.forward(scalar(3.0f), ctx);
    CHECK(y.data[0] == 6.0f);
    const FloatTensor dx = m.backward(scalar(1.0f), ctx);
    CHECK(dx.data[0] == 2.0f);
    CHECK(l.weight().grad.data[0] == 3.0f);
  }
}

TEST_CASE("zero upstream error gives zero gradients") {
  std::mt19937_64 rng(1);
  for (const LayerPrecision& p : {LayerPrecision::fp32(), kDfp}) {
    Conv2d conv({4, 8, 6, 6, 3, 3, 1, 1}, true, p);
    he_init(conv.weight().value, 36, 3, 0);
    conv.requantize(0);
    conv.set_index(1);
    StepContext ctx;
    const FloatTensor y = conv.forward(oracle::gaussian(rng, {2, 4, 6, 6}), ctx);
    const FloatTensor dx = conv.backward(FloatTensor(y.shape), ctx);
    for (float v : dx.data) CHECK(v == 0.0f);
    for (float v : conv.weight().grad.data) CHECK(v == 0.0f);
    for (float v : conv.bias()->grad.data) CHECK(v == 0.0f);
  }
}

TEST_CASE("FP32 conv layer equals the FP64 convolution and quantizes nothing") {
  std::mt19937_64 rng(2);
  const ConvSpec spec{5, 7, 9, 8, 3, 3, 2, 1};
  Conv2d conv(spec, true, LayerPrecision::fp32());
  conv.weight().value = oracle::gaussian(rng, conv.weight().value.shape, 0.3);
  conv.bias()->value = oracle::gaussian(rng, {7});
  conv.requantize(0);
  CHECK(conv.quantized_weight().empty());
  const FloatTensor x = oracle::gaussian(rng, {2, 5, 9, 8});
  StepContext ctx;
  const FloatTensor y = conv.forward(x, ctx);
  auto ref = oracle::conv_fp64(as_double(x), as_double(conv.weight().value), 2, spec);
  const std::size_t plane = std::size_t(spec.out_h()) * spec.out_w();
  for (std::size_t i = 0; i < ref.size(); ++i) ref[i] += conv.bias()->value.data[(i / plane) % 7];
  for (std::size_t i = 0; i < ref.size(); ++i) CHECK(y.data[i] == doctest::Approx(ref[i]).epsilon(1e-5));
  CHECK(ctx.stats.fma_count == 0);
}

TEST_CASE("DFP conv impulse reproduces the quantized stencil") {
  std::mt19937_64 rng(3);
  const ConvSpec spec{1, 1, 5, 5, 3, 3, 1, 1};
  Conv2d conv(spec, false, kDfp);
  conv.weight().value = oracle::gaussian(rng, {1, 1, 3, 3});
  conv.requantize(0);
  FloatTensor x({1, 1, 5, 5});
  x.data[12] = 1.0f;
  StepContext ctx;
  const FloatTensor y = conv.forward(x, ctx);
  const FloatTensor wq = dequantize(conv.quantized_weight());
  for (int oh = 0; oh < 5; ++oh)
    for (int ow = 0; ow < 5; ++ow) {
      const int r = 3 - oh, s = 3 - ow;
      const float expect = (r >= 0 && r < 3 && s >= 0 && s < 3) ? wq.data[r * 3 + s] : 0.0f;
      CHECK(y.data[oh * 5 + ow] == expect);
    }
}

TEST_CASE("conv then ReLU zeroes negative pre-activations") {
  Model m({1, 3, 3});
  m.add(std::make_unique<Conv2d>(ConvSpec{1, 1, 3, 3, 1, 1, 1, 0}, false, kDfp));
  m.add(std::make_unique<ReLU>());
  dynamic_cast<Conv2d&>(m.layer(0)).weight().value.data = {-1.0f};
  m.requantize(0);
  StepContext ctx;
  const FloatTensor y = m.forward(FloatTensor({1, 1, 3, 3}, {1, -2, 3, -4, 5, -6, 7, -8, 9}), ctx);
  CHECK(y.data == std::vector<float>{0, 2, 0, 4, 0, 6, 0, 8, 0});
}

TEST_CASE("precision mismatch and missing caches are errors") {
  Conv2d fp({1, 16, 4, 4, 1, 1, 1, 0}, false, LayerPrecision::fp32());
  StepContext ctx;
  const DfpTensor q = quantize(FloatTensor({1, 1, 4, 4}), kQ);
  CHECK_THROWS_AS(fp.forward_quantized(q, ctx), std::invalid_argument);

  Conv2d d({1, 16, 4, 4, 1, 1, 1, 0}, false, kDfp);
  d.requantize(0);
  DfpTensor wide = q;
  wide.elements[0] = 20000;  // beyond the pre-shifted range
  CHECK_THROWS_AS(d.forward_quantized(wide, ctx), std::invalid_argument);
  DfpTensor narrow = q;
  narrow.bit_width = 8;
  CHECK_THROWS_AS(d.forward_quantized(narrow, ctx), std::invalid_argument);

  CHECK_THROWS_AS(d.backward(FloatTensor({1, 16, 4, 4}), ctx), std::logic_error);
  Linear l(3, 2, true, LayerPrecision::fp32());
  CHECK_THROWS_AS(l.backward(FloatTensor({1, 2}), ctx), std::logic_error);
  ReLU r;
  CHECK_THROWS_AS(r.backward(FloatTensor({1, 2}), ctx), std::logic_error);
}

TEST_CASE("FP32 conv gradients match FP64 central differences") {
  std::mt19937_64 rng(4);
  for (const ConvSpec spec : {ConvSpec{3, 4, 6, 5, 3, 3, 1, 1}, ConvSpec{2, 3, 7, 7, 3, 3, 2, 0}, ConvSpec{2, 2, 6, 6, 2, 2, 2, 1}}) {
    Conv2d conv(spec, true, LayerPrecision::fp32());
    conv.weight().value = oracle::gaussian(rng, conv.weight().value.shape, 0.5);
    conv.set_index(1);
    const FloatTensor x = oracle::gaussian(rng, {2, std::size_t(spec.in_channels), std::size_t(spec.height), std::size_t(spec.width)});
    StepContext ctx;
    const FloatTensor y = conv.forward(x, ctx);
    const FloatTensor c = oracle::gaussian(rng, y.shape);
    const FloatTensor dx = conv.backward(c, ctx);
    // L = sum(c * conv(x, w)) is bilinear, so central differences are exact up to rounding.
    auto loss = [&](const std::vector<double>& xv, const std::vector<double>& wv) {
      const auto out = oracle::conv_fp64(xv, wv, 2, spec);
      double L = 0.0;
      for (std::size_t i = 0; i < out.size(); ++i) L += out[i] * c.data[i];
      return L;
    };
    auto xv = as_double(x), wv = as_double(conv.weight().value);
    const double h = 1e-3;
    for (std::size_t i = 0; i < wv.size(); ++i) {
      const double w0 = wv[i];
      wv[i] = w0 + h;
      const double lp = loss(xv, wv);
      wv[i] = w0 - h;
      const double lm = loss(xv, wv);
      wv[i] = w0;
      CHECK(conv.weight().grad.data[i] == doctest::Approx((lp - lm) / (2 * h)).epsilon(1e-4).scale(1.0));
    }
    for (std::size_t i = 0; i < xv.size(); i += 3) {
      const double x0 = xv[i];
      xv[i] = x0 + h;
      const double lp = loss(xv, wv);
      xv[i] = x0 - h;
      const double lm = loss(xv, wv);
      xv[i] = x0;
      CHECK(dx.data[i] == doctest::Approx((lp - lm) / (2 * h)).epsilon(1e-4).scale(1.0));
    }
  }
}

TEST_CASE("DFP conv BPROP and WTGRAD equal FP32 math on the quantized operands") {
  std::mt19937_64 rng(5);
  for (const ConvSpec spec : {ConvSpec{16, 16, 8, 8, 3, 3, 1, 1}, ConvSpec{5, 9, 9, 7, 3, 3, 2, 1},
                              ConvSpec{8, 4, 6, 6, 2, 2, 2, 0}, ConvSpec{3, 20, 5, 5, 1, 1, 1, 0}}) {
    Conv2d conv(spec, true, kDfp);
    conv.weight().value = oracle::gaussian(rng, conv.weight().value.shape, 0.5);
    conv.requantize(0);
    conv.set_index(2);
    const FloatTensor x = oracle::gaussian(rng, {3, std::size_t(spec.in_channels), std::size_t(spec.height), std::size_t(spec.width)});
    StepContext ctx;
    ctx.policy = OverflowPolicy::empirical(512, true);
    const FloatTensor y = conv.forward(x, ctx);
    const FloatTensor dy = oracle::gaussian(rng, y.shape);
    const FloatTensor dx = conv.backward(dy, ctx);
    CHECK(ctx.stats.overflow_count == 0);

    const FloatTensor xq = dequantize(quantize(x, kQ));
    const FloatTensor eq = dequantize(quantize(dy, kQ));
    const FloatTensor wq = dequantize(conv.quantized_weight());
    const FloatTensor dx_ref = fp32::conv2d_backward_input(eq, wq, spec, 3);
    const FloatTensor dw_ref = fp32::conv2d_backward_weight(eq, xq, spec);
    CHECK(rel_frobenius(dx, dx_ref) < 1e-6);
    CHECK(rel_frobenius(conv.weight().grad, dw_ref) < 1e-6);
    CHECK(conv.bias()->grad.data == fp32::channel_sum(eq));

    // Against unquantized FP32 math the gap is a quantization-sized error.
    CHECK(rel_frobenius(dx, fp32::conv2d_backward_input(dy, conv.weight().value, spec, 3)) < 1e-3);
    CHECK(rel_frobenius(conv.weight().grad, fp32::conv2d_backward_weight(dy, x, spec)) < 1e-3);
  }
}

TEST_CASE("DFP linear layer matches FP32 math on the quantized operands") {
  std::mt19937_64 rng(6);
  Linear l(37, 21, true, kDfp);
  l.weight().value = oracle::gaussian(rng, {21, 37}, 0.2);
  l.bias()->value = oracle::gaussian(rng, {21});
  l.requantize(0);
  l.set_index(1);
  const FloatTensor x = oracle::gaussian(rng, {5, 37});
  StepContext ctx;
  const FloatTensor y = l.forward(x, ctx);
  const FloatTensor xq = dequantize(quantize(x, kQ));
  const FloatTensor wq = dequantize(l.quantized_weight());
  CHECK(rel_frobenius(y, fp32::linear_forward(xq, wq, l.bias()->value.data)) < 1e-6);
  const FloatTensor dy = oracle::gaussian(rng, y.shape);
  const FloatTensor dx = l.backward(dy, ctx);
  const FloatTensor eq = dequantize(quantize(dy, kQ));
  CHECK(rel_frobenius(dx, fp32::linear_backward_input(eq, wq)) < 1e-6);
  CHECK(rel_frobenius(l.weight().grad, fp32::linear_backward_weight(eq, xq)) < 1e-6);
}

TEST_CASE("DFP gradients agree with FP64 finite differences within the quantization tolerance") {
  for (uint64_t seed : {1, 2, 3}) {
    const auto r = oracle::two_layer_gradient_fidelity(seed, 6, 12, 10, 4, kQ);
    INFO("seed " << seed << " max ratio " << r.max_ratio << " max rel dev " << r.max_rel_dev);
    CHECK(r.elements == 12 * 10 + 10 * 4);
    CHECK(r.ok());
    CHECK(r.max_rel_dev < 1e-3);
    CHECK(r.max_abs_dev > 0.0);  // the DFP path really differs from FP64
  }
  // A 6-bit format fails a 16-bit-sized tolerance but passes its own.
  const QuantConfig q6{6, RoundingMode::nearest(), 1};
  const auto r6 = oracle::two_layer_gradient_fidelity(4, 6, 12, 10, 4, q6);
  CHECK(r6.ok());
  CHECK(r6.max_rel_dev > 1e-3);
}

TEST_CASE("sgd_update examples") {
  Param p{"w", FloatTensor({1}, {1.0f}), FloatTensor({1}, {0.5f}), FloatTensor({1}), true};
  sgd_update(p, 0.1f, 0.0f, 0.0f, "layer 0");
  CHECK(p.value.data[0] == doctest::Approx(0.95));
  CHECK(p.value.data[0] == 1.0f - 0.1f * 0.5f);

  Param m{"w", FloatTensor({1}, {0.0f}), FloatTensor({1}, {0.25f}), FloatTensor({1}), true};
  sgd_update(m, 0.0f, 0.9f, 0.0f, "layer 0");
  CHECK(m.velocity.data[0] == 0.25f);
  sgd_update(m, 0.0f, 0.9f, 0.0f, "layer 0");
  CHECK(m.velocity.data[0] == doctest::Approx(1.9 * 0.25));

  Param nan{"weight", FloatTensor({2}), FloatTensor({2}, {0.0f, NAN}), FloatTensor({2}), true};
  try {
    sgd_update(nan, 0.1f, 0.0f, 0.0f, "layer 3 (conv)");
    FAIL("expected an error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("layer 3 (conv)") != std::string::npos);
  }
}

TEST_CASE("zero gradient leaves master and quantized weights unchanged") {
  std::mt19937_64 rng(7);
  Model m({4, 6, 6});
  m.add(std::make_unique<Conv2d>(ConvSpec{4, 16, 6, 6, 3, 3, 1, 1}, true, kDfp));
  auto& conv = dynamic_cast<Conv2d&>(m.layer(0));
  conv.weight().value = oracle::gaussian(rng, conv.weight().value.shape);
  m.requantize(0);
  const FloatTensor w0 = conv.weight().value;
  const DfpTensor q0 = conv.quantized_weight();
  m.sgd_step(0.1f, 0.9f, 0.0f, 1);
  CHECK(conv.weight().value.data == w0.data);
  CHECK(conv.quantized_weight() == q0);
}

TEST_CASE("batchnorm examples") {
  StepContext ctx;
  SUBCASE("constant channel gives beta") {
    BatchNorm bn(2, 1e-5f, 0.1f, LayerPrecision::fp32());
    bn.beta().value.data = {0.5f, -1.5f};
    const FloatTensor y = bn.forward(FloatTensor({3, 2}, {4, 1, 4, 2, 4, 3}), ctx);
    for (int n = 0; n < 3; ++n) CHECK(y.data[n * 2] == 0.5f);
  }
  SUBCASE("two-sample channel") {
    BatchNorm bn(1, 1e-3f, 0.1f, LayerPrecision::fp32());
    const FloatTensor y = bn.forward(FloatTensor({2, 1}, {-1, 1}), ctx);
    CHECK(y.data[0] == doctest::Approx(-1.0 / std::sqrt(1.001)).epsilon(1e-6));
    CHECK(y.data[1] == doctest::Approx(1.0 / std::sqrt(1.001)).epsilon(1e-6));
  }
  SUBCASE("normalized statistics on random inputs") {
    std::mt19937_64 rng(8);
    for (const LayerPrecision& p : {LayerPrecision::fp32(), kDfp}) {
      BatchNorm bn(6, 1e-5f, 0.1f, p);
      FloatTensor x = oracle::gaussian(rng, {16, 6, 5, 5}, 3.0);
      for (std::size_t i = 0; i < x.size(); ++i) x.data[i] += static_cast<float>((i / 25) % 6);
      const FloatTensor y = bn.forward(x, ctx);
      for (int c = 0; c < 6; ++c) {
        double s = 0.0, s2 = 0.0;
        for (int n = 0; n < 16; ++n)
          for (int i = 0; i < 25; ++i) {
            const double v = y.data[(n * 6 + c) * 25 + i];
            s += v;
            s2 += v * v;
          }
        const double mean = s / 400.0;
        CHECK(std::fabs(mean) < 1e-5);
        CHECK(std::fabs(s2 / 400.0 - mean * mean - 1.0) < 1e-3);
      }
    }
  }
  SUBCASE("training needs two samples") {
    BatchNorm bn(1, 1e-5f, 0.1f, LayerPrecision::fp32());
    CHECK_THROWS_AS(bn.forward(FloatTensor({1, 1}, {2.0f}), ctx), std::invalid_argument);
    ctx.training = false;
    CHECK_NOTHROW(bn.forward(FloatTensor({1, 1}, {2.0f}), ctx));
  }
}

TEST_CASE("batchnorm backward matches central differences") {
  std::mt19937_64 rng(9);
  BatchNorm bn(3, 1e-5f, 0.1f, LayerPrecision::fp32());
  bn.gamma().value.data = {1.5f, -0.5f, 2.0f};
  bn.beta().value.data = {0.1f, 0.2f, 0.3f};
  bn.set_index(1);
  const FloatTensor x = oracle::gaussian(rng, {4, 3, 2, 2});
  const FloatTensor c = oracle::gaussian(rng, x.shape);
  StepContext ctx;
  bn.forward(x, ctx);
  const FloatTensor dx = bn.backward(c, ctx);
  // FP64 reference of L = sum(c * bn(x)).
  auto loss = [&](std::vector<double> xv) {
    double L = 0.0;
    for (int ch = 0; ch < 3; ++ch) {
      double m = 0.0, v = 0.0;
      for (int n = 0; n < 4; ++n)
        for (int i = 0; i < 4; ++i) m += xv[(n * 3 + ch) * 4 + i];
      m /= 16.0;
      for (int n = 0; n < 4; ++n)
        for (int i = 0; i < 4; ++i) v += std::pow(xv[(n * 3 + ch) * 4 + i] - m, 2);
      v /= 16.0;
      for (int n = 0; n < 4; ++n)
        for (int i = 0; i < 4; ++i) {
          const std::size_t at = (n * 3 + ch) * 4 + i;
          L += c.data[at] * (bn.gamma().value.data[ch] * (xv[at] - m) / std::sqrt(v + 1e-5) + bn.beta().value.data[ch]);
        }
    }
    return L;
  };
  auto xv = as_double(x);
  for (std::size_t i = 0; i < xv.size(); ++i) {
    auto xp = xv, xm = xv;
    xp[i] += 1e-5;
    xm[i] -= 1e-5;
    CHECK(dx.data[i] == doctest::Approx((loss(xp) - loss(xm)) / 2e-5).epsilon(1e-3).scale(1.0));
  }
}

TEST_CASE("max pooling on DFP integers matches FP32 pooling") {
  std::mt19937_64 rng(10);
  const FloatTensor x = dequantize(quantize(oracle::gaussian(rng, {2, 3, 7, 6}), kQ));
  MaxPool fp(2, 2, LayerPrecision::fp32()), dfp(2, 2, kDfp);
  StepContext ctx;
  const FloatTensor a = fp.forward(x, ctx), b = dfp.forward(x, ctx);
  CHECK(a.shape == Shape{2, 3, 3, 3});
  CHECK(a.data == b.data);
  const FloatTensor g = oracle::gaussian(rng, a.shape);
  const FloatTensor ga = fp.backward(g, ctx);
  double total = 0.0;
  for (float v : ga.data) total += v;
  double expect = 0.0;
  for (float v : g.data) expect += v;
  CHECK(total == doctest::Approx(expect));
  CHECK(fp.backward(g, ctx).data == dfp.backward(g, ctx).data);
}

TEST_CASE("average pooling, flatten and residual add") {
  StepContext ctx;
  AvgPool global(0, 1);
  const FloatTensor x({1, 2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  const FloatTensor y = global.forward(x, ctx);
  CHECK(y.shape == Shape{1, 2, 1, 1});
  CHECK(y.data == std::vector<float>{2.5f, 6.5f});
  CHECK(global.backward(FloatTensor({1, 2, 1, 1}, {4, 8}), ctx).data == std::vector<float>{1, 1, 1, 1, 2, 2, 2, 2});

  // y = relu(x) + x: gradient is dy * (1 + [x > 0]).
  Model m({4});
  m.add(std::make_unique<ReLU>());
  m.add(std::make_unique<EltwiseAdd>(-1));
  const FloatTensor out = m.forward(FloatTensor({1, 4}, {-1, 2, -3, 4}), ctx);
  CHECK(out.data == std::vector<float>{-1, 4, -3, 8});
  CHECK(m.backward(FloatTensor({1, 4}, {1, 1, 1, 1}), ctx).data == std::vector<float>{1, 2, 1, 2});
  CHECK_THROWS_AS(m.add(std::make_unique<EltwiseAdd>(5)), std::invalid_argument);
}

TEST_CASE("model gradients of a small FP32 CNN match central differences") {
  TrainConfig cfg = parse_train_config(kSmallCnn);
  Model m = build_model(cfg, PrecisionMode::Fp32);
  std::mt19937_64 rng(12);
  const FloatTensor x = oracle::gaussian(rng, {4, 3, 8, 8});
  const std::vector<int32_t> y{0, 1, 2, 3};
  StepContext ctx;
  const LossResult base = softmax_cross_entropy(m.forward(x, ctx), y);
  m.backward(base.grad, ctx);
  auto& conv = dynamic_cast<Conv2d&>(m.layer(2));
  auto& fc = dynamic_cast<Linear&>(m.layer(11));
  auto probe = [&](Param& p, std::size_t i) {
    const float w0 = p.value.data[i];
    const float h = 1e-2f;
    p.value.data[i] = w0 + h;
    const double lp = softmax_cross_entropy(m.forward(x, ctx), y).loss;
    p.value.data[i] = w0 - h;
    const double lm = softmax_cross_entropy(m.forward(x, ctx), y).loss;
    p.value.data[i] = w0;
    return (lp - lm) / (2.0 * h);
  };
  const FloatTensor gconv = conv.weight().grad, gfc = fc.weight().grad;
  for (std::size_t i = 0; i < gconv.size(); i += 97) CHECK(gconv.data[i] == doctest::Approx(probe(conv.weight(), i)).epsilon(2e-2).scale(1e-2));
  for (std::size_t i = 0; i < gfc.size(); i += 7) CHECK(gfc.data[i] == doctest::Approx(probe(fc.weight(), i)).epsilon(2e-2).scale(1e-2));
}

TEST_CASE("two-Gaussian MLP reaches 99% train accuracy in both modes") {
  const Dataset d = two_gaussians(1000, 21);
  for (const auto& [mode, precision] : {std::pair{PrecisionMode::Fp32, "fp32"}, std::pair{PrecisionMode::Dfp16, "dfp"}}) {
    const TrainConfig cfg = mlp_config(precision, 500);
    TrainResult r = train_loop(cfg, d, mode);
    CHECK(r.iterations == 500);
    StepContext ctx;
    const EvalResult ev = evaluate(r.model, cfg, d.train_x, d.train_labels, {}, ctx);
    INFO(to_string(mode) << " train accuracy " << *ev.accuracy);
    CHECK(*ev.accuracy >= 0.99);
    if (mode == PrecisionMode::Dfp16) {
      CHECK(r.stats.fma_count > 0);
      CHECK(r.model.layer(0).precision().is_dfp());
    }
  }
}

TEST_CASE("linear regression learns the same line in both modes") {
  const Dataset d = line(512, 22);
  const TrainConfig cfg = parse_train_config(R"({"input_shape":[1],"layers":[{"type":"linear","out":1,"precision":"dfp"}],
      "loss":"mse","solver":{"base_lr":0.1,"momentum":0.5},"batch_size":16,"epochs":10})");
  TrainResult a = train_loop(cfg, d, PrecisionMode::Fp32);
  TrainResult b = train_loop(cfg, d, PrecisionMode::Dfp16);
  auto& la = dynamic_cast<Linear&>(a.model.layer(0));
  auto& lb = dynamic_cast<Linear&>(b.model.layer(0));
  CHECK(la.weight().value.data[0] == doctest::Approx(3.0).epsilon(1e-3));
  CHECK(la.bias()->value.data[0] == doctest::Approx(1.0).epsilon(1e-3));
  CHECK(std::fabs(la.weight().value.data[0] - lb.weight().value.data[0]) < 1e-2);
  CHECK(std::fabs(la.bias()->value.data[0] - lb.bias()->value.data[0]) < 1e-2);
  CHECK_FALSE(a.rows.back().val_acc.has_value());
  CHECK(a.rows.back().val_loss.has_value());
}

TEST_CASE("zero learning rate keeps weights bit-identical") {
  TrainConfig cfg = parse_train_config(kSmallCnn);
  cfg.solver.base_lr = 0.0;
  const Dataset d = random_images(32, 13);
  for (PrecisionMode mode : {PrecisionMode::Fp32, PrecisionMode::Dfp16}) {
    Model init = build_model(cfg, mode);
    TrainResult r = train_loop(cfg, d, mode);
    CHECK(r.iterations == 8);
    for (std::size_t i = 0; i < init.size(); ++i) {
      const auto pa = init.layer(i).params();
      const auto pb = r.model.layer(i).params();
      REQUIRE(pa.size() == pb.size());
      for (std::size_t k = 0; k < pa.size(); ++k) CHECK(pa[k]->value.data == pb[k]->value.data);
      if (auto* c = dynamic_cast<Conv2d*>(&init.layer(i)))
        CHECK(c->quantized_weight() == dynamic_cast<Conv2d&>(r.model.layer(i)).quantized_weight());
    }
  }
}

TEST_CASE("FP32 mode reproduces a plain FP32 trainer bit for bit") {
  const Dataset d = two_gaussians(96, 31);
  const TrainConfig cfg = parse_train_config(R"({"input_shape":[2],"layers":[
      {"type":"linear","out":8},{"type":"relu"},{"type":"linear","out":2}],
      "solver":{"base_lr":0.05,"momentum":0.9,"weight_decay":0.001},"batch_size":16,"epochs":3,"seed":5})");
  TrainResult r = train_loop(cfg, d, PrecisionMode::Fp32);

  // DFP16 mode with every layer pinned to FP32 has no quantizer left.
  TrainConfig pinned = cfg;
  for (auto& l : pinned.layers) l.precision = "fp32";
  TrainResult p = train_loop(pinned, d, PrecisionMode::Dfp16);
  check_rows_equal(r.rows, p.rows);

  // Hand-written FP32 trainer with the same init, order and update rule.
  const std::size_t I = 2, H = 8, O = 2, B = 16;
  FloatTensor w1({H, I}), w2({O, H});
  he_init(w1, I, 5, 1000);
  he_init(w2, H, 5, 1002);
  std::vector<float> b1(H, 0.0f), b2(O, 0.0f), vw1(H * I, 0.0f), vw2(O * H, 0.0f), vb1(H, 0.0f), vb2(O, 0.0f);
  const float lr = 0.05f, mu = 0.9f, wd = 0.001f;
  auto update = [&](std::vector<float>& w, std::vector<float>& v, const std::vector<float>& g, float decay) {
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = mu * v[i] + g[i] + decay * w[i];
      w[i] -= lr * v[i];
    }
  };
  std::vector<double> losses;
  for (int epoch = 0; epoch < 3; ++epoch) {
    const auto order = epoch_order(96, 5, epoch);
    for (std::size_t b = 0; b < 96 / B; ++b) {
      std::vector<float> x(B * I), h(B * H), a(B * H);
      std::vector<int32_t> y(B);
      for (std::size_t n = 0; n < B; ++n) {
        const std::size_t s = order[b * B + n];
        x[n * I] = d.train_x.data[s * I];
        x[n * I + 1] = d.train_x.data[s * I + 1];
        y[n] = d.train_labels[s];
      }
      FloatTensor z({B, O});
      for (std::size_t n = 0; n < B; ++n) {
        for (std::size_t j = 0; j < H; ++j) {
          float acc = 0.0f;
          for (std::size_t i = 0; i < I; ++i) acc += x[n * I + i] * w1.data[j * I + i];
          h[n * H + j] = acc + b1[j];
          a[n * H + j] = h[n * H + j] > 0.0f ? h[n * H + j] : 0.0f;
        }
        for (std::size_t o = 0; o < O; ++o) {
          float acc = 0.0f;
          for (std::size_t j = 0; j < H; ++j) acc += a[n * H + j] * w2.data[o * H + j];
          z.data[n * O + o] = acc + b2[o];
        }
      }
      const LossResult L = softmax_cross_entropy(z, y);
      losses.push_back(L.loss);
      const auto& dz = L.grad.data;
      std::vector<float> gw2(O * H, 0.0f), gb2(O, 0.0f), da(B * H, 0.0f), gw1(H * I, 0.0f), gb1(H, 0.0f);
      for (std::size_t o = 0; o < O; ++o)
        for (std::size_t n = 0; n < B; ++n)
          for (std::size_t j = 0; j < H; ++j) gw2[o * H + j] += dz[n * O + o] * a[n * H + j];
      for (std::size_t n = 0; n < B; ++n)
        for (std::size_t o = 0; o < O; ++o) gb2[o] += dz[n * O + o];
      for (std::size_t n = 0; n < B; ++n)
        for (std::size_t o = 0; o < O; ++o)
          for (std::size_t j = 0; j < H; ++j) da[n * H + j] += dz[n * O + o] * w2.data[o * H + j];
      for (std::size_t k = 0; k < B * H; ++k) da[k] = a[k] > 0.0f ? da[k] : 0.0f;
      for (std::size_t j = 0; j < H; ++j)
        for (std::size_t n = 0; n < B; ++n)
          for (std::size_t i = 0; i < I; ++i) gw1[j * I + i] += da[n * H + j] * x[n * I + i];
      for (std::size_t n = 0; n < B; ++n)
        for (std::size_t j = 0; j < H; ++j) gb1[j] += da[n * H + j];
      update(w1.data, vw1, gw1, wd);
      update(b1, vb1, gb1, 0.0f);
      update(w2.data, vw2, gw2, wd);
      update(b2, vb2, gb2, 0.0f);
    }
  }
  REQUIRE(losses.size() == r.rows.size());
  for (std::size_t i = 0; i < losses.size(); ++i) CHECK(losses[i] == r.rows[i].train_loss);
  auto& l0 = dynamic_cast<Linear&>(r.model.layer(0));
  auto& l2 = dynamic_cast<Linear&>(r.model.layer(2));
  CHECK(l0.weight().value.data == w1.data);
  CHECK(l0.bias()->value.data == b1);
  CHECK(l2.weight().value.data == w2.data);
  CHECK(l2.bias()->value.data == b2);
}

TEST_CASE("master weights stay pure: w_q is Q_w of the master copy") {
  TrainConfig cfg = parse_train_config(kSmallCnn);
  const Dataset d = random_images(32, 14);
  TrainResult r = train_loop(cfg, d, PrecisionMode::Dfp16);
  for (std::size_t i = 0; i < r.model.size(); ++i)
    if (auto* c = dynamic_cast<Conv2d*>(&r.model.layer(i)); c && c->precision().is_dfp())
      CHECK(c->quantized_weight() == quantize(c->weight().value, c->precision().weight));
}

TEST_CASE("training is deterministic across runs and thread counts") {
  TrainConfig cfg = parse_train_config(kSmallCnn);
  cfg.quant.error_rounding = "stochastic";
  cfg.kernel.shadow_check = true;
  const Dataset d = random_images(32, 15);
  set_num_threads(1);
  const TrainResult a = train_loop(cfg, d, PrecisionMode::Dfp16);
  const TrainResult b = train_loop(cfg, d, PrecisionMode::Dfp16);
  set_num_threads(3);
  const TrainResult c = train_loop(cfg, d, PrecisionMode::Dfp16);
  set_num_threads(1);
  check_rows_equal(a.rows, b.rows);
  check_rows_equal(a.rows, c.rows);
  CHECK(a.rows.size() == 8);
  CHECK(a.rows[2].val_acc.has_value());   // eval_every 3
  CHECK_FALSE(a.rows[0].val_acc.has_value());
  CHECK(a.rows[3].val_acc.has_value());   // end of epoch 0
}

TEST_CASE("divergence aborts with a dump of the offending layer") {
  TrainConfig cfg = parse_train_config(kSmallCnn);
  cfg.solver.base_lr = 1e30;
  cfg.solver.momentum = 0.0;
  const Dataset d = random_images(32, 16);
  const auto dir = std::filesystem::temp_directory_path() / "dfp_test_divergence";
  std::filesystem::remove_all(dir);
  TrainOptions opts;
  opts.dump_dir = dir;
  try {
    train_loop(cfg, d, PrecisionMode::Fp32, opts);
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(std::string(e.what()).find("layer " + std::to_string(e.layer())) != std::string::npos);
    CHECK(e.iteration() >= 2);
    const std::string stem = "layer" + std::to_string(e.layer()) + "_" + cfg.layers[e.layer()].type + "_";
    CHECK(std::filesystem::exists(dir / (stem + "input.dft")));
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("checkpoint round trip, and zero epochs store the initialization") {
  TrainConfig cfg = parse_train_config(kSmallCnn);
  cfg.epochs = 0;
  const Dataset d = random_images(32, 17);
  TrainResult r = train_loop(cfg, d, PrecisionMode::Dfp16);
  CHECK(r.rows.empty());
  const auto dir = std::filesystem::temp_directory_path() / "dfp_test_ckpt";
  std::filesystem::remove_all(dir);
  save_checkpoint(dir, r.model, cfg, PrecisionMode::Dfp16, r.iterations);
  const Checkpoint ck = load_checkpoint(dir);
  Model init = build_model(cfg, PrecisionMode::Dfp16);
  std::size_t matched = 0;
  for (const auto& [name, t] : ck.tensors) {
    const std::size_t layer = std::stoul(name.substr(5, name.find('_') - 5));
    const std::string pname = name.substr(name.find('_') + 1);
    for (Param* p : init.layer(layer).params())
      if (p->name == pname) {
        CHECK(std::get<FloatTensor>(t).data == p->value.data);
        ++matched;
      }
    if (pname == "weight_q") {
      CHECK(std::get<DfpTensor>(t) == dynamic_cast<Conv2d&>(init.layer(layer)).quantized_weight());
      ++matched;
    }
  }
  CHECK(matched == 12);  // 3 conv + 1 linear (weight, bias), 2 BN params, 2 DFP conv Q_w
  CHECK(ck.manifest.find("\"precision\": \"dfp16\"") != std::string::npos);
  std::filesystem::remove_all(dir);
}

TEST_CASE("configuration parsing, defaults and round trip") {
  const TrainConfig cfg = parse_train_config(kSmallCnn);
  CHECK(cfg.layers.size() == 12);
  CHECK(cfg.layers[8].from == 5);
  const TrainConfig again = parse_train_config(to_json(cfg));
  CHECK(to_json(again) == to_json(cfg));

  CHECK(resolve_precision(cfg.layers[0], PrecisionMode::Dfp16, cfg.quant, 1).kind == LayerPrecision::Kind::Fp32);
  CHECK(resolve_precision(cfg.layers[2], PrecisionMode::Dfp16, cfg.quant, 1).is_dfp());
  CHECK_FALSE(resolve_precision(cfg.layers[11], PrecisionMode::Dfp16, cfg.quant, 1).is_dfp());
  CHECK_FALSE(resolve_precision(cfg.layers[2], PrecisionMode::Fp32, cfg.quant, 1).is_dfp());

  CHECK_THROWS_AS(parse_train_config(R"({"input_shape":[2],"layers":[{"type":"linear","out":2,"colour":1}]})"),
                  std::invalid_argument);
  CHECK_THROWS_AS(parse_train_config(R"({"input_shape":[2],"layers":[{"type":"mystery"}]})"), std::invalid_argument);
  CHECK_THROWS_AS(parse_train_config(R"({"input_shape":[2],"layers":[{"type":"add","from":0}]})"), std::invalid_argument);
  CHECK_THROWS_AS(parse_train_config("{not json"), std::invalid_argument);
  CHECK_THROWS_AS(parse_train_config(R"({"input_shape":[2],"layers":[{"type":"relu"}],"quant":{"bits":1}})"),
                  std::invalid_argument);
  CHECK_THROWS_AS(build_model(parse_train_config(R"({"input_shape":[3],"layers":[{"type":"conv","out":2}]})"), PrecisionMode::Fp32),
                  std::invalid_argument);

  SolverConfig s;
  s.base_lr = 0.1;
  s.gamma = 0.5;
  s.step_epochs = 2;
  CHECK(s.learning_rate(0) == 0.1);
  CHECK(s.learning_rate(1) == 0.1);
  CHECK(s.learning_rate(2) == 0.05);
  CHECK(s.learning_rate(5) == 0.025);
}

TEST_CASE("metrics CSV layout") {
  std::ostringstream os;
  write_metrics_header(os);
  MetricsRow row;
  row.iteration = 3;
  row.epoch = 1;
  row.train_loss = 0.25;
  row.overflow_count = 2;
  row.wall_ms = 1.5;
  write_metrics_row(os, row);
  row.val_acc = 0.75;
  row.val_loss = 0.5;
  write_metrics_row(os, row);
  CHECK(os.str() ==
        "iteration,epoch,train_loss,val_acc,overflow_count,wall_ms,val_loss\n"
        "3,1,0.25,,2,1.5,\n"
        "3,1,0.25,0.75,2,1.5,0.5\n");
}

TEST_CASE("epoch order is a permutation that changes per epoch") {
  const auto a = epoch_order(100, 1, 0), b = epoch_order(100, 1, 1);
  auto sa = a;
  std::sort(sa.begin(), sa.end());
  for (std::size_t i = 0; i < 100; ++i) CHECK(sa[i] == i);
  CHECK(a != b);
  CHECK(a == epoch_order(100, 1, 0));
}
