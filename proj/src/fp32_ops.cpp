// SPDX-FileCopyrightText: © 2026 The dfp16 Authors
//
// SPDX-License-Identifier: Apache-2.0
#include "dfp/fp32_ops.hpp"

#include <stdexcept>
#include <string>

#include "dfp/parallel.hpp"

namespace dfp::fp32 {
namespace {

std::size_t col_rows(const ConvSpec& spec) {
  return static_cast<std::size_t>(spec.in_channels) * spec.kernel_h * spec.kernel_w;
}

std::size_t col_cols(const ConvSpec& spec) { return static_cast<std::size_t>(spec.out_h()) * spec.out_w(); }

void check_conv_input(const FloatTensor& x, const ConvSpec& spec) {
  if (x.shape.size() != 4 || x.shape[1] != std::size_t(spec.in_channels) || x.shape[2] != std::size_t(spec.height) ||
      x.shape[3] != std::size_t(spec.width))
    throw std::invalid_argument("conv2d: input " + shape_to_string(x.shape) + " does not match " + spec.to_string());
}

void check_conv_weight(const FloatTensor& w, const ConvSpec& spec) {
  const Shape expect{std::size_t(spec.out_channels), std::size_t(spec.in_channels), std::size_t(spec.kernel_h),
                     std::size_t(spec.kernel_w)};
  if (w.shape != expect) throw std::invalid_argument("conv2d: weight shape " + shape_to_string(w.shape) + ", expected " +
                                                     shape_to_string(expect));
}

}  // namespace

void col2im(const float* col, const ConvSpec& spec, float* image) {
  const int oh_n = spec.out_h(), ow_n = spec.out_w();
  std::size_t row = 0;
  for (int c = 0; c < spec.in_channels; ++c)
    for (int r = 0; r < spec.kernel_h; ++r)
      for (int s = 0; s < spec.kernel_w; ++s, ++row) {
        const float* src = col + row * static_cast<std::size_t>(oh_n) * ow_n;
        float* plane = image + static_cast<std::size_t>(c) * spec.height * spec.width;
        for (int oh = 0; oh < oh_n; ++oh) {
          const int ih = oh * spec.stride + r - spec.pad;
          for (int ow = 0; ow < ow_n; ++ow, ++src) {
            const int iw = ow * spec.stride + s - spec.pad;
            if (ih >= 0 && ih < spec.height && iw >= 0 && iw < spec.width)
              plane[static_cast<std::size_t>(ih) * spec.width + iw] += *src;
          }
        }
      }
}

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    float* ci = c + i * n;
    if (!accumulate)
      for (std::size_t j = 0; j < n; ++j) ci[j] = 0.0f;
    for (std::size_t p = 0; p < k; ++p) {
      const float av = a[i * k + p];
      const float* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    float* ci = c + i * n;
    if (!accumulate)
      for (std::size_t j = 0; j < n; ++j) ci[j] = 0.0f;
    for (std::size_t p = 0; p < k; ++p) {
      const float av = a[p * m + i];
      const float* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      float acc = 0.0f;
      const float* ai = a + i * k;
      const float* bj = b + j * k;
      for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      c[i * n + j] = accumulate ? c[i * n + j] + acc : acc;
    }
}

FloatTensor conv2d_forward(const FloatTensor& x, const FloatTensor& w, const std::vector<float>& bias, const ConvSpec& spec) {
  spec.validate();
  check_conv_input(x, spec);
  check_conv_weight(w, spec);
  const std::size_t batch = x.shape[0], rows = col_rows(spec), cols = col_cols(spec);
  const std::size_t K = spec.out_channels, in_plane = std::size_t(spec.in_channels) * spec.height * spec.width;
  FloatTensor y({batch, K, std::size_t(spec.out_h()), std::size_t(spec.out_w())});
  parallel_for(batch, [&](std::size_t begin, std::size_t end, int) {
    std::vector<float> col(rows * cols);
    for (std::size_t n = begin; n < end; ++n) {
      im2col(x.data.data() + n * in_plane, spec, col.data());
      float* out = y.data.data() + n * K * cols;
      gemm_nn(K, cols, rows, w.data.data(), col.data(), out, false);
      if (!bias.empty())
        for (std::size_t k = 0; k < K; ++k)
          for (std::size_t p = 0; p < cols; ++p) out[k * cols + p] += bias[k];
    }
  });
  return y;
}

FloatTensor conv2d_backward_input(const FloatTensor& dy, const FloatTensor& w, const ConvSpec& spec, std::size_t batch) {
  spec.validate();
  check_conv_weight(w, spec);
  const std::size_t rows = col_rows(spec), cols = col_cols(spec), K = spec.out_channels;
  if (dy.size() != batch * K * cols) throw std::invalid_argument("conv2d: gradient shape " + shape_to_string(dy.shape));
  const std::size_t in_plane = std::size_t(spec.in_channels) * spec.height * spec.width;
  FloatTensor dx({batch, std::size_t(spec.in_channels), std::size_t(spec.height), std::size_t(spec.width)});
  parallel_for(batch, [&](std::size_t begin, std::size_t end, int) {
    std::vector<float> col(rows * cols);
    for (std::size_t n = begin; n < end; ++n) {
      gemm_tn(rows, cols, K, w.data.data(), dy.data.data() + n * K * cols, col.data(), false);
      col2im(col.data(), spec, dx.data.data() + n * in_plane);
    }
  });
  return dx;
}

FloatTensor conv2d_backward_weight(const FloatTensor& dy, const FloatTensor& x, const ConvSpec& spec) {
  spec.validate();
  check_conv_input(x, spec);
  const std::size_t batch = x.shape[0], rows = col_rows(spec), cols = col_cols(spec), K = spec.out_channels;
  if (dy.size() != batch * K * cols) throw std::invalid_argument("conv2d: gradient shape " + shape_to_string(dy.shape));
  const std::size_t in_plane = std::size_t(spec.in_channels) * spec.height * spec.width;
  FloatTensor dw({K, std::size_t(spec.in_channels), std::size_t(spec.kernel_h), std::size_t(spec.kernel_w)});
  std::vector<float> col(rows * cols);
  for (std::size_t n = 0; n < batch; ++n) {
    im2col(x.data.data() + n * in_plane, spec, col.data());
    gemm_nt(K, rows, cols, dy.data.data() + n * K * cols, col.data(), dw.data.data(), n > 0);
  }
  return dw;
}

FloatTensor linear_forward(const FloatTensor& x, const FloatTensor& w, const std::vector<float>& bias) {
  if (x.shape.size() != 2 || w.shape.size() != 2 || x.shape[1] != w.shape[1])
    throw std::invalid_argument("linear: input " + shape_to_string(x.shape) + " vs weight " + shape_to_string(w.shape));
  const std::size_t N = x.shape[0], O = w.shape[0], I = w.shape[1];
  FloatTensor y({N, O});
  gemm_nt(N, O, I, x.data.data(), w.data.data(), y.data.data(), false);
  if (!bias.empty())
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t o = 0; o < O; ++o) y.data[n * O + o] += bias[o];
  return y;
}

FloatTensor linear_backward_input(const FloatTensor& dy, const FloatTensor& w) {
  const std::size_t N = dy.shape[0], O = w.shape[0], I = w.shape[1];
  if (dy.shape.size() != 2 || dy.shape[1] != O) throw std::invalid_argument("linear: gradient shape " + shape_to_string(dy.shape));
  FloatTensor dx({N, I});
  gemm_nn(N, I, O, dy.data.data(), w.data.data(), dx.data.data(), false);
  return dx;
}

FloatTensor linear_backward_weight(const FloatTensor& dy, const FloatTensor& x) {
  const std::size_t N = x.shape[0], O = dy.shape[1], I = x.shape[1];
  FloatTensor dw({O, I});
  gemm_tn(O, I, N, dy.data.data(), x.data.data(), dw.data.data(), false);
  return dw;
}

std::vector<float> channel_sum(const FloatTensor& dy) {
  if (dy.shape.size() < 2) throw std::invalid_argument("channel_sum: rank < 2");
  const std::size_t N = dy.shape[0], C = dy.shape[1], inner = dy.size() / (N * C);
  std::vector<float> out(C, 0.0f);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const float* p = dy.data.data() + (n * C + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) out[c] += p[i];
    }
  return out;
}

}  // namespace dfp::fp32
