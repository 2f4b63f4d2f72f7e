// SPDX-FileCopyrightText: © 2026 The dfp16 Authors
//
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "dfp/kernels.hpp"
#include "dfp/tensor.hpp"

// Single-precision reference operators used by FP32 layers and by the
// FP32 side of mixed-precision layers. Summation orders are fixed, so
// results do not depend on the thread count.
namespace dfp::fp32 {

/// Column matrix of one image: rows (c, r, s), columns (oh, ow).
/// Out-of-bounds taps read as zero.
template <typename T>
void im2col(const T* image, const ConvSpec& spec, T* col) {
  const int oh_n = spec.out_h(), ow_n = spec.out_w();
  std::size_t row = 0;
  for (int c = 0; c < spec.in_channels; ++c)
    for (int r = 0; r < spec.kernel_h; ++r)
      for (int s = 0; s < spec.kernel_w; ++s, ++row) {
        T* dst = col + row * static_cast<std::size_t>(oh_n) * ow_n;
        const T* plane = image + static_cast<std::size_t>(c) * spec.height * spec.width;
        for (int oh = 0; oh < oh_n; ++oh) {
          const int ih = oh * spec.stride + r - spec.pad;
          for (int ow = 0; ow < ow_n; ++ow) {
            const int iw = ow * spec.stride + s - spec.pad;
            const bool inside = ih >= 0 && ih < spec.height && iw >= 0 && iw < spec.width;
            *dst++ = inside ? plane[static_cast<std::size_t>(ih) * spec.width + iw] : T{};
          }
        }
      }
}

/// Adjoint of im2col: accumulates columns back into an image.
void col2im(const float* col, const ConvSpec& spec, float* image);

/// C[m][n] (+)= sum_k A[m][k] * B[k][n], row-major, k ascending.
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c, bool accumulate);
/// C[m][n] (+)= sum_k A[k][m] * B[k][n].
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c, bool accumulate);
/// C[m][n] (+)= sum_k A[m][k] * B[n][k].
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c, bool accumulate);

/// x: (N, C, H, W), w: (K, C, KH, KW) -> (N, K, OH, OW). Bias may be empty.
FloatTensor conv2d_forward(const FloatTensor& x, const FloatTensor& w, const std::vector<float>& bias, const ConvSpec& spec);
FloatTensor conv2d_backward_input(const FloatTensor& dy, const FloatTensor& w, const ConvSpec& spec, std::size_t batch);
FloatTensor conv2d_backward_weight(const FloatTensor& dy, const FloatTensor& x, const ConvSpec& spec);

/// x: (N, I), w: (O, I) -> (N, O).
FloatTensor linear_forward(const FloatTensor& x, const FloatTensor& w, const std::vector<float>& bias);
FloatTensor linear_backward_input(const FloatTensor& dy, const FloatTensor& w);
FloatTensor linear_backward_weight(const FloatTensor& dy, const FloatTensor& x);

/// Sum of dy over every axis but axis 1.
std::vector<float> channel_sum(const FloatTensor& dy);

}  // namespace dfp::fp32
