// SPDX-FileCopyrightText: © 2026 The dfp16 Authors
//
// SPDX-License-Identifier: Apache-2.0
#include "dfp/kernels.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "dfp/parallel.hpp"

namespace dfp {
namespace {

constexpr int kTileSize = 8 * kSimdWidth * 2;  // one [8][16][2] weight tile
constexpr int kHalfTile = kTileSize / 2;       // the 4 x 32 operand of one call

int round_up(int v, int m) { return (v + m - 1) / m * m; }

}  // namespace

void vnni_madd(std::span<const int16_t, kProductsPerLane> mem, const VnniWeights& w, VnniLanes& vout) {
  vnni_madd_raw(mem.data(), w[0].data(), vout.data());
}

void vnni_madd_raw(const int16_t* mem, const int16_t* w, int32_t* vout) {
  for (int v = 0; v < kVnniSteps; ++v) {
    const int32_t m0 = mem[2 * v];
    const int32_t m1 = mem[2 * v + 1];
    const int16_t* wv = w + v * 2 * kSimdWidth;
    for (int o = 0; o < kSimdWidth; ++o) {
      const auto p0 = static_cast<uint32_t>(wv[2 * o] * m0);
      const auto p1 = static_cast<uint32_t>(wv[2 * o + 1] * m1);
      vout[o] = static_cast<int32_t>(static_cast<uint32_t>(vout[o]) + p0 + p1);
    }
  }
}

void vnni_madd_checked(const int16_t* mem, const int16_t* w, int32_t* vout, int64_t* shadow, uint8_t* excursion) {
  for (int v = 0; v < kVnniSteps; ++v) {
    const int32_t m0 = mem[2 * v];
    const int32_t m1 = mem[2 * v + 1];
    const int16_t* wv = w + v * 2 * kSimdWidth;
    for (int o = 0; o < kSimdWidth; ++o) {
      const int32_t p0 = wv[2 * o] * m0;
      const int32_t p1 = wv[2 * o + 1] * m1;
      shadow[o] += p0;
      bool out = !fits_int32(shadow[o]);
      shadow[o] += p1;
      out = out || !fits_int32(shadow[o]);
      excursion[o] = static_cast<uint8_t>(excursion[o] | (out ? 1 : 0));
      vout[o] = wrapping_add(wrapping_add(vout[o], p0), p1);
    }
  }
}

void ConvSpec::validate() const {
  if (in_channels < 1 || out_channels < 1 || height < 1 || width < 1 || kernel_h < 1 || kernel_w < 1 ||
      stride < 1 || pad < 0) {
    throw std::invalid_argument("ConvSpec: dimensions must be positive: " + to_string());
  }
  if (height + 2 * pad < kernel_h || width + 2 * pad < kernel_w) {
    throw std::invalid_argument("ConvSpec: kernel larger than padded input: " + to_string());
  }
}

std::string ConvSpec::to_string() const {
  return std::to_string(in_channels) + "," + std::to_string(out_channels) + "," + std::to_string(height) + "," +
         std::to_string(width) + "," + std::to_string(kernel_h) + "," + std::to_string(kernel_w) + "," +
         std::to_string(stride) + "," + std::to_string(pad);
}

ConvSpec ConvSpec::parse(std::string_view text) {
  std::array<int, 8> v{};
  std::size_t field = 0;
  const char* p = text.data();
  const char* end = text.data() + text.size();
  while (field < v.size()) {
    auto [next, ec] = std::from_chars(p, end, v[field]);
    if (ec != std::errc()) break;
    ++field;
    p = next;
    if (p == end) break;
    if (*p != ',') break;
    ++p;
  }
  if (field != v.size() || p != end) {
    throw std::invalid_argument("conv spec must be C,K,H,W,KH,KW,S,pad; got '" + std::string(text) + "'");
  }
  ConvSpec s{v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7]};
  s.validate();
  return s;
}

void BlockingParams::validate() const {
  if (icblk < kProductsPerLane || icblk % kProductsPerLane != 0) {
    throw std::invalid_argument("BlockingParams: icblk " + std::to_string(icblk) + " must be a positive multiple of 8");
  }
  if (rb_size < 1) throw std::invalid_argument("BlockingParams: rb_size must be >= 1");
}

int64_t BlockingParams::chain_length(const ConvSpec& spec) const {
  const int effective = std::min(icblk, round_up(spec.in_channels, kSimdWidth));
  return int64_t{effective} * spec.kernel_h * spec.kernel_w;
}

KernelStats& KernelStats::operator+=(const KernelStats& o) {
  fma_count += o.fma_count;
  convert_count += o.convert_count;
  spill_count += o.spill_count;
  overflow_count += o.overflow_count;
  return *this;
}

Ratio Ratio::make(int64_t num, int64_t den) {
  if (den == 0) throw std::invalid_argument("Ratio: zero denominator");
  const int64_t g = std::gcd(num, den);
  Ratio r{num / g, den / g};
  if (r.den < 0) {
    r.num = -r.num;
    r.den = -r.den;
  }
  return r;
}

std::string Ratio::to_string() const { return std::to_string(num) + "/" + std::to_string(den); }

Ratio overhead_ratio(const ConvSpec& spec, const BlockingParams& blk) {
  spec.validate();
  blk.validate();
  const int padded = round_up(spec.in_channels, kSimdWidth);
  const int groups = padded / kProductsPerLane;
  const int per_block = std::min(blk.icblk, padded) / kProductsPerLane;
  const int blocks = (groups + per_block - 1) / per_block;
  // Per output vector: one convert per chain block, one call per channel group and tap.
  return Ratio::make(blocks, int64_t{groups} * spec.kernel_h * spec.kernel_w);
}

Ratio overhead_ratio_formula(int icblk, int kernel_h, int kernel_w, int rb_size) {
  // RB / ((ICBLK/16) * KH * KW * 2 * RB), scaled by 16 to stay integral.
  return Ratio::make(int64_t{rb_size} * 16, int64_t{icblk} * kernel_h * kernel_w * 2 * rb_size);
}

Ratio measured_overhead(const KernelStats& stats) {
  return Ratio::make(static_cast<int64_t>(stats.convert_count), static_cast<int64_t>(stats.fma_count));
}

BlockingParams default_blocking(const ConvSpec& spec, const OverflowPolicy& policy) {
  spec.validate();
  const int taps = spec.kernel_h * spec.kernel_w;
  int icblk = kSimdWidth * std::max(1, 256 / (kSimdWidth * taps));
  if (icblk * taps < 200) icblk = kSimdWidth * ((200 + kSimdWidth * taps - 1) / (kSimdWidth * taps));
  icblk = std::min(icblk, round_up(spec.in_channels, kSimdWidth));
  if (int64_t{icblk} * taps > policy.chain) {
    icblk = static_cast<int>(policy.chain / (int64_t{kProductsPerLane} * taps)) * kProductsPerLane;
    if (icblk == 0) {
      std::string msg = "no feasible blocking: one QVNNI16 group with " + std::to_string(taps) + " taps needs a chain of " +
                        std::to_string(kProductsPerLane * taps) + " but the policy allows " + std::to_string(policy.chain);
      if (policy.is_strict()) {
        msg += " (safe_chain_length(" + std::to_string(policy.bit_width) + ", " + std::to_string(policy.pre_shift) +
               ") = " + std::to_string(safe_chain_length(policy.bit_width, policy.pre_shift)) + ")";
      }
      throw std::invalid_argument(msg);
    }
  }
  BlockingParams blk;
  blk.icblk = icblk;
  blk.rb_size = std::min(4, spec.out_w());
  return blk;
}

std::size_t PackedWeights::index(int k, int c, int r, int s) const {
  const int kb = padded_out / kSimdWidth;
  const std::size_t tile = (((static_cast<std::size_t>(c / kSimdWidth) * kb + k / kSimdWidth) * kernel_h + r) * kernel_w + s);
  return tile * kTileSize + static_cast<std::size_t>((c % kSimdWidth) / 2) * (kSimdWidth * 2) +
         static_cast<std::size_t>(k % kSimdWidth) * 2 + static_cast<std::size_t>(c % 2);
}

const int16_t* PackedWeights::tile(int icb, int ocb, int r, int s) const {
  const int kb = padded_out / kSimdWidth;
  const std::size_t t = ((static_cast<std::size_t>(icb) * kb + ocb) * kernel_h + r) * kernel_w + s;
  return data.data() + t * kTileSize;
}

PackedWeights pack_weights(const DfpTensor& w) {
  w.validate();
  if (w.shape.size() != 4) throw std::invalid_argument("pack_weights: expected (K, C, KH, KW), got " + shape_to_string(w.shape));
  PackedWeights p;
  p.exponent = w.exponent;
  p.bit_width = w.bit_width;
  p.out_channels = static_cast<int>(w.shape[0]);
  p.in_channels = static_cast<int>(w.shape[1]);
  p.kernel_h = static_cast<int>(w.shape[2]);
  p.kernel_w = static_cast<int>(w.shape[3]);
  p.padded_out = round_up(p.out_channels, kSimdWidth);
  p.padded_in = round_up(p.in_channels, kSimdWidth);
  p.data.assign(static_cast<std::size_t>(p.padded_out) * p.padded_in * p.kernel_h * p.kernel_w, 0);
  std::size_t src = 0;
  for (int k = 0; k < p.out_channels; ++k)
    for (int c = 0; c < p.in_channels; ++c)
      for (int r = 0; r < p.kernel_h; ++r)
        for (int s = 0; s < p.kernel_w; ++s) p.data[p.index(k, c, r, s)] = w.elements[src++];
  return p;
}

DfpTensor unpack_weights(const PackedWeights& p) {
  DfpTensor w;
  w.shape = {static_cast<std::size_t>(p.out_channels), static_cast<std::size_t>(p.in_channels),
             static_cast<std::size_t>(p.kernel_h), static_cast<std::size_t>(p.kernel_w)};
  w.exponent = p.exponent;
  w.bit_width = p.bit_width;
  w.elements.reserve(shape_size(w.shape));
  for (int k = 0; k < p.out_channels; ++k)
    for (int c = 0; c < p.in_channels; ++c)
      for (int r = 0; r < p.kernel_h; ++r)
        for (int s = 0; s < p.kernel_w; ++s) w.elements.push_back(p.data[p.index(k, c, r, s)]);
  return w;
}

KernelResult conv_fprop(const DfpTensor& input, const PackedWeights& weights, const ConvSpec& spec,
                        const BlockingParams& blk, const OverflowPolicy& policy, const KernelOptions& opts) {
  spec.validate();
  blk.validate();
  input.validate();
  if (input.shape.size() != 4 || input.shape[1] != static_cast<std::size_t>(spec.in_channels) ||
      input.shape[2] != static_cast<std::size_t>(spec.height) || input.shape[3] != static_cast<std::size_t>(spec.width)) {
    throw std::invalid_argument("conv_fprop: input shape " + shape_to_string(input.shape) + " does not match spec " +
                                spec.to_string());
  }
  if (weights.in_channels != spec.in_channels || weights.out_channels != spec.out_channels ||
      weights.kernel_h != spec.kernel_h || weights.kernel_w != spec.kernel_w) {
    throw std::invalid_argument("conv_fprop: packed weights do not match spec " + spec.to_string());
  }

  const int64_t chain = blk.chain_length(spec);
  if (chain > policy.chain) {
    std::string msg = "conv_fprop: chain of " + std::to_string(chain) + " products exceeds " + policy.describe();
    if (policy.is_strict()) {
      msg += "; safe_chain_length(" + std::to_string(policy.bit_width) + ", " + std::to_string(policy.pre_shift) +
             ") = " + std::to_string(safe_chain_length(policy.bit_width, policy.pre_shift));
    }
    throw std::invalid_argument(msg);
  }
  if (policy.is_strict()) {
    const int32_t bound = (int32_t{1} << (policy.bit_width - 1 - policy.pre_shift)) - 1;
    int32_t wmax = 0;
    for (int16_t v : weights.data) wmax = std::max(wmax, std::abs(static_cast<int32_t>(v)));
    if (input.max_abs() > bound || wmax > bound) {
      throw std::invalid_argument("conv_fprop: operands exceed the " + std::to_string(policy.bit_width - policy.pre_shift) +
                                  "-bit range the strict policy was validated for");
    }
  }
  const float scale = spill_scale(input.exponent + weights.exponent);

  const int n_batch = static_cast<int>(input.shape[0]);
  const int C = spec.in_channels;
  const int K = spec.out_channels;
  const int KH = spec.kernel_h;
  const int KW = spec.kernel_w;
  const int S = spec.stride;
  const int OH = spec.out_h();
  const int OW = spec.out_w();
  const int Hp = spec.height + 2 * spec.pad;
  const int Wp = spec.width + 2 * spec.pad;
  const int cb = weights.padded_in / kSimdWidth;
  const int kb = weights.padded_out / kSimdWidth;
  const int groups = weights.padded_in / kProductsPerLane;
  const int per_block = std::min(blk.icblk, weights.padded_in) / kProductsPerLane;
  const int n_chains = (groups + per_block - 1) / per_block;
  const int rb = blk.rb_size;

  // Activations blocked as [N][C/16][Hp][Wp][16], zero padded in channels and space.
  std::vector<int16_t> act(static_cast<std::size_t>(n_batch) * cb * Hp * Wp * kSimdWidth, 0);
  auto act_at = [&](int n, int icb, int h, int w) {
    return ((static_cast<std::size_t>(n) * cb + icb) * Hp + h) * Wp * kSimdWidth + static_cast<std::size_t>(w) * kSimdWidth;
  };
  for (int n = 0; n < n_batch; ++n)
    for (int c = 0; c < C; ++c)
      for (int h = 0; h < spec.height; ++h)
        for (int w = 0; w < spec.width; ++w) {
          act[act_at(n, c / kSimdWidth, h + spec.pad, w + spec.pad) + c % kSimdWidth] =
              input.elements[((static_cast<std::size_t>(n) * C + c) * spec.height + h) * spec.width + w];
        }

  KernelResult result;
  result.output = FloatTensor({static_cast<std::size_t>(n_batch), static_cast<std::size_t>(K),
                               static_cast<std::size_t>(OH), static_cast<std::size_t>(OW)});
  result.chains_per_output = n_chains;
  if (opts.record_partials) result.partials.assign(result.output.size() * n_chains, 0);

  const bool checked = policy.shadow_check;
  const std::size_t tasks = static_cast<std::size_t>(n_batch) * kb * OH;
  std::vector<KernelStats> worker_stats(static_cast<std::size_t>(num_threads()));

  parallel_for(tasks, [&](std::size_t begin, std::size_t end, int worker) {
    KernelStats st;
    std::vector<int32_t> lanes(static_cast<std::size_t>(rb) * kSimdWidth);
    std::vector<int64_t> shadow(lanes.size());
    std::vector<uint8_t> excursion(lanes.size());
    for (std::size_t t = begin; t < end; ++t) {
      const int n = static_cast<int>(t / (static_cast<std::size_t>(kb) * OH));
      const int ocb = static_cast<int>((t / OH) % kb);
      const int oh = static_cast<int>(t % OH);
      for (int ow0 = 0; ow0 < OW; ow0 += rb) {
        const int rbn = std::min(rb, OW - ow0);
        for (int chain_idx = 0; chain_idx < n_chains; ++chain_idx) {
          const int g0 = chain_idx * per_block;
          const int g1 = std::min(groups, g0 + per_block);
          std::fill(lanes.begin(), lanes.end(), 0);
          if (checked) {
            std::fill(shadow.begin(), shadow.end(), 0);
            std::fill(excursion.begin(), excursion.end(), 0);
          }
          for (int icb = g0 / 2; 2 * icb < g1; ++icb) {
            for (int kh = 0; kh < KH; ++kh) {
              const int ih = S * oh + kh;
              for (int kw = 0; kw < KW; ++kw) {
                const int16_t* tile = weights.tile(icb, ocb, kh, kw);
                for (int ib = 0; ib < 2; ++ib) {
                  const int g = 2 * icb + ib;
                  if (g < g0 || g >= g1) continue;
                  const int16_t* wptr = tile + ib * kHalfTile;
                  for (int r = 0; r < rbn; ++r) {
                    const int iw = S * (ow0 + r) + kw;
                    const int16_t* mem = act.data() + act_at(n, icb, ih, iw) + ib * kProductsPerLane;
                    int32_t* vout = lanes.data() + r * kSimdWidth;
                    if (checked) {
                      vnni_madd_checked(mem, wptr, vout, shadow.data() + r * kSimdWidth,
                                        excursion.data() + r * kSimdWidth);
                    } else {
                      vnni_madd_raw(mem, wptr, vout);
                    }
                  }
                  st.fma_count += static_cast<uint64_t>(rbn);
                }
              }
            }
          }
          // Spill: convert each register block to FP32 and accumulate with the shared scale.
          st.spill_count += 1;
          for (int r = 0; r < rbn; ++r) {
            st.convert_count += 1;
            const int ow = ow0 + r;
            for (int o = 0; o < kSimdWidth; ++o) {
              const int k = ocb * kSimdWidth + o;
              if (k >= K) break;
              const std::size_t idx = ((static_cast<std::size_t>(n) * K + k) * OH + oh) * OW + ow;
              const int32_t v = lanes[static_cast<std::size_t>(r) * kSimdWidth + o];
              if (checked && excursion[static_cast<std::size_t>(r) * kSimdWidth + o]) st.overflow_count += 1;
              result.output.data[idx] = std::fma(static_cast<float>(v), scale, result.output.data[idx]);
              if (opts.record_partials) result.partials[idx * n_chains + chain_idx] = v;
            }
          }
        }
      }
    }
    worker_stats[static_cast<std::size_t>(worker)] += st;
  });

  for (const auto& s : worker_stats) result.stats += s;
  return result;
}

KernelResult gemm_dfp(const DfpTensor& a, const DfpTensor& b, const BlockingParams& blk, const OverflowPolicy& policy,
                      const KernelOptions& opts) {
  if (a.shape.size() != 2 || b.shape.size() != 2) throw std::invalid_argument("gemm_dfp: operands must be matrices");
  if (a.shape[1] != b.shape[0]) {
    throw std::invalid_argument("gemm_dfp: inner dimensions differ: " + shape_to_string(a.shape) + " x " +
                                shape_to_string(b.shape));
  }
  const std::size_t M = a.shape[0];
  const std::size_t KK = a.shape[1];
  const std::size_t N = b.shape[1];

  DfpTensor w = a;
  w.shape = {M, KK, 1, 1};
  DfpTensor x = b;
  x.shape = {1, KK, 1, N};
  const ConvSpec spec{static_cast<int>(KK), static_cast<int>(M), 1, static_cast<int>(N), 1, 1, 1, 0};

  KernelResult r = conv_fprop(x, pack_weights(w), spec, blk, policy, opts);
  r.output.shape = {M, N};
  return r;
}

}  // namespace dfp
