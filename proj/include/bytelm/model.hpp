#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "bytelm/config.hpp"
#include "bytelm/corpus.hpp"
#include "bytelm/error.hpp"
#include "bytelm/kernels.hpp"
#include "bytelm/parameters.hpp"
#include "bytelm/random.hpp"

namespace bytelm {

// Pre-norm causal transformer decoder over bytes:
//
//   h = byte_embedding[x] * embed_projection + position_embedding
//   per layer:  h += dropT(attn(norm1(h)))       one mask bit per timestep
//               h += W2 dropF(relu(W1 norm2(h)))  one mask bit per feature
//   logits = final_norm(h) * output_head
//
// Row i of every intermediate depends only on input bytes 0..i, and the
// kernels compute it the same way regardless of sequence length, so eval
// outputs for a shared prefix are bit-identical.

enum class Mode { train, eval };

inline constexpr double kLayerNormEpsilon = 1e-5;

/// Per-element multipliers for inverted dropout: 0 with probability `rate`,
/// otherwise 1 / (1 - rate).
template <class T>
std::vector<T> dropout_scales(std::mt19937_64& rng, std::size_t count, double rate) {
  std::vector<T> scales(count);
  const T keep = static_cast<T>(1.0 / (1.0 - rate));
  for (auto& s : scales) s = uniform01(rng) < rate ? T(0) : keep;
  return scales;
}

template <class T>
struct NextByteDistribution {
  std::array<double, kVocabSize> probs{};
};

/// Residual stream after the feed-forward sublayer of one layer.
template <class T>
struct ActivationTrace {
  std::size_t layer_index = 0;  // 1-based
  Matrix<T> vectors;            // [sequence_len x hidden_size]
};

namespace detail {

template <class T>
struct NormCache {
  Matrix<T> xhat;
  std::vector<T> rstd;
};

template <class T>
void layer_norm_forward(const Matrix<T>& x, const T* gain, const T* bias, Matrix<T>& y,
                        NormCache<T>* cache) {
  const std::size_t n = x.rows, h = x.cols;
  y.reshape(n, h);
  if (cache) {
    cache->xhat.reshape(n, h);
    cache->rstd.assign(n, T(0));
  }
  for (std::size_t i = 0; i < n; ++i) {
    const T* xr = x.row_ptr(i);
    T mean = 0;
    for (std::size_t j = 0; j < h; ++j) mean += xr[j];
    mean /= static_cast<T>(h);
    T var = 0;
    for (std::size_t j = 0; j < h; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<T>(h);
    const T rstd = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEpsilon));
    T* yr = y.row_ptr(i);
    for (std::size_t j = 0; j < h; ++j) {
      const T xhat = (xr[j] - mean) * rstd;
      if (cache) cache->xhat(i, j) = xhat;
      yr[j] = gain[j] * xhat + bias[j];
    }
    if (cache) cache->rstd[i] = rstd;
  }
}

// Adds the input gradient into dx.
template <class T>
void layer_norm_backward(const Matrix<T>& dy, const T* gain, const NormCache<T>& cache,
                         Matrix<T>& dx, T* dgain, T* dbias) {
  const std::size_t n = dy.rows, h = dy.cols;
  std::vector<T> dxhat(h);
  for (std::size_t i = 0; i < n; ++i) {
    const T* dyr = dy.row_ptr(i);
    const T* xh = cache.xhat.row_ptr(i);
    T m1 = 0, m2 = 0;
    for (std::size_t j = 0; j < h; ++j) {
      dxhat[j] = dyr[j] * gain[j];
      dgain[j] += dyr[j] * xh[j];
      dbias[j] += dyr[j];
      m1 += dxhat[j];
      m2 += dxhat[j] * xh[j];
    }
    m1 /= static_cast<T>(h);
    m2 /= static_cast<T>(h);
    T* dxr = dx.row_ptr(i);
    const T rstd = cache.rstd[i];
    for (std::size_t j = 0; j < h; ++j) dxr[j] += rstd * (dxhat[j] - m1 - xh[j] * m2);
  }
}

template <class T>
struct LayerCache {
  NormCache<T> attn_norm;
  Matrix<T> attn_in;
  Matrix<T> q, k, v;
  std::vector<T> probs;  // [batch x heads x seq x seq], upper triangle zero
  Matrix<T> context;
  std::vector<T> time_scale;  // [batch x seq]; empty in eval mode
  NormCache<T> ffn_norm;
  Matrix<T> ffn_in;
  Matrix<T> pre_relu;
  Matrix<T> hidden;  // relu output after feature dropout
  std::vector<T> feature_scale;  // [batch x filter]; empty in eval mode
};

template <class T>
struct ForwardCache {
  std::size_t batch = 0;
  std::size_t seq = 0;
  ByteSequence tokens;
  Matrix<T> embedded;  // [rows x embed_dim]
  std::vector<LayerCache<T>> layers;
  NormCache<T> final_norm;
  Matrix<T> final_out;
};

// Attention kernels. For float and double the per-row work runs on 64-byte
// vectors over zero-padded, packed copies of K and V; other types take the
// scalar path. Either way row i reads only rows 0..i and its arithmetic is
// fixed by i alone, so a row's result never depends on the sequence length.

template <class T>
inline constexpr bool kVectorAttention = sizeof(T) == 4 || sizeof(T) == 8;

template <class T>
inline constexpr std::size_t kLanes = kVectorAttention<T> ? 64 / sizeof(T) : 1;

inline std::size_t round_up(std::size_t n, std::size_t m) { return (n + m - 1) / m * m; }

// e^x lane-wise for x <= 0 (or -inf). Float uses a Cody-Waite reduction and
// a degree-6 polynomial (relative error near 2e-7); double defers to
// std::exp per lane.
template <class T, class V>
[[gnu::always_inline]] inline V exp_nonpositive(V x) {
  if constexpr (sizeof(T) == 4) {
    typedef std::int32_t VI __attribute__((vector_size(64)));
    const auto underflow = x < -87.0f;
    const V fx = x * 1.44269504088896341f + 0.5f;
    VI n = __builtin_convertvector(fx, VI);
    n -= (__builtin_convertvector(n, V) > fx) ? VI{} + 1 : VI{};
    const V nf = __builtin_convertvector(n, V);
    const V r = x - nf * 0.693359375f + nf * 2.12194440e-4f;
    V y = r * 1.9875691500e-4f + 1.3981999507e-3f;
    y = y * r + 8.3334519073e-3f;
    y = y * r + 4.1665795894e-2f;
    y = y * r + 1.6666665459e-1f;
    y = y * r + 5.0000001201e-1f;
    y = y * r * r + r + 1.0f;
    const VI bits = (n + 127) << 23;
    V scale;
    std::memcpy(&scale, &bits, sizeof(V));
    return underflow ? V{} : y * scale;
  } else {
    for (std::size_t l = 0; l < sizeof(V) / sizeof(T); ++l) x[l] = std::exp(x[l]);
    return x;
  }
}

// out[j] = sum_e a[e] * bt[e * ldb + j] for the first `n` j, ascending e;
// bt must be readable up to round_up(n, lanes).
template <class T>
[[gnu::always_inline]] inline void row_times_packed(const T* a, std::size_t d, const T* bt,
                                                    std::size_t ldb, std::size_t n, T* out) {
  constexpr std::size_t W = kLanes<T>;
  typedef T V __attribute__((vector_size(64)));
  typedef T VU __attribute__((vector_size(64), aligned(alignof(T)), may_alias));
  const std::size_t chunks = (n + W - 1) / W;
  std::size_t c = 0;
  for (; c + 4 <= chunks; c += 4) {
    V acc0{}, acc1{}, acc2{}, acc3{};
    for (std::size_t e = 0; e < d; ++e) {
      const T ae = a[e];
      const T* row = bt + e * ldb + c * W;
      acc0 += ae * *reinterpret_cast<const VU*>(row);
      acc1 += ae * *reinterpret_cast<const VU*>(row + W);
      acc2 += ae * *reinterpret_cast<const VU*>(row + 2 * W);
      acc3 += ae * *reinterpret_cast<const VU*>(row + 3 * W);
    }
    *reinterpret_cast<VU*>(out + c * W) = acc0;
    *reinterpret_cast<VU*>(out + (c + 1) * W) = acc1;
    *reinterpret_cast<VU*>(out + (c + 2) * W) = acc2;
    *reinterpret_cast<VU*>(out + (c + 3) * W) = acc3;
  }
  for (; c < chunks; ++c) {
    V acc{};
    for (std::size_t e = 0; e < d; ++e) acc += a[e] * *reinterpret_cast<const VU*>(bt + e * ldb + c * W);
    *reinterpret_cast<VU*>(out + c * W) = acc;
  }
}

// out[0..dp) = sum_{j<n} w[j] * rows[j * dp ..], four interleaved partial
// sums over j combined as (s0 + s1) + (s2 + s3); dp is a multiple of lanes.
template <class T>
[[gnu::always_inline]] inline void weighted_row_sum(const T* w, std::size_t n, const T* rows,
                                                    std::size_t dp, T* out) {
  constexpr std::size_t W = kLanes<T>;
  typedef T V __attribute__((vector_size(64)));
  typedef T VU __attribute__((vector_size(64), aligned(alignof(T)), may_alias));
  for (std::size_t e0 = 0; e0 < dp; e0 += W) {
    V s0{}, s1{}, s2{}, s3{};
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) {
      s0 += w[j] * *reinterpret_cast<const VU*>(rows + j * dp + e0);
      s1 += w[j + 1] * *reinterpret_cast<const VU*>(rows + (j + 1) * dp + e0);
      s2 += w[j + 2] * *reinterpret_cast<const VU*>(rows + (j + 2) * dp + e0);
      s3 += w[j + 3] * *reinterpret_cast<const VU*>(rows + (j + 3) * dp + e0);
    }
    if (j < n) s0 += w[j] * *reinterpret_cast<const VU*>(rows + j * dp + e0);
    if (j + 1 < n) s1 += w[j + 1] * *reinterpret_cast<const VU*>(rows + (j + 1) * dp + e0);
    if (j + 2 < n) s2 += w[j + 2] * *reinterpret_cast<const VU*>(rows + (j + 2) * dp + e0);
    *reinterpret_cast<VU*>(out + e0) = (s0 + s1) + (s2 + s3);
  }
}

// Per-head packed operands, reused across calls on the same thread.
template <class T>
struct AttentionScratch {
  std::vector<T> kt, vt;  // [d x seqp]
  std::vector<T> kp, vp, qp, dkp, dvp;  // [seq x dp]
  std::vector<T> row, drow, out;
};

template <class T>
AttentionScratch<T>& attention_scratch() {
  thread_local AttentionScratch<T> s;
  return s;
}

// Copies head `hd` of sequence b of m into packed [seq x dp] rows, zero-padded.
template <class T>
void pack_rows(const Matrix<T>& m, std::size_t b, std::size_t seq, std::size_t hd, std::size_t d,
               std::size_t dp, std::vector<T>& out) {
  out.assign(seq * dp, T(0));
  for (std::size_t j = 0; j < seq; ++j) std::copy_n(m.row_ptr(b * seq + j) + hd * d, d, out.data() + j * dp);
}

// Same head as [d x seqp] columns, zero-padded.
template <class T>
void pack_columns(const Matrix<T>& m, std::size_t b, std::size_t seq, std::size_t hd, std::size_t d,
                  std::size_t seqp, std::vector<T>& out) {
  out.assign(d * seqp, T(0));
  for (std::size_t j = 0; j < seq; ++j) {
    const T* src = m.row_ptr(b * seq + j) + hd * d;
    for (std::size_t e = 0; e < d; ++e) out[e * seqp + j] = src[e];
  }
}

// Causal multi-head attention. q, k, v, context are [batch*seq x hidden];
// probs receives [batch x heads x seq x seq], entries above the diagonal
// unspecified.
template <class T>
void attention_forward(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v,
                       std::size_t batch, std::size_t seq, std::size_t heads, Matrix<T>& context,
                       std::vector<T>& probs) {
  const std::size_t h = q.cols, d = h / heads;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
  context.reshape(batch * seq, h);
  probs.resize(batch * heads * seq * seq);
  if constexpr (kVectorAttention<T>) {
    constexpr std::size_t W = kLanes<T>;
    typedef T V __attribute__((vector_size(64)));
    typedef T VU __attribute__((vector_size(64), aligned(alignof(T)), may_alias));
    const std::size_t seqp = round_up(seq, W), dp = round_up(d, W);
    auto& ws = attention_scratch<T>();
    ws.row.assign(seqp, T(0));
    ws.out.assign(dp, T(0));
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t hd = 0; hd < heads; ++hd) {
        pack_columns(k, b, seq, hd, d, seqp, ws.kt);
        pack_rows(v, b, seq, hd, d, dp, ws.vp);
        for (std::size_t i = 0; i < seq; ++i) {
          const std::size_t n = i + 1, np = round_up(n, W);
          T* s = ws.row.data();
          row_times_packed(q.row_ptr(b * seq + i) + hd * d, d, ws.kt.data(), seqp, n, s);
          V mx = V{} - std::numeric_limits<T>::infinity();
          for (std::size_t j0 = 0; j0 < np; j0 += W) {
            V x = *reinterpret_cast<VU*>(s + j0) * scale;
            for (std::size_t l = 0; l < W; ++l)
              if (j0 + l >= n) x[l] = -std::numeric_limits<T>::infinity();
            *reinterpret_cast<VU*>(s + j0) = x;
            mx = mx > x ? mx : x;
          }
          T m = mx[0];
          for (std::size_t l = 1; l < W; ++l) m = std::max(m, mx[l]);
          V sum{};
          for (std::size_t j0 = 0; j0 < np; j0 += W) {
            const V ex = exp_nonpositive<T, V>(*reinterpret_cast<VU*>(s + j0) - m);
            *reinterpret_cast<VU*>(s + j0) = ex;
            sum += ex;
          }
          T total = 0;
          for (std::size_t l = 0; l < W; ++l) total += sum[l];
          const T inv = T(1) / total;
          for (std::size_t j0 = 0; j0 < np; j0 += W) *reinterpret_cast<VU*>(s + j0) *= inv;
          std::copy_n(s, n, probs.data() + ((b * heads + hd) * seq + i) * seq);
          weighted_row_sum(s, n, ws.vp.data(), dp, ws.out.data());
          std::copy_n(ws.out.data(), d, context.row_ptr(b * seq + i) + hd * d);
        }
      }
    }
  } else {
    std::fill(context.data.begin(), context.data.end(), T(0));
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t hd = 0; hd < heads; ++hd) {
        for (std::size_t i = 0; i < seq; ++i) {
          T* s = probs.data() + ((b * heads + hd) * seq + i) * seq;
          const T* qi = q.row_ptr(b * seq + i) + hd * d;
          for (std::size_t j = 0; j <= i; ++j) {
            const T* kj = k.row_ptr(b * seq + j) + hd * d;
            T acc = 0;
            for (std::size_t e = 0; e < d; ++e) acc += qi[e] * kj[e];
            s[j] = acc * scale;
          }
          T mx = s[0];
          for (std::size_t j = 0; j <= i; ++j) mx = std::max(mx, s[j]);
          T sum = 0;
          for (std::size_t j = 0; j <= i; ++j) sum += (s[j] = std::exp(s[j] - mx));
          const T inv = T(1) / sum;
          for (std::size_t j = 0; j <= i; ++j) s[j] *= inv;
          T* ci = context.row_ptr(b * seq + i) + hd * d;
          for (std::size_t j = 0; j <= i; ++j) {
            const T* vj = v.row_ptr(b * seq + j) + hd * d;
            for (std::size_t e = 0; e < d; ++e) ci[e] += s[j] * vj[e];
          }
        }
      }
    }
  }
}

template <class T>
void attention_backward(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v,
                        const std::vector<T>& probs, const Matrix<T>& dcontext, std::size_t batch,
                        std::size_t seq, std::size_t heads, Matrix<T>& dq, Matrix<T>& dk,
                        Matrix<T>& dv) {
  const std::size_t h = q.cols, d = h / heads;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
  dq.reshape(batch * seq, h);
  dk.reshape(batch * seq, h);
  dv.reshape(batch * seq, h);
  if constexpr (kVectorAttention<T>) {
    constexpr std::size_t W = kLanes<T>;
    typedef T VU __attribute__((vector_size(64), aligned(alignof(T)), may_alias));
    const std::size_t seqp = round_up(seq, W), dp = round_up(d, W);
    auto& ws = attention_scratch<T>();
    ws.row.assign(seqp, T(0));
    ws.drow.assign(seqp, T(0));
    ws.out.assign(dp, T(0));
    std::vector<T> dci(dp, T(0)), qi(dp, T(0));
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t hd = 0; hd < heads; ++hd) {
        pack_columns(v, b, seq, hd, d, seqp, ws.vt);
        pack_rows(k, b, seq, hd, d, dp, ws.kp);
        ws.dkp.assign(seq * dp, T(0));
        ws.dvp.assign(seq * dp, T(0));
        for (std::size_t i = 0; i < seq; ++i) {
          const std::size_t n = i + 1;
          const T* p = probs.data() + ((b * heads + hd) * seq + i) * seq;
          std::copy_n(dcontext.row_ptr(b * seq + i) + hd * d, d, dci.data());
          std::copy_n(q.row_ptr(b * seq + i) + hd * d, d, qi.data());
          T* dpv = ws.drow.data();
          row_times_packed(dci.data(), d, ws.vt.data(), seqp, n, dpv);
          T dot = 0;
          for (std::size_t j = 0; j < n; ++j) dot += p[j] * dpv[j];
          T* ds = ws.row.data();
          for (std::size_t j = 0; j < n; ++j) ds[j] = p[j] * (dpv[j] - dot) * scale;
          for (std::size_t j = 0; j < n; ++j) {
            for (std::size_t e0 = 0; e0 < dp; e0 += W) {
              *reinterpret_cast<VU*>(ws.dvp.data() + j * dp + e0) += p[j] * *reinterpret_cast<const VU*>(dci.data() + e0);
              *reinterpret_cast<VU*>(ws.dkp.data() + j * dp + e0) += ds[j] * *reinterpret_cast<const VU*>(qi.data() + e0);
            }
          }
          weighted_row_sum(ds, n, ws.kp.data(), dp, ws.out.data());
          std::copy_n(ws.out.data(), d, dq.row_ptr(b * seq + i) + hd * d);
        }
        for (std::size_t j = 0; j < seq; ++j) {
          std::copy_n(ws.dkp.data() + j * dp, d, dk.row_ptr(b * seq + j) + hd * d);
          std::copy_n(ws.dvp.data() + j * dp, d, dv.row_ptr(b * seq + j) + hd * d);
        }
      }
    }
  } else {
    std::fill(dq.data.begin(), dq.data.end(), T(0));
    std::fill(dk.data.begin(), dk.data.end(), T(0));
    std::fill(dv.data.begin(), dv.data.end(), T(0));
    std::vector<T> dp(seq);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t hd = 0; hd < heads; ++hd) {
        for (std::size_t i = 0; i < seq; ++i) {
          const T* p = probs.data() + ((b * heads + hd) * seq + i) * seq;
          const T* dci = dcontext.row_ptr(b * seq + i) + hd * d;
          T dot = 0;
          for (std::size_t j = 0; j <= i; ++j) {
            const T* vj = v.row_ptr(b * seq + j) + hd * d;
            T acc = 0;
            for (std::size_t e = 0; e < d; ++e) acc += dci[e] * vj[e];
            dp[j] = acc;
            dot += p[j] * acc;
          }
          const T* qi = q.row_ptr(b * seq + i) + hd * d;
          T* dqi = dq.row_ptr(b * seq + i) + hd * d;
          for (std::size_t j = 0; j <= i; ++j) {
            const T ds = p[j] * (dp[j] - dot) * scale;
            const T* kj = k.row_ptr(b * seq + j) + hd * d;
            T* dkj = dk.row_ptr(b * seq + j) + hd * d;
            T* dvj = dv.row_ptr(b * seq + j) + hd * d;
            for (std::size_t e = 0; e < d; ++e) {
              dqi[e] += ds * kj[e];
              dkj[e] += ds * qi[e];
              dvj[e] += p[j] * dci[e];
            }
          }
        }
      }
    }
  }
}

/// Runs the decoder over `batch` sequences of `seq` bytes each, laid out
/// back to back in `tokens`. Returns logits [batch*seq x 256]. With a cache
/// the intermediates needed by backward() are kept; with `taps` the residual
/// stream after every layer is copied out.
template <class T>
Matrix<T> forward(const Parameters<T>& params, ByteView tokens, std::size_t batch, std::size_t seq,
                  Mode mode, std::uint64_t dropout_seed, ForwardCache<T>* cache,
                  std::vector<Matrix<T>>* taps = nullptr) {
  const ModelConfig& cfg = params.config();
  const std::size_t rows = batch * seq, h = cfg.hidden_size, f = cfg.filter_size,
                    e = cfg.embed_dim;
  const bool dropout = mode == Mode::train && cfg.dropout_rate > 0.0;
  std::mt19937_64 rng(dropout_seed);

  ForwardCache<T> local;
  ForwardCache<T>& c = cache ? *cache : local;
  c.batch = batch;
  c.seq = seq;
  c.tokens.assign(tokens.begin(), tokens.end());
  c.layers.resize(cache ? cfg.num_layers : 0);  // keeps earlier allocations

  c.embedded.reshape(rows, e);
  const T* table = params.byte_embedding().ptr();
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(table + tokens[r] * e, e, c.embedded.row_ptr(r));
  Matrix<T> x(rows, h);
  kernels::gemm(c.embedded.ptr(), params.embed_projection_weight().ptr(), x.ptr(), rows, e, h,
                params.embed_projection_bias().ptr());
  const T* pos = params.position_embedding().ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    T* xr = x.row_ptr(r);
    const T* pr = pos + (r % seq) * h;
    for (std::size_t j = 0; j < h; ++j) xr[j] += pr[j];
  }
  if (!cache) c.embedded = Matrix<T>();
  if (taps) taps->clear();

  LayerCache<T> scratch;
  Matrix<T> tmp(rows, h);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    LayerCache<T>& lc = cache ? c.layers[l] : scratch;
    auto w = [&](LayerSlot s) { return params.layer(l, s).ptr(); };

    layer_norm_forward(x, w(kAttnNormGain), w(kAttnNormBias), lc.attn_in,
                       cache ? &lc.attn_norm : nullptr);
    lc.q.reshape(rows, h);
    lc.k.reshape(rows, h);
    lc.v.reshape(rows, h);
    kernels::gemm(lc.attn_in.ptr(), w(kQueryWeight), lc.q.ptr(), rows, h, h, w(kQueryBias));
    kernels::gemm(lc.attn_in.ptr(), w(kKeyWeight), lc.k.ptr(), rows, h, h, w(kKeyBias));
    kernels::gemm(lc.attn_in.ptr(), w(kValueWeight), lc.v.ptr(), rows, h, h, w(kValueBias));
    attention_forward(lc.q, lc.k, lc.v, batch, seq, cfg.num_heads, lc.context, lc.probs);
    kernels::gemm(lc.context.ptr(), w(kAttnOutWeight), tmp.ptr(), rows, h, h, w(kAttnOutBias));
    if (dropout) {
      lc.time_scale = dropout_scales<T>(rng, rows, cfg.dropout_rate);
      for (std::size_t r = 0; r < rows; ++r) {
        T* tr = tmp.row_ptr(r);
        for (std::size_t j = 0; j < h; ++j) tr[j] *= lc.time_scale[r];
      }
    } else {
      lc.time_scale.clear();
    }
    for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] += tmp.data[i];

    layer_norm_forward(x, w(kFfnNormGain), w(kFfnNormBias), lc.ffn_in,
                       cache ? &lc.ffn_norm : nullptr);
    lc.pre_relu.reshape(rows, f);
    kernels::gemm(lc.ffn_in.ptr(), w(kFfnInWeight), lc.pre_relu.ptr(), rows, h, f, w(kFfnInBias));
    lc.hidden.reshape(rows, f);
    if (dropout) {
      lc.feature_scale = dropout_scales<T>(rng, batch * f, cfg.dropout_rate);
    } else {
      lc.feature_scale.clear();
    }
    for (std::size_t r = 0; r < rows; ++r) {
      const T* ur = lc.pre_relu.row_ptr(r);
      T* hr = lc.hidden.row_ptr(r);
      const T* fs = dropout ? lc.feature_scale.data() + (r / seq) * f : nullptr;
      for (std::size_t j = 0; j < f; ++j) {
        const T a = ur[j] > T(0) ? ur[j] : T(0);
        hr[j] = fs ? a * fs[j] : a;
      }
    }
    kernels::gemm(lc.hidden.ptr(), w(kFfnOutWeight), tmp.ptr(), rows, f, h, w(kFfnOutBias));
    for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] += tmp.data[i];
    if (taps) taps->push_back(x);
  }

  layer_norm_forward(x, params.final_norm_gain().ptr(), params.final_norm_bias().ptr(), c.final_out,
                     cache ? &c.final_norm : nullptr);
  Matrix<T> logits(rows, kVocabSize);
  kernels::gemm(c.final_out.ptr(), params.output_head_weight().ptr(), logits.ptr(), rows, h,
                kVocabSize, params.output_head_bias().ptr());
  return logits;
}

template <class T>
struct BackwardScratch {
  Matrix<T> dnorm, dx, dhidden, dctx, dq, dk, dv, dffn_in, dattn, dattn_in, dembedded;
};

/// Accumulates d(loss)/d(params) into `grads` given d(loss)/d(logits).
template <class T>
void backward(const Parameters<T>& params, const ForwardCache<T>& c, const Matrix<T>& dlogits,
              Parameters<T>& grads) {
  const ModelConfig& cfg = params.config();
  const std::size_t rows = c.batch * c.seq, h = cfg.hidden_size, f = cfg.filter_size,
                    e = cfg.embed_dim;
  std::vector<T> scratch;
  thread_local BackwardScratch<T> ws;
  auto& [dnorm, dx, dhidden, dctx, dq, dk, dv, dffn_in, dattn, dattn_in, dembedded] = ws;

  kernels::gemm_at_b_accumulate(c.final_out.ptr(), dlogits.ptr(), grads.output_head_weight().ptr(),
                                rows, h, kVocabSize);
  kernels::column_sum_accumulate(dlogits.ptr(), rows, kVocabSize, grads.output_head_bias().ptr());
  dnorm.reshape(rows, h);
  kernels::gemm_a_bt(dlogits.ptr(), params.output_head_weight().ptr(), dnorm.ptr(), rows, h,
                     kVocabSize, scratch);
  dx.zeros(rows, h);
  layer_norm_backward(dnorm, params.final_norm_gain().ptr(), c.final_norm, dx,
                      grads.final_norm_gain().ptr(), grads.final_norm_bias().ptr());

  dhidden.reshape(rows, f);
  dctx.reshape(rows, h);
  for (std::size_t li = cfg.num_layers; li-- > 0;) {
    const LayerCache<T>& lc = c.layers[li];
    auto w = [&](LayerSlot s) { return params.layer(li, s).ptr(); };
    auto g = [&](LayerSlot s) { return grads.layer(li, s).ptr(); };

    // feed-forward sublayer
    kernels::gemm_at_b_accumulate(lc.hidden.ptr(), dx.ptr(), g(kFfnOutWeight), rows, f, h);
    kernels::column_sum_accumulate(dx.ptr(), rows, h, g(kFfnOutBias));
    kernels::gemm_a_bt(dx.ptr(), w(kFfnOutWeight), dhidden.ptr(), rows, f, h, scratch);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* ur = lc.pre_relu.row_ptr(r);
      T* dr = dhidden.row_ptr(r);
      const T* fs = lc.feature_scale.empty() ? nullptr : lc.feature_scale.data() + (r / c.seq) * f;
      for (std::size_t j = 0; j < f; ++j) {
        const T gate = ur[j] > T(0) ? (fs ? fs[j] : T(1)) : T(0);
        dr[j] *= gate;
      }
    }
    kernels::gemm_at_b_accumulate(lc.ffn_in.ptr(), dhidden.ptr(), g(kFfnInWeight), rows, h, f);
    kernels::column_sum_accumulate(dhidden.ptr(), rows, f, g(kFfnInBias));
    dffn_in.reshape(rows, h);
    kernels::gemm_a_bt(dhidden.ptr(), w(kFfnInWeight), dffn_in.ptr(), rows, h, f, scratch);
    layer_norm_backward(dffn_in, w(kFfnNormGain), lc.ffn_norm, dx, g(kFfnNormGain),
                        g(kFfnNormBias));

    // attention sublayer
    dattn = dx;
    if (!lc.time_scale.empty()) {
      for (std::size_t r = 0; r < rows; ++r) {
        T* ar = dattn.row_ptr(r);
        for (std::size_t j = 0; j < h; ++j) ar[j] *= lc.time_scale[r];
      }
    }
    kernels::gemm_at_b_accumulate(lc.context.ptr(), dattn.ptr(), g(kAttnOutWeight), rows, h, h);
    kernels::column_sum_accumulate(dattn.ptr(), rows, h, g(kAttnOutBias));
    kernels::gemm_a_bt(dattn.ptr(), w(kAttnOutWeight), dctx.ptr(), rows, h, h, scratch);
    attention_backward(lc.q, lc.k, lc.v, lc.probs, dctx, c.batch, c.seq, cfg.num_heads, dq, dk, dv);
    dattn_in.reshape(rows, h);
    const std::array<std::array<LayerSlot, 2>, 3> proj = {
        {{kQueryWeight, kQueryBias}, {kKeyWeight, kKeyBias}, {kValueWeight, kValueBias}}};
    const std::array<const Matrix<T>*, 3> dproj = {&dq, &dk, &dv};
    for (std::size_t pi = 0; pi < 3; ++pi) {
      kernels::gemm_at_b_accumulate(lc.attn_in.ptr(), dproj[pi]->ptr(), g(proj[pi][0]), rows, h, h);
      kernels::column_sum_accumulate(dproj[pi]->ptr(), rows, h, g(proj[pi][1]));
      kernels::gemm_a_bt(dproj[pi]->ptr(), w(proj[pi][0]), dattn_in.ptr(), rows, h, h, scratch,
                         pi > 0);
    }
    layer_norm_backward(dattn_in, w(kAttnNormGain), lc.attn_norm, dx, g(kAttnNormGain),
                        g(kAttnNormBias));
  }

  // embeddings
  kernels::gemm_at_b_accumulate(c.embedded.ptr(), dx.ptr(), grads.embed_projection_weight().ptr(),
                                rows, e, h);
  kernels::column_sum_accumulate(dx.ptr(), rows, h, grads.embed_projection_bias().ptr());
  T* dpos = grads.position_embedding().ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* dr = dx.row_ptr(r);
    T* pr = dpos + (r % c.seq) * h;
    for (std::size_t j = 0; j < h; ++j) pr[j] += dr[j];
  }
  dembedded.reshape(rows, e);
  kernels::gemm_a_bt(dx.ptr(), params.embed_projection_weight().ptr(), dembedded.ptr(), rows, e, h,
                     scratch);
  T* dtable = grads.byte_embedding().ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* dr = dembedded.row_ptr(r);
    T* tr = dtable + c.tokens[r] * e;
    for (std::size_t j = 0; j < e; ++j) tr[j] += dr[j];
  }
}

inline void check_input_length(std::size_t len, const ModelConfig& cfg) {
  if (len == 0) fail(ErrorKind::length, "model input must contain at least one byte");
  if (len > cfg.context_len) {
    fail(ErrorKind::length, "input of " + std::to_string(len) + " bytes exceeds context_len " +
                                std::to_string(cfg.context_len));
  }
}

}  // namespace detail

/// Logits [len x 256]; row i parameterizes P(x[i+1] | x[0..i]).
template <class T>
Matrix<T> forward(const Parameters<T>& params, ByteView input, Mode mode = Mode::eval,
                  std::uint64_t dropout_seed = 0) {
  detail::check_input_length(input.size(), params.config());
  return detail::forward<T>(params, input, 1, input.size(), mode, dropout_seed, nullptr);
}

/// Softmax of one logits row, computed in double.
template <class T>
std::array<double, kVocabSize> softmax(std::span<const T> logits) {
  std::array<double, kVocabSize> out{};
  double mx = static_cast<double>(logits[0]);
  for (const T v : logits) mx = std::max(mx, static_cast<double>(v));
  double sum = 0.0;
  for (std::size_t i = 0; i < kVocabSize; ++i) {
    out[i] = std::exp(static_cast<double>(logits[i]) - mx);
    sum += out[i];
  }
  for (auto& p : out) p /= sum;
  return out;
}

template <class T>
NextByteDistribution<T> predict_distribution(const Parameters<T>& params, ByteView context) {
  const Matrix<T> logits = forward(params, context);
  return NextByteDistribution<T>{softmax<T>(logits.row(logits.rows - 1))};
}

/// Residual stream after every layer's feed-forward sublayer, eval mode,
/// from a single forward pass. Entry l holds layer l+1.
template <class T>
std::vector<Matrix<T>> all_hidden_activations(const Parameters<T>& params, ByteView input) {
  detail::check_input_length(input.size(), params.config());
  std::vector<Matrix<T>> taps;
  detail::forward<T>(params, input, 1, input.size(), Mode::eval, 0, nullptr, &taps);
  return taps;
}

/// Feed-forward sublayer output (post-residual) of layer `layer_index`,
/// counted from 1.
template <class T>
ActivationTrace<T> hidden_activation(const Parameters<T>& params, ByteView input,
                                     std::size_t layer_index) {
  const std::size_t layers = params.config().num_layers;
  if (layer_index < 1 || layer_index > layers) {
    fail(ErrorKind::index, "layer_index " + std::to_string(layer_index) + " outside [1, " +
                               std::to_string(layers) + "]");
  }
  auto taps = all_hidden_activations(params, input);
  return ActivationTrace<T>{layer_index, std::move(taps[layer_index - 1])};
}

}  // namespace bytelm
