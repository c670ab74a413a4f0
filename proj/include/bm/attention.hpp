#pragma once

// Causal self-attention baseline with a KV cache for incremental decoding.
// Per-head scaled dot-product attention; the causal mask is standard additive
// -inf masking before the softmax. The cache grows linearly with position,
// the memory contrast to the recurrent mixer.

#include <string>
#include <vector>

#include "bm/moe.hpp"
#include "bm/tensor.hpp"

namespace bm {

template <typename T>
struct AttnParams {
  i64 d_model = 0;
  int n_heads = 0;
  Tensor<T> w_q, w_k, w_v;  // [D x D]
  Tensor<T> w_o;            // [D x D]

  i64 head_dim() const { return d_model / n_heads; }

  // Fan-in scaled init; out_scale damps the residual-output projection.
  static AttnParams init(i64 d_model, int n_heads, u64 seed, const std::string& prefix,
                         double out_scale = 1.0) {
    check(n_heads >= 1 && d_model % n_heads == 0, "attention: d_model ", d_model,
          " must be divisible by n_heads ", n_heads);
    AttnParams p;
    p.d_model = d_model;
    p.n_heads = n_heads;
    const double std = 1.0 / std::sqrt(static_cast<double>(d_model));
    p.w_q = randn<T>({d_model, d_model}, std, seed, prefix + ".w_q");
    p.w_k = randn<T>({d_model, d_model}, std, seed, prefix + ".w_k");
    p.w_v = randn<T>({d_model, d_model}, std, seed, prefix + ".w_v");
    p.w_o = randn<T>({d_model, d_model}, std * out_scale, seed, prefix + ".w_o");
    return p;
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".w_q", w_q);
    f(prefix + ".w_k", w_k);
    f(prefix + ".w_v", w_v);
    f(prefix + ".w_o", w_o);
  }
};

template <typename T>
struct KVCache {
  i64 d_model = 0;
  i64 max_len = 0;
  i64 len = 0;
  std::vector<T> k, v;  // [max_len x D], first `len` rows valid

  static KVCache init(i64 d_model, i64 max_len) {
    KVCache c;
    c.d_model = d_model;
    c.max_len = max_len;
    c.k.assign(static_cast<size_t>(max_len * d_model), T(0));
    c.v.assign(static_cast<size_t>(max_len * d_model), T(0));
    return c;
  }

  // Live cache memory: keys and values for every generated position.
  size_t bytes() const { return 2 * static_cast<size_t>(len * d_model) * sizeof(T); }
};

// Full-sequence causal attention over n_seqs independent segments.
template <typename T>
Tensor<T> attention_forward(const AttnParams<T>& p, const Tensor<T>& x, i64 n_seqs = 1,
                            FlopCounter* flops = nullptr) {
  check(x.rank() == 2 && x.dim(1) == p.d_model, "attention: input ", shape_str(x.shape()),
        " vs d_model ", p.d_model);
  check(x.dim(0) % n_seqs == 0, "attention: rows not divisible into sequences");
  const i64 L = x.dim(0) / n_seqs;
  const i64 d = p.head_dim();
  const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(d));

  std::vector<Tensor<T>> seq_outs;
  for (i64 s = 0; s < n_seqs; ++s) {
    Tensor<T> xb = n_seqs == 1 ? x : slice_rows(x, s * L, (s + 1) * L);
    Tensor<T> q = matmul_nt(xb, p.w_q, flops);
    Tensor<T> k = matmul_nt(xb, p.w_k, flops);
    Tensor<T> v = matmul_nt(xb, p.w_v, flops);
    std::vector<Tensor<T>> heads;
    for (int h = 0; h < p.n_heads; ++h) {
      Tensor<T> qh = slice_cols(q, h * d, (h + 1) * d);
      Tensor<T> kh = slice_cols(k, h * d, (h + 1) * d);
      Tensor<T> vh = slice_cols(v, h * d, (h + 1) * d);
      Tensor<T> scores = scale(matmul_nt(qh, kh, flops), inv_sqrt_d);
      Tensor<T> probs = softmax_lastdim(causal_mask(scores));
      heads.push_back(matmul(probs, vh, flops));
    }
    seq_outs.push_back(matmul_nt(concat_cols(heads), p.w_o, flops));
  }
  return n_seqs == 1 ? seq_outs[0] : concat_rows(seq_outs);
}

// Incremental decode: appends this position's K/V to the cache and attends
// over the stored prefix. Work grows linearly with cache length.
template <typename T>
void attention_decode_step(const AttnParams<T>& p, KVCache<T>& cache, std::span<const T> x_t,
                           std::span<T> y_t, FlopCounter* flops = nullptr) {
  const i64 D = p.d_model;
  check(static_cast<i64>(x_t.size()) == D && static_cast<i64>(y_t.size()) == D,
        "attention_decode_step: expected D-vectors of length ", D);
  check(cache.len < cache.max_len, "KV cache full: max_len ", cache.max_len);
  const i64 d = p.head_dim();
  const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(d));

  std::vector<T> q(static_cast<size_t>(D));
  detail::matvec(p.w_q, x_t.data(), q.data(), flops);
  detail::matvec(p.w_k, x_t.data(), cache.k.data() + cache.len * D, flops);
  detail::matvec(p.w_v, x_t.data(), cache.v.data() + cache.len * D, flops);
  cache.len += 1;

  const i64 n = cache.len;
  std::vector<T> ctx(static_cast<size_t>(D));
  std::vector<T> scores(static_cast<size_t>(n));
  for (int h = 0; h < p.n_heads; ++h) {
    const i64 off = h * d;
    for (i64 t = 0; t < n; ++t) {
      T acc = 0;
      const T* krow = cache.k.data() + t * D + off;
      for (i64 j = 0; j < d; ++j) acc += q[static_cast<size_t>(off + j)] * krow[j];
      scores[static_cast<size_t>(t)] = acc * inv_sqrt_d;
    }
    if (flops) flops->add_matmul(1, d, n);
    T m = scores[0];
    for (i64 t = 1; t < n; ++t) m = std::max(m, scores[static_cast<size_t>(t)]);
    T z = 0;
    for (i64 t = 0; t < n; ++t) {
      scores[static_cast<size_t>(t)] = std::exp(scores[static_cast<size_t>(t)] - m);
      z += scores[static_cast<size_t>(t)];
    }
    const T inv = T(1) / z;
    for (i64 j = 0; j < d; ++j) {
      T acc = 0;
      for (i64 t = 0; t < n; ++t) acc += scores[static_cast<size_t>(t)] * cache.v[static_cast<size_t>(t * D + off + j)];
      ctx[static_cast<size_t>(off + j)] = acc * inv;
    }
    if (flops) flops->add_matmul(1, n, d);
  }
  detail::matvec(p.w_o, ctx.data(), y_t.data(), flops);
}

// One baseline layer in the sequential residual form:
// x' = x + mlp(LN(x + attention(LN(x)))).
template <typename T>
Tensor<T> transformer_layer(const AttnParams<T>& attn, const ExpertParams<T>& mlp,
                            const Tensor<T>& ln0_gain, const Tensor<T>& ln1_gain, const Tensor<T>& x,
                            i64 n_seqs = 1, FlopCounter* flops = nullptr) {
  Tensor<T> u = add(x, attention_forward(attn, layernorm_nobias(x, ln0_gain), n_seqs, flops));
  return add(x, mlp.apply(layernorm_nobias(u, ln1_gain), flops));
}

}  // namespace bm
