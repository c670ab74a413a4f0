#pragma once

// Assembles the four architecture variants: dense transformer, dense mamba,
// transformer-MoE, and mamba-MoE. A model is a stack of block pairs applied
// in the sequential residual form
//   u = x + Mixer(LN(x));  x' = x + Channel(LN(u))
// over an embedded token sequence, followed by a final layernorm and the
// (tied by default) unembedding.

#include <optional>
#include <string>
#include <vector>

#include "bm/attention.hpp"
#include "bm/mamba.hpp"
#include "bm/moe.hpp"
#include "bm/tensor.hpp"

namespace bm {

enum class Variant { transformer, mamba, transformer_moe, mamba_moe };
enum class GateMode { sigmoid, one };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::transformer: return "transformer";
    case Variant::mamba: return "mamba";
    case Variant::transformer_moe: return "transformer-moe";
    case Variant::mamba_moe: return "mamba-moe";
  }
  return "?";
}

struct ModelConfig {
  Variant variant = Variant::mamba_moe;
  int n_layers = 4;  // total blocks; each pair is one mixer + one channel block
  i64 d_model = 64;
  int expansion = 2;
  i64 state_size = 16;
  i64 dt_rank = 4;
  i64 conv_dim = 4;
  i64 n_experts = 4;
  i64 ffn_hidden = 128;
  i64 vocab_size = 256;
  i64 max_seq_len = 4096;
  int n_heads = 4;
  ExpertKind expert_kind = ExpertKind::swiglu;
  GateMode gate_mode = GateMode::sigmoid;
  bool tie_embeddings = true;

  i64 d_inner() const { return static_cast<i64>(expansion) * d_model; }
  int n_pairs() const { return n_layers / 2; }
  bool has_attention() const {
    return variant == Variant::transformer || variant == Variant::transformer_moe;
  }
  bool is_moe() const {
    return variant == Variant::transformer_moe || variant == Variant::mamba_moe;
  }

  void validate() const {
    if (n_layers < 2 || n_layers % 2 != 0)
      throw ConfigError(strcat("n_layers must be even and >= 2 (one mixer + one channel block per pair), got ",
                               n_layers));
    if (d_model < 1) throw ConfigError(strcat("d_model must be positive, got ", d_model));
    if (expansion < 1) throw ConfigError(strcat("expansion must be >= 1, got ", expansion));
    if (vocab_size < 2) throw ConfigError(strcat("vocab_size must be >= 2, got ", vocab_size));
    if (max_seq_len < 1) throw ConfigError(strcat("max_seq_len must be >= 1, got ", max_seq_len));
    if (ffn_hidden < 1) throw ConfigError(strcat("ffn_hidden must be >= 1, got ", ffn_hidden));
    if (has_attention()) {
      if (n_heads < 1 || d_model % n_heads != 0)
        throw ConfigError(strcat("d_model ", d_model, " must be divisible by n_heads ", n_heads));
    } else {
      if (state_size < 1 || dt_rank < 1 || conv_dim < 1)
        throw ConfigError(strcat("state_size/dt_rank/conv_dim must be >= 1, got ", state_size, "/",
                                 dt_rank, "/", conv_dim));
    }
    if (is_moe() && n_experts < 1)
      throw ConfigError(strcat("n_experts must be >= 1 for MoE variants, got ", n_experts));
  }
};

// Shape enumeration shared by parameter construction, exact counting, and the
// checkpoint format. Symbolic: never allocates, so full-size presets can be
// counted without instantiating weights.
inline std::vector<std::pair<std::string, Shape>> enumerate_param_shapes(const ModelConfig& c) {
  std::vector<std::pair<std::string, Shape>> out;
  const i64 D = c.d_model, I = c.d_inner(), H = c.state_size, R = c.dt_rank, C = c.conv_dim;
  const i64 F = c.ffn_hidden;
  out.emplace_back("embed", Shape{c.vocab_size, D});
  if (c.has_attention()) out.emplace_back("pos_embed", Shape{c.max_seq_len, D});
  for (int p = 0; p < c.n_pairs(); ++p) {
    const std::string pre = "pair" + std::to_string(p) + ".";
    if (c.has_attention()) {
      for (const char* w : {"w_q", "w_k", "w_v", "w_o"})
        out.emplace_back(pre + "mixer." + w, Shape{D, D});
    } else {
      out.emplace_back(pre + "mixer.w_x", Shape{I, D});
      out.emplace_back(pre + "mixer.w_z", Shape{I, D});
      out.emplace_back(pre + "mixer.w_y", Shape{D, I});
      out.emplace_back(pre + "mixer.conv_w", Shape{I, C});
      out.emplace_back(pre + "mixer.conv_b", Shape{I});
      out.emplace_back(pre + "mixer.w_b", Shape{H, I});
      out.emplace_back(pre + "mixer.w_c", Shape{H, I});
      out.emplace_back(pre + "mixer.w_dt_down", Shape{R, I});
      out.emplace_back(pre + "mixer.w_dt_up", Shape{I, R});
      out.emplace_back(pre + "mixer.dt_bias", Shape{I});
      out.emplace_back(pre + "mixer.ln_a", Shape{I, H});
      out.emplace_back(pre + "mixer.d_bias", Shape{I});
    }
    out.emplace_back(pre + "ln0", Shape{D});
    out.emplace_back(pre + "ln1", Shape{D});
    const i64 n_exp = c.is_moe() ? c.n_experts : 1;
    if (c.is_moe()) out.emplace_back(pre + "channel.router", Shape{n_exp, D});
    for (i64 e = 0; e < n_exp; ++e) {
      const std::string ep = pre + "channel.expert" + std::to_string(e) + ".";
      out.emplace_back(ep + "w_in", Shape{F, D});
      if (c.expert_kind == ExpertKind::swiglu) out.emplace_back(ep + "w_gate", Shape{F, D});
      out.emplace_back(ep + "w_out", Shape{D, F});
    }
  }
  out.emplace_back("final_ln", Shape{D});
  if (!c.tie_embeddings) out.emplace_back("unembed", Shape{c.vocab_size, D});
  return out;
}

template <typename T>
struct BlockPair {
  std::optional<MambaParams<T>> mamba;
  std::optional<AttnParams<T>> attn;
  Tensor<T> ln0, ln1;
  std::optional<MoEParams<T>> moe;
  std::optional<ExpertParams<T>> dense;

  template <typename F>
  void visit(const std::string& pre, F&& f) {
    if (mamba) mamba->visit(pre + "mixer", f);
    if (attn) attn->visit(pre + "mixer", f);
    f(pre + "ln0", ln0);
    f(pre + "ln1", ln1);
    if (moe) moe->visit(pre + "channel", f);
    if (dense) dense->visit(pre + "channel.expert0", f);
  }
};

template <typename T>
struct ModelParams {
  ModelConfig config;
  u64 seed = 0;
  Tensor<T> embed;      // [vocab x D]
  Tensor<T> pos_embed;  // [max_seq x D], attention variants only
  std::vector<BlockPair<T>> pairs;
  Tensor<T> final_ln;
  Tensor<T> unembed;  // untied only

  static ModelParams init(const ModelConfig& c, u64 seed) {
    c.validate();
    ModelParams m;
    m.config = c;
    m.seed = seed;
    const double embed_std = 0.02;
    const double out_scale = 1.0 / std::sqrt(2.0 * c.n_layers);
    m.embed = randn<T>({c.vocab_size, c.d_model}, embed_std, seed, "embed");
    if (c.has_attention())
      m.pos_embed = randn<T>({c.max_seq_len, c.d_model}, embed_std, seed, "pos_embed");
    for (int p = 0; p < c.n_pairs(); ++p) {
      const std::string pre = "pair" + std::to_string(p) + ".";
      BlockPair<T> pair;
      if (c.has_attention()) {
        pair.attn = AttnParams<T>::init(c.d_model, c.n_heads, seed, pre + "mixer", out_scale);
      } else {
        MambaDims dims{c.d_model, c.d_inner(), c.state_size, c.dt_rank, c.conv_dim};
        pair.mamba = MambaParams<T>::init(dims, seed, pre + "mixer", out_scale);
      }
      pair.ln0 = Tensor<T>::full({c.d_model}, T(1));
      pair.ln1 = Tensor<T>::full({c.d_model}, T(1));
      if (c.is_moe()) {
        pair.moe = MoEParams<T>::init(c.expert_kind, c.n_experts, c.d_model, c.ffn_hidden, seed,
                                      pre + "channel", out_scale);
      } else {
        pair.dense = ExpertParams<T>::init(c.expert_kind, c.d_model, c.ffn_hidden, seed,
                                           pre + "channel.expert0", out_scale);
      }
      m.pairs.push_back(std::move(pair));
    }
    m.final_ln = Tensor<T>::full({c.d_model}, T(1));
    if (!c.tie_embeddings)
      m.unembed = randn<T>({c.vocab_size, c.d_model}, embed_std, seed, "unembed");
    return m;
  }

  template <typename F>
  void visit(F&& f) {
    f(std::string("embed"), embed);
    if (config.has_attention()) f(std::string("pos_embed"), pos_embed);
    for (size_t p = 0; p < pairs.size(); ++p)
      pairs[p].visit("pair" + std::to_string(p) + ".", f);
    f(std::string("final_ln"), final_ln);
    if (!config.tie_embeddings) f(std::string("unembed"), unembed);
  }

  void watch_all(Tape<T>& tape) {
    visit([&tape](const std::string&, Tensor<T>& t) { tape.watch(t); });
  }

  i64 param_count() {
    i64 total = 0;
    visit([&total](const std::string&, Tensor<T>& t) { total += t.numel(); });
    return total;
  }
};

// Per-forward instrumentation and routing controls. Everything optional;
// a null info runs a plain forward.
struct ForwardInfo {
  FlopCounter* flops = nullptr;
  std::vector<RoutingStats>* routing = nullptr;  // one entry per MoE pair
  std::vector<u64>* block_flops = nullptr;       // 2 entries per pair (mixer, channel)
  RoutingMode routing_mode = RoutingMode::sinkhorn;
  SinkhornConfig sinkhorn;
  ScanMode scan_mode = ScanMode::sequential;
  const ScanDebug* scan_debug = nullptr;
};

// tokens = n_seqs sequences of equal length, flattened. Returns logits
// [(n_seqs*L) x vocab].
template <typename T>
Tensor<T> model_forward(const ModelParams<T>& m, std::span<const int> tokens, i64 n_seqs = 1,
                        ForwardInfo* info = nullptr) {
  const ModelConfig& c = m.config;
  check(!tokens.empty(), "model_forward: empty token sequence");
  check(tokens.size() % static_cast<size_t>(n_seqs) == 0, "model_forward: ", tokens.size(),
        " tokens not divisible into ", n_seqs, " sequences");
  const i64 L = static_cast<i64>(tokens.size()) / n_seqs;
  check(L <= c.max_seq_len, "sequence length ", L, " exceeds max_seq_len ", c.max_seq_len);
  std::vector<i64> ids(tokens.size());
  for (size_t i = 0; i < tokens.size(); ++i) {
    check(tokens[i] >= 0 && tokens[i] < c.vocab_size, "token ", tokens[i], " out of range [0,",
          c.vocab_size, ")");
    ids[i] = tokens[i];
  }
  FlopCounter* flops = info ? info->flops : nullptr;

  Tensor<T> x = gather_rows(m.embed, ids);
  if (c.has_attention()) {
    std::vector<i64> pos(tokens.size());
    for (i64 s = 0; s < n_seqs; ++s)
      for (i64 t = 0; t < L; ++t) pos[static_cast<size_t>(s * L + t)] = t;
    x = add(x, gather_rows(m.pos_embed, pos));
  }

  auto snapshot = [&](u64& last) {
    if (info && info->block_flops && flops) {
      info->block_flops->push_back(flops->total - last);
      last = flops->total;
    }
  };
  u64 last_flops = flops ? flops->total : 0;

  for (const BlockPair<T>& pair : m.pairs) {
    Tensor<T> mixed;
    {
      Tensor<T> xa = layernorm_nobias(x, pair.ln0);
      if (pair.mamba) {
        mixed = mamba_forward(*pair.mamba, xa, n_seqs, flops,
                              info ? info->scan_mode : ScanMode::sequential,
                              info ? info->scan_debug : nullptr);
      } else {
        mixed = attention_forward(*pair.attn, xa, n_seqs, flops);
      }
    }
    snapshot(last_flops);
    Tensor<T> u = add(x, mixed);
    Tensor<T> xb = layernorm_nobias(u, pair.ln1);
    Tensor<T> channel_out;
    if (pair.moe) {
      MoEOptions opts;
      if (info) {
        opts.sinkhorn = info->sinkhorn;
        opts.mode = info->routing_mode;
      }
      opts.gate_one = c.gate_mode == GateMode::one;
      RoutingStats stats;
      channel_out = moe_forward(*pair.moe, xb, opts, &stats, flops);
      if (info && info->routing) info->routing->push_back(std::move(stats));
    } else {
      channel_out = pair.dense->apply(xb, flops);
    }
    snapshot(last_flops);
    x = add(x, channel_out);
  }
  Tensor<T> h = layernorm_nobias(x, m.final_ln);
  return matmul_nt(h, c.tie_embeddings ? m.embed : m.unembed, flops);
}

// ---------------------------------------------------------------------------
// Streaming decode state: recurrent Mamba states and/or KV caches per pair.
// ---------------------------------------------------------------------------

template <typename T>
struct DecodeState {
  std::vector<MambaState<T>> mamba_states;  // parallel to mamba pairs
  std::vector<KVCache<T>> kv_caches;        // parallel to attention pairs
  i64 position = 0;

  // Live state memory at the current position.
  size_t bytes() const {
    size_t total = 0;
    for (const auto& s : mamba_states) total += s.bytes();
    for (const auto& c : kv_caches) total += c.bytes();
    return total;
  }
};

template <typename T>
DecodeState<T> make_decode_state(const ModelParams<T>& m) {
  DecodeState<T> st;
  for (const BlockPair<T>& pair : m.pairs) {
    if (pair.mamba) st.mamba_states.push_back(MambaState<T>::init(pair.mamba->dims));
    if (pair.attn) st.kv_caches.push_back(KVCache<T>::init(m.config.d_model, m.config.max_seq_len));
  }
  return st;
}

namespace detail {
template <typename T>
void layernorm_vec(const T* x, const T* gain, T* out, i64 d) {
  T mean = 0;
  for (i64 j = 0; j < d; ++j) mean += x[j];
  mean /= T(d);
  T var = 0;
  for (i64 j = 0; j < d; ++j) {
    const T dv = x[j] - mean;
    var += dv * dv;
  }
  var /= T(d);
  const T istd = T(1) / std::sqrt(var + T(kLayerNormEps));
  for (i64 j = 0; j < d; ++j) out[j] = (x[j] - mean) * istd * gain[j];
}
}  // namespace detail

// One streaming decode step. Routing is per-token argmax with the sigmoid
// gate (no cross-token balancing exists for a single sample). Returns the
// vocab logits for this position.
template <typename T>
std::vector<T> decode_step(const ModelParams<T>& m, DecodeState<T>& st, int token,
                           FlopCounter* flops = nullptr) {
  const ModelConfig& c = m.config;
  check(token >= 0 && token < c.vocab_size, "token ", token, " out of range [0,", c.vocab_size, ")");
  check(st.position < c.max_seq_len, "position ", st.position, " exceeds max_seq_len ", c.max_seq_len);
  const i64 D = c.d_model;
  std::vector<T> x(static_cast<size_t>(D));
  std::copy_n(m.embed.data() + static_cast<i64>(token) * D, D, x.data());
  if (c.has_attention())
    for (i64 j = 0; j < D; ++j) x[static_cast<size_t>(j)] += m.pos_embed.at(st.position, j);

  std::vector<T> ln(static_cast<size_t>(D)), mix(static_cast<size_t>(D)), u(static_cast<size_t>(D)),
      ch(static_cast<size_t>(D));
  size_t mamba_idx = 0, attn_idx = 0;
  for (const BlockPair<T>& pair : m.pairs) {
    detail::layernorm_vec(x.data(), pair.ln0.data(), ln.data(), D);
    if (pair.mamba) {
      mamba_step(*pair.mamba, st.mamba_states[mamba_idx++], std::span<const T>(ln),
                 std::span<T>(mix), flops);
    } else {
      attention_decode_step(*pair.attn, st.kv_caches[attn_idx++], std::span<const T>(ln),
                            std::span<T>(mix), flops);
    }
    for (i64 j = 0; j < D; ++j) u[static_cast<size_t>(j)] = x[static_cast<size_t>(j)] + mix[static_cast<size_t>(j)];
    detail::layernorm_vec(u.data(), pair.ln1.data(), ln.data(), D);
    if (pair.moe) {
      const MoEParams<T>& moe = *pair.moe;
      std::vector<T> logits(static_cast<size_t>(moe.n_experts));
      detail::matvec(moe.router, ln.data(), logits.data(), flops);
      int best = 0;
      for (i64 e = 1; e < moe.n_experts; ++e)
        if (logits[static_cast<size_t>(e)] > logits[static_cast<size_t>(best)]) best = static_cast<int>(e);
      moe.experts[static_cast<size_t>(best)].apply_token(std::span<const T>(ln), std::span<T>(ch), flops);
      const T coeff = c.gate_mode == GateMode::one ? T(1) : sigmoid_scalar(logits[static_cast<size_t>(best)]);
      for (i64 j = 0; j < D; ++j) ch[static_cast<size_t>(j)] *= coeff;
    } else {
      pair.dense->apply_token(std::span<const T>(ln), std::span<T>(ch), flops);
    }
    for (i64 j = 0; j < D; ++j) x[static_cast<size_t>(j)] += ch[static_cast<size_t>(j)];
  }
  detail::layernorm_vec(x.data(), m.final_ln.data(), ln.data(), D);
  std::vector<T> logits(static_cast<size_t>(c.vocab_size));
  detail::matvec(c.tie_embeddings ? m.embed : m.unembed, ln.data(), logits.data(), flops);
  st.position += 1;
  return logits;
}

struct GenerateOptions {
  int n_tokens = 16;
  enum class Mode { greedy, temperature } mode = Mode::greedy;
  double temperature = 1.0;
  u64 seed = 0;
  FlopCounter* flops = nullptr;
};

// Autoregressive generation on streaming state; the prefix is never
// recomputed. Greedy mode is deterministic (argmax, ties to lowest id).
template <typename T>
std::vector<int> generate(const ModelParams<T>& m, std::span<const int> prompt,
                          const GenerateOptions& opts) {
  check(!prompt.empty(), "generate: prompt must be non-empty");
  std::vector<int> out(prompt.begin(), prompt.end());
  if (opts.n_tokens == 0) return out;
  DecodeState<T> st = make_decode_state(m);
  std::vector<T> logits;
  for (int tok : prompt) logits = decode_step(m, st, tok, opts.flops);
  std::mt19937_64 rng(opts.seed ^ 0x67656e65726174ull);
  for (int produced = 0; produced < opts.n_tokens; ++produced) {
    int next = 0;
    if (opts.mode == GenerateOptions::Mode::greedy) {
      for (i64 v = 1; v < m.config.vocab_size; ++v)
        if (logits[static_cast<size_t>(v)] > logits[static_cast<size_t>(next)]) next = static_cast<int>(v);
    } else {
      check(opts.temperature > 0, "temperature must be positive");
      const i64 V = m.config.vocab_size;
      std::vector<double> probs(static_cast<size_t>(V));
      double mx = -1e300;
      for (i64 v = 0; v < V; ++v) mx = std::max(mx, static_cast<double>(logits[static_cast<size_t>(v)]));
      double z = 0;
      for (i64 v = 0; v < V; ++v) {
        probs[static_cast<size_t>(v)] =
            std::exp((static_cast<double>(logits[static_cast<size_t>(v)]) - mx) / opts.temperature);
        z += probs[static_cast<size_t>(v)];
      }
      std::uniform_real_distribution<double> udist(0.0, 1.0);
      double u = udist(rng) * z;
      double acc = 0;
      next = static_cast<int>(V - 1);
      for (i64 v = 0; v < V; ++v) {
        acc += probs[static_cast<size_t>(v)];
        if (u <= acc) {
          next = static_cast<int>(v);
          break;
        }
      }
    }
    out.push_back(next);
    if (produced + 1 < opts.n_tokens) logits = decode_step(m, st, next, opts.flops);
  }
  return out;
}

}  // namespace bm
