#pragma once

// Routed expert layer: expert MLPs (standard or SwiGLU, no biases), token
// dispatch through the Sinkhorn router, and gated expert outputs. Dispatch is
// gather-compute-scatter per expert; a per-token reference path exists for
// equivalence testing. Routing selection is stop-gradient; the sigmoid gating
// coefficient is the only differentiable path through the router.

#include <string>
#include <vector>

#include "bm/sinkhorn.hpp"
#include "bm/tensor.hpp"

namespace bm {

enum class ExpertKind { standard, swiglu };

template <typename T>
struct ExpertParams {
  ExpertKind kind = ExpertKind::standard;
  i64 d_model = 0;
  i64 d_hidden = 0;
  Tensor<T> w_in;    // [F x D]
  Tensor<T> w_gate;  // [F x D], swiglu only
  Tensor<T> w_out;   // [D x F]

  // Fan-in scaled init; out_scale damps the residual-output projection.
  static ExpertParams init(ExpertKind kind, i64 d_model, i64 d_hidden, u64 seed,
                           const std::string& prefix, double out_scale = 1.0) {
    ExpertParams e;
    e.kind = kind;
    e.d_model = d_model;
    e.d_hidden = d_hidden;
    const double in_std = 1.0 / std::sqrt(static_cast<double>(d_model));
    const double out_std = out_scale / std::sqrt(static_cast<double>(d_hidden));
    e.w_in = randn<T>({d_hidden, d_model}, in_std, seed, prefix + ".w_in");
    if (kind == ExpertKind::swiglu)
      e.w_gate = randn<T>({d_hidden, d_model}, in_std, seed, prefix + ".w_gate");
    e.w_out = randn<T>({d_model, d_hidden}, out_std, seed, prefix + ".w_out");
    return e;
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".w_in", w_in);
    if (kind == ExpertKind::swiglu) f(prefix + ".w_gate", w_gate);
    f(prefix + ".w_out", w_out);
  }

  // Batched apply over [n x D] rows.
  Tensor<T> apply(const Tensor<T>& x, FlopCounter* flops = nullptr) const {
    if (kind == ExpertKind::swiglu) {
      Tensor<T> lin = matmul_nt(x, w_in, flops);
      Tensor<T> gate = silu(matmul_nt(x, w_gate, flops));
      return matmul_nt(mul(gate, lin), w_out, flops);
    }
    return matmul_nt(silu(matmul_nt(x, w_in, flops)), w_out, flops);
  }

  // Per-token reference path.
  void apply_token(std::span<const T> x, std::span<T> y, FlopCounter* flops = nullptr) const {
    check(static_cast<i64>(x.size()) == d_model && static_cast<i64>(y.size()) == d_model,
          "expert apply_token: expected D-vectors of length ", d_model);
    std::vector<T> hidden(static_cast<size_t>(d_hidden));
    detail::matvec(w_in, x.data(), hidden.data(), flops);
    if (kind == ExpertKind::swiglu) {
      std::vector<T> g(static_cast<size_t>(d_hidden));
      detail::matvec(w_gate, x.data(), g.data(), flops);
      for (i64 i = 0; i < d_hidden; ++i)
        hidden[static_cast<size_t>(i)] *= silu_scalar(g[static_cast<size_t>(i)]);
    } else {
      for (auto& v : hidden) v = silu_scalar(v);
    }
    detail::matvec(w_out, hidden.data(), y.data(), flops);
  }
};

// Per-call routing statistics. Non-convergence of the router is flagged here
// rather than thrown; the caller decides.
struct RoutingStats {
  std::vector<i64> tokens_per_expert;
  bool router_converged = true;
  int sinkhorn_iters = 0;
  double sinkhorn_residual = 0;
};

// sinkhorn: batch-balanced assignment (training). argmax: independent
// per-token choice on raw logits (decoding; keeps streaming and full
// recompute consistent since no cross-token constraint is applied).
enum class RoutingMode { sinkhorn, argmax };

struct MoEOptions {
  SinkhornConfig sinkhorn;
  RoutingMode mode = RoutingMode::sinkhorn;
  bool gate_one = false;      // force coefficient 1 exactly
  bool weight_by_pi = false;  // diagnostic: weight outputs by pi instead of the sigmoid gate
};

template <typename T>
struct MoEParams {
  i64 n_experts = 0;
  Tensor<T> router;  // [N x D]
  std::vector<ExpertParams<T>> experts;

  static MoEParams init(ExpertKind kind, i64 n_experts, i64 d_model, i64 d_hidden, u64 seed,
                        const std::string& prefix, double out_scale = 1.0) {
    MoEParams m;
    m.n_experts = n_experts;
    m.router = randn<T>({n_experts, d_model}, 1.0 / std::sqrt(static_cast<double>(d_model)), seed,
                        prefix + ".router");
    for (i64 e = 0; e < n_experts; ++e)
      m.experts.push_back(ExpertParams<T>::init(kind, d_model, d_hidden, seed,
                                                prefix + ".expert" + std::to_string(e), out_scale));
    return m;
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".router", router);
    for (size_t e = 0; e < experts.size(); ++e)
      experts[e].visit(prefix + ".expert" + std::to_string(e), f);
  }
};

// Router logits on raw values (stop-gradient by construction).
template <typename T>
std::vector<double> router_logits(const MoEParams<T>& p, const Tensor<T>& x, FlopCounter* flops) {
  const i64 S = x.dim(0), D = x.dim(1), N = p.n_experts;
  std::vector<T> raw(static_cast<size_t>(S * N));
  detail::mm_nt(x.data(), p.router.data(), raw.data(), S, D, N);
  if (flops) flops->add_matmul(S, D, N);
  return std::vector<double>(raw.begin(), raw.end());
}

template <typename T>
Tensor<T> moe_dispatch(const MoEParams<T>& p, const Tensor<T>& x, const std::vector<int>& expert_of,
                       const Tensor<T>& coeff, RoutingStats* stats, FlopCounter* flops);

// y[s] = coeff[s] * E_{expert_of[s]}(x[s]). x must already be normalized by
// the caller; the block structure owns the layernorm.
template <typename T>
Tensor<T> moe_forward(const MoEParams<T>& p, const Tensor<T>& x, const MoEOptions& opts,
                      RoutingStats* stats = nullptr, FlopCounter* flops = nullptr) {
  check(x.rank() == 2 && x.dim(1) == p.router.dim(1), "moe_forward: tokens ", shape_str(x.shape()),
        " vs router ", shape_str(p.router.shape()));
  const i64 S = x.dim(0), N = p.n_experts;

  std::vector<double> logits = router_logits(p, x, flops);
  std::vector<int> expert_of;
  if (opts.mode == RoutingMode::sinkhorn) {
    RoutePlan plan = sinkhorn(logits, S, N, opts.sinkhorn);
    expert_of = plan.expert_of;
    if (stats) {
      stats->router_converged = plan.converged;
      stats->sinkhorn_iters = plan.iters_used;
      stats->sinkhorn_residual = plan.residual;
    }
    if (opts.weight_by_pi && stats) stats->tokens_per_expert.clear();
    if (opts.weight_by_pi) {
      // diagnostic path: weight by the (stop-gradient) assignment probability
      Tensor<T> w({S});
      for (i64 s = 0; s < S; ++s)
        w.at(s) = static_cast<T>(plan.pi[static_cast<size_t>(s * N + expert_of[static_cast<size_t>(s)])]);
      return moe_dispatch(p, x, expert_of, w, stats, flops);
    }
  } else {
    expert_of = route_top1(logits, S, N);
    if (stats) {
      stats->router_converged = true;
      stats->sinkhorn_iters = 0;
      stats->sinkhorn_residual = 0;
    }
  }

  if (opts.gate_one) {
    Tensor<T> ones = Tensor<T>::full({S}, T(1));
    return moe_dispatch(p, x, expert_of, ones, stats, flops);
  }
  Tensor<T> coeff = gate_coefficients(p.router, x, expert_of);
  return moe_dispatch(p, x, expert_of, coeff, stats, flops);
}

// Gather-compute-scatter over the dispatch partition; every token is
// processed by exactly one expert.
template <typename T>
Tensor<T> moe_dispatch(const MoEParams<T>& p, const Tensor<T>& x, const std::vector<int>& expert_of,
                       const Tensor<T>& coeff, RoutingStats* stats, FlopCounter* flops) {
  const i64 S = x.dim(0), N = p.n_experts;
  std::vector<std::vector<i64>> rows(static_cast<size_t>(N));
  for (i64 s = 0; s < S; ++s) {
    const int e = expert_of[static_cast<size_t>(s)];
    check(e >= 0 && e < N, "dispatch: expert index ", e, " out of range [0,", N, ")");
    rows[static_cast<size_t>(e)].push_back(s);
  }
  if (stats) {
    stats->tokens_per_expert.assign(static_cast<size_t>(N), 0);
    for (i64 e = 0; e < N; ++e)
      stats->tokens_per_expert[static_cast<size_t>(e)] = static_cast<i64>(rows[static_cast<size_t>(e)].size());
  }
  std::vector<Tensor<T>> parts(static_cast<size_t>(N));
  for (i64 e = 0; e < N; ++e) {
    if (rows[static_cast<size_t>(e)].empty()) continue;
    Tensor<T> xe = gather_rows(x, rows[static_cast<size_t>(e)]);
    parts[static_cast<size_t>(e)] = p.experts[static_cast<size_t>(e)].apply(xe, flops);
  }
  Tensor<T> combined = combine_rows(parts, rows, S);
  return mul_colvec(combined, coeff);
}

// Per-token reference implementation of the dispatch (no tape), used to
// validate the batched path.
template <typename T>
Tensor<T> moe_forward_reference(const MoEParams<T>& p, const Tensor<T>& x, const MoEOptions& opts,
                                FlopCounter* flops = nullptr) {
  const i64 S = x.dim(0), D = x.dim(1), N = p.n_experts;
  std::vector<double> logits = router_logits(p, x, flops);
  std::vector<int> expert_of;
  if (opts.mode == RoutingMode::sinkhorn) expert_of = sinkhorn(logits, S, N, opts.sinkhorn).expert_of;
  else expert_of = route_top1(logits, S, N);
  Tensor<T> y({S, D});
  for (i64 s = 0; s < S; ++s) {
    const int e = expert_of[static_cast<size_t>(s)];
    p.experts[static_cast<size_t>(e)].apply_token(
        std::span<const T>(x.data() + s * D, static_cast<size_t>(D)),
        std::span<T>(y.data() + s * D, static_cast<size_t>(D)), flops);
    T c = T(1);
    if (!opts.gate_one) {
      T dot = 0;
      for (i64 d = 0; d < D; ++d) dot += p.router.at(e, d) * x.at(s, d);
      c = sigmoid_scalar(dot);
    }
    for (i64 d = 0; d < D; ++d) y.at(s, d) *= c;
  }
  return y;
}

}  // namespace bm
