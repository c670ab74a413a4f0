#pragma once

// Doubly-constrained router normalization. Logits L[s][e] are rescaled into
// an assignment matrix pi = K ∘ (d0 ⊗ d1), K = exp(temperature * L), with
//   sum_e pi[s][e] = 1        for every sample s
//   sum_s pi[s][e] = S/N      for every expert e
// solved by alternating fixed-point rescaling. The fast initialization makes
// the per-expert balance constraint hold exactly before the first iteration,
// which collapses the iteration count.

#include <utility>
#include <vector>

#include "bm/tensor.hpp"

namespace bm {

enum class SinkhornInit {
  uniform,      // d0 = d1 = 1
  fast,         // per-expert softmax over samples scaled to S/N: balanced by construction
  fast_literal  // the unmodified published form, kept for comparison runs
};

struct SinkhornConfig {
  double temperature = 2.0;
  SinkhornInit init = SinkhornInit::fast;
  double tol = 1e-3;
  int max_iters = 100;
};

struct RoutePlan {
  i64 n_samples = 0;
  i64 n_experts = 0;
  std::vector<double> pi;      // [S x N], row-major
  std::vector<int> expert_of;  // [S], top-1 choice, ties to the lowest index
  int iters_used = 0;
  double residual = 0;         // max relative violation over both constraint families
  bool converged = false;
};

// logits is [S x N] row-major. Non-finite logits are rejected. A plan that
// fails to converge within max_iters is returned with converged=false and the
// final residual set; the caller decides what to do with it.
RoutePlan sinkhorn(const std::vector<double>& logits, i64 n_samples, i64 n_experts,
                   const SinkhornConfig& cfg = {});

// Initialization factors (d0: per expert, d1: per sample) that satisfy the
// per-expert constraint sum_s pi[s][e] = S/N exactly before any iteration.
std::pair<std::vector<double>, std::vector<double>> fast_init(const std::vector<double>& logits,
                                                              i64 n_samples, i64 n_experts,
                                                              double temperature);

// Argmax per row; exact ties break to the lowest expert index.
std::vector<int> route_top1(const std::vector<double>& probs, i64 n_samples, i64 n_experts);

const char* sinkhorn_init_name(SinkhornInit init);

// Gating coefficients: coeff[s] = sigmoid(router_w[expert_of[s]] . x[s]).
// This is the only differentiable path through routing; the assignment matrix
// and the argmax are stop-gradient by contract.
template <typename T>
Tensor<T> gate_coefficients(const Tensor<T>& router_w, const Tensor<T>& x,
                            const std::vector<int>& expert_of) {
  check(router_w.rank() == 2 && x.rank() == 2 && router_w.dim(1) == x.dim(1),
        "gate_coefficients: router ", shape_str(router_w.shape()), " vs tokens ", shape_str(x.shape()));
  std::vector<i64> rows(expert_of.begin(), expert_of.end());
  return sigmoid(rows_dot(gather_rows(router_w, rows), x));
}

}  // namespace bm
