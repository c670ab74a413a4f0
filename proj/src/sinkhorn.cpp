#include "bm/sinkhorn.hpp"

#include <algorithm>
#include <cmath>

namespace bm {

namespace {

// K = exp(tau*L - shift), shift = global max of tau*L. The shift is absorbed
// into the factors, so pi is unchanged by it.
std::vector<double> scaled_kernel(const std::vector<double>& logits, i64 S, i64 N, double tau) {
  check(static_cast<i64>(logits.size()) == S * N, "sinkhorn: logits size ", logits.size(), " vs ", S, "x",
        N);
  check(S >= 1 && N >= 1, "sinkhorn: need S >= 1 and N >= 1");
  double m = -std::numeric_limits<double>::infinity();
  for (double v : logits) {
    check(std::isfinite(v), "sinkhorn: non-finite logit");
    m = std::max(m, tau * v);
  }
  std::vector<double> k(logits.size());
  for (size_t i = 0; i < logits.size(); ++i) k[i] = std::exp(tau * logits[i] - m);
  return k;
}

constexpr double kDenomFloor = 1e-300;

}  // namespace

std::pair<std::vector<double>, std::vector<double>> fast_init(const std::vector<double>& logits,
                                                              i64 S, i64 N, double temperature) {
  std::vector<double> k = scaled_kernel(logits, S, N, temperature);
  std::vector<double> d0(static_cast<size_t>(N));
  std::vector<double> d1(static_cast<size_t>(S), 1.0);
  const double target = double(S) / double(N);
  for (i64 e = 0; e < N; ++e) {
    double col = 0;
    for (i64 s = 0; s < S; ++s) col += k[static_cast<size_t>(s * N + e)];
    d0[static_cast<size_t>(e)] = target / std::max(col, kDenomFloor);
  }
  return {d0, d1};
}

std::vector<int> route_top1(const std::vector<double>& probs, i64 S, i64 N) {
  check(static_cast<i64>(probs.size()) == S * N, "route_top1: size ", probs.size(), " vs ", S, "x", N);
  std::vector<int> out(static_cast<size_t>(S));
  for (i64 s = 0; s < S; ++s) {
    const double* row = probs.data() + s * N;
    int best = 0;
    for (i64 e = 1; e < N; ++e)
      if (row[e] > row[best]) best = static_cast<int>(e);
    out[static_cast<size_t>(s)] = best;
  }
  return out;
}

const char* sinkhorn_init_name(SinkhornInit init) {
  switch (init) {
    case SinkhornInit::uniform: return "uniform";
    case SinkhornInit::fast: return "fast";
    case SinkhornInit::fast_literal: return "fast-literal";
  }
  return "?";
}

RoutePlan sinkhorn(const std::vector<double>& logits, i64 S, i64 N, const SinkhornConfig& cfg) {
  std::vector<double> k = scaled_kernel(logits, S, N, cfg.temperature);
  const double col_target = double(S) / double(N);

  std::vector<double> d0(static_cast<size_t>(N), 1.0);
  std::vector<double> d1(static_cast<size_t>(S), 1.0);
  switch (cfg.init) {
    case SinkhornInit::uniform:
      break;
    case SinkhornInit::fast:
      for (i64 e = 0; e < N; ++e) {
        double col = 0;
        for (i64 s = 0; s < S; ++s) col += k[static_cast<size_t>(s * N + e)];
        d0[static_cast<size_t>(e)] = col_target / std::max(col, kDenomFloor);
      }
      break;
    case SinkhornInit::fast_literal:
      // As published: d0 = 1, d1_s = (S/N) * sum_e K[s][e]. Does not satisfy
      // either constraint family; selectable for the comparison study only.
      for (i64 s = 0; s < S; ++s) {
        double row = 0;
        for (i64 e = 0; e < N; ++e) row += k[static_cast<size_t>(s * N + e)];
        d1[static_cast<size_t>(s)] = col_target * row;
      }
      break;
  }

  auto residual = [&]() {
    double worst = 0;
    for (i64 s = 0; s < S; ++s) {
      double row = 0;
      for (i64 e = 0; e < N; ++e)
        row += k[static_cast<size_t>(s * N + e)] * d0[static_cast<size_t>(e)];
      row *= d1[static_cast<size_t>(s)];
      worst = std::max(worst, std::abs(row - 1.0));
    }
    for (i64 e = 0; e < N; ++e) {
      double col = 0;
      for (i64 s = 0; s < S; ++s)
        col += k[static_cast<size_t>(s * N + e)] * d1[static_cast<size_t>(s)];
      col *= d0[static_cast<size_t>(e)];
      worst = std::max(worst, std::abs(col - col_target) / col_target);
    }
    return worst;
  };

  RoutePlan plan;
  plan.n_samples = S;
  plan.n_experts = N;
  plan.iters_used = 0;
  double r = residual();
  while (r > cfg.tol && plan.iters_used < cfg.max_iters) {
    // row family: sum_e pi[s][e] = 1
    for (i64 s = 0; s < S; ++s) {
      double row = 0;
      for (i64 e = 0; e < N; ++e)
        row += k[static_cast<size_t>(s * N + e)] * d0[static_cast<size_t>(e)];
      d1[static_cast<size_t>(s)] = 1.0 / std::max(row, kDenomFloor);
    }
    // column family: sum_s pi[s][e] = S/N
    for (i64 e = 0; e < N; ++e) {
      double col = 0;
      for (i64 s = 0; s < S; ++s)
        col += k[static_cast<size_t>(s * N + e)] * d1[static_cast<size_t>(s)];
      d0[static_cast<size_t>(e)] = col_target / std::max(col, kDenomFloor);
    }
    plan.iters_used += 1;
    r = residual();
  }

  plan.residual = r;
  plan.converged = r <= cfg.tol;
  plan.pi.resize(static_cast<size_t>(S * N));
  for (i64 s = 0; s < S; ++s)
    for (i64 e = 0; e < N; ++e)
      plan.pi[static_cast<size_t>(s * N + e)] =
          k[static_cast<size_t>(s * N + e)] * d0[static_cast<size_t>(e)] * d1[static_cast<size_t>(s)];
  plan.expert_of = route_top1(plan.pi, S, N);
  return plan;
}

}  // namespace bm
