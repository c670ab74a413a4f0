// Acceptance suite: one pass/fail line per criterion, nonzero exit if any
// fails. Run via ctest or directly:
//   acceptance --cli path/to/blackmamba [--skip-slow]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <random>
#include <string>
#include <vector>

#include "bm/accounting.hpp"
#include "bm/bench.hpp"
#include "bm/checkpoint.hpp"
#include "bm/mamba.hpp"
#include "bm/model.hpp"
#include "bm/sinkhorn.hpp"
#include "bm/train.hpp"

using namespace bm;
using clock_t_ = std::chrono::steady_clock;

namespace {

double elapsed(clock_t_::time_point t0) {
  return std::chrono::duration<double>(clock_t_::now() - t0).count();
}

struct Criterion {
  int id;
  std::string title;
  bool pass;
  std::string detail;
  double seconds;
};

std::vector<Criterion> g_results;

void report(int id, const std::string& title, bool pass, const std::string& detail, double secs) {
  g_results.push_back({id, title, pass, detail, secs});
  std::printf("[%s] criterion %2d: %s — %s (%.1fs)\n", pass ? "PASS" : "FAIL", id, title.c_str(),
              detail.c_str(), secs);
  std::fflush(stdout);
}

template <typename T>
Tensor<T> run_streaming(const MambaParams<T>& p, const Tensor<T>& x) {
  const i64 L = x.dim(0), D = x.dim(1);
  MambaState<T> st = MambaState<T>::init(p.dims);
  Tensor<T> y({L, D});
  for (i64 t = 0; t < L; ++t)
    mamba_step(p, st, std::span<const T>(x.data() + t * D, static_cast<size_t>(D)),
               std::span<T>(y.data() + t * D, static_cast<size_t>(D)));
  return y;
}

// 1. Streaming/scan equivalence over 20 random tiny configs at L=64.
void criterion_1() {
  const auto t0 = clock_t_::now();
  std::mt19937_64 meta(20240201);
  double worst_double = 0, worst_single = 0;
  for (int trial = 0; trial < 20; ++trial) {
    std::uniform_int_distribution<i64> d_pick(4, 12), h_pick(2, 8), c_pick(2, 5), r_pick(1, 4);
    MambaDims dims;
    dims.d_model = d_pick(meta);
    dims.d_inner = 2 * dims.d_model;
    dims.d_state = h_pick(meta);
    dims.dt_rank = r_pick(meta);
    dims.d_conv = c_pick(meta);
    {
      auto p = MambaParams<double>::init(dims, meta(), "m");
      Tensor<double> x = randn<double>({64, dims.d_model}, 1.0, meta(), "x");
      Tensor<double> seq = mamba_forward(p, x);
      Tensor<double> str = run_streaming(p, x);
      for (i64 i = 0; i < seq.numel(); ++i)
        worst_double = std::max(worst_double, std::abs(seq.at(i) - str.at(i)));
    }
    {
      auto p = MambaParams<float>::init(dims, meta(), "m");
      Tensor<float> x = randn<float>({64, dims.d_model}, 1.0, meta(), "x");
      Tensor<float> a = mamba_forward(p, x, 1, nullptr, ScanMode::sequential);
      Tensor<float> b = mamba_forward(p, x, 1, nullptr, ScanMode::associative);
      for (i64 i = 0; i < a.numel(); ++i) {
        const float scale = std::max({std::abs(a.at(i)), std::abs(b.at(i)), 1.0f});
        worst_single =
            std::max(worst_single, static_cast<double>(std::abs(a.at(i) - b.at(i)) / scale));
      }
    }
  }
  const double secs = elapsed(t0);
  const bool pass = worst_double < 1e-10 && worst_single < 1e-6 && secs < 10;
  report(1, "streaming/scan equivalence",
         pass,
         strcat("20 configs, L=64: max |step-seq| ", worst_double, " (tol 1e-10), max assoc rel ",
                worst_single, " (tol 1e-6)"),
         secs);
}

// 2. dt -> 0 leaves the hidden state bitwise unchanged.
void criterion_2() {
  const auto t0 = clock_t_::now();
  bool bitwise = true;
  std::mt19937_64 meta(77);
  for (int trial = 0; trial < 10; ++trial) {
    MambaDims d{6, 12, 4, 2, 4};
    auto p = MambaParams<double>::init(d, meta(), "m");
    MambaState<double> st = MambaState<double>::init(d);
    std::mt19937_64 rng(meta());
    std::normal_distribution<double> g(0, 1);
    std::vector<double> x(6), y(6);
    for (int t = 0; t < 5; ++t) {
      for (auto& v : x) v = g(rng);
      mamba_step(p, st, std::span<const double>(x), std::span<double>(y));
    }
    std::vector<double> before = st.h.vec();
    for (i64 i = 0; i < d.d_inner; ++i) p.dt_bias.at(i) = -1e9;  // softplus underflows to exact 0
    for (int t = 0; t < 4; ++t) {
      for (auto& v : x) v = g(rng);
      mamba_step(p, st, std::span<const double>(x), std::span<double>(y));
      bitwise = bitwise && std::memcmp(st.h.data(), before.data(), sizeof(double) * before.size()) == 0;
    }
  }
  report(2, "dt->0 fixed point", bitwise,
         bitwise ? "hidden state bitwise unchanged with dt clamped to zero (10 trials)"
                 : "hidden state changed under dt = 0",
         elapsed(t0));
}

// 3. Sinkhorn constraints on 100 random Gaussian logit matrices.
void criterion_3() {
  const auto t0 = clock_t_::now();
  std::mt19937_64 rng(31337);
  std::normal_distribution<double> g(0, 1);
  const i64 S = 256, N = 8;
  int ok = 0;
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> logits(static_cast<size_t>(S * N));
    for (auto& v : logits) v = g(rng);
    RoutePlan plan = sinkhorn(logits, S, N);
    double violation = 0;
    for (i64 s = 0; s < S; ++s) {
      double row = 0;
      for (i64 e = 0; e < N; ++e) row += plan.pi[static_cast<size_t>(s * N + e)];
      violation = std::max(violation, std::abs(row - 1.0));
    }
    for (i64 e = 0; e < N; ++e) {
      double col = 0;
      for (i64 s = 0; s < S; ++s) col += plan.pi[static_cast<size_t>(s * N + e)];
      violation = std::max(violation, std::abs(col - double(S) / N) / (double(S) / N));
    }
    worst = std::max(worst, violation);
    ok += plan.converged && violation <= 1e-3;
  }
  report(3, "sinkhorn constraint satisfaction", ok == 100,
         strcat(ok, "/100 trials within 1e-3; worst violation ", worst), elapsed(t0));
}

// 4. Fast-init iteration dominance, exactly as stated. The fast-init median
// bound conflicts with the joint-constraint stopping rule (see the project
// notes); the honest measurement is reported either way.
void criterion_4() {
  const auto t0 = clock_t_::now();
  std::mt19937_64 rng(8675309);
  std::normal_distribution<double> g(0, 1);
  const i64 S = 256, N = 8;
  std::vector<int> fast_iters, uni_iters;
  int fast_fewer = 0;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> logits(static_cast<size_t>(S * N));
    for (auto& v : logits) v = g(rng);
    SinkhornConfig cf;
    cf.init = SinkhornInit::fast;
    SinkhornConfig cu;
    cu.init = SinkhornInit::uniform;
    RoutePlan pf = sinkhorn(logits, S, N, cf);
    RoutePlan pu = sinkhorn(logits, S, N, cu);
    fast_iters.push_back(pf.iters_used);
    uni_iters.push_back(pu.iters_used);
    fast_fewer += pf.iters_used < pu.iters_used;
  }
  std::sort(fast_iters.begin(), fast_iters.end());
  std::sort(uni_iters.begin(), uni_iters.end());
  const int fast_median = fast_iters[100];
  const int uni_median = uni_iters[100];
  const double secs = elapsed(t0);
  const bool pass = fast_median <= 2 && uni_median >= 5 && fast_fewer >= 190 && secs < 30;
  report(4, "fast-init iteration dominance", pass,
         strcat("median iterations fast=", fast_median, " (bound <=2), uniform=", uni_median,
                " (bound >=5), fast strictly fewer in ", fast_fewer,
                "/200 (bound >=190); both inits converge at the kernel's rate under the "
                "joint-constraint stopping rule, so the stated fast-init bound is not attainable"),
         secs);
}

// 5. Reverse-mode gradients vs central differences for every block type.
void criterion_5() {
  const auto t0 = clock_t_::now();
  std::mt19937_64 rng(1212);
  double worst = 0;
  i64 coords_done = 0;

  auto spot_params = [&](auto& owner, const std::function<double()>& loss, int per_param_coords) {
    owner.visit("p", [&](const std::string&, Tensor<double>& t) {
      std::uniform_int_distribution<i64> pick(0, t.numel() - 1);
      for (int c = 0; c < per_param_coords; ++c) {
        const i64 i = pick(rng);
        const double orig = t.at(i), h = 1e-5;
        t.at(i) = orig + h;
        const double fp = loss();
        t.at(i) = orig - h;
        const double fm = loss();
        t.at(i) = orig;
        const double fd = (fp - fm) / (2 * h);
        const double ad = t.grad()[static_cast<size_t>(i)];
        worst = std::max(worst, std::abs(ad - fd) / std::max({std::abs(ad), std::abs(fd), 1e-6}));
        coords_done++;
      }
    });
  };

  {  // mamba block: 12 params x 5 coords = 60
    MambaDims d{4, 8, 3, 2, 3};
    auto p = MambaParams<double>::init(d, 17, "m");
    Tensor<double> x = randn<double>({5, 4}, 1.0, 19, "x");
    Tensor<double> w = randn<double>({5, 4}, 1.0, 21, "w");
    auto loss = [&]() {
      Tensor<double> y = mamba_forward(p, x);
      double acc = 0;
      for (i64 i = 0; i < y.numel(); ++i) acc += y.at(i) * w.at(i);
      return acc;
    };
    Tape<double> tape;
    p.watch_all(tape);
    tape.backward(sum_all(mul(mamba_forward(p, x), w)));
    spot_params(p, loss, 5);
  }
  for (ExpertKind kind : {ExpertKind::swiglu, ExpertKind::standard}) {  // experts: >= 50 each
    auto e = ExpertParams<double>::init(kind, 5, 10, 23, "e");
    Tensor<double> x = randn<double>({6, 5}, 1.0, 25, "x");
    Tensor<double> w = randn<double>({6, 5}, 1.0, 27, "w");
    auto loss = [&]() {
      Tensor<double> y = e.apply(x);
      double acc = 0;
      for (i64 i = 0; i < y.numel(); ++i) acc += y.at(i) * w.at(i);
      return acc;
    };
    Tape<double> tape;
    e.visit("e", [&](const std::string&, Tensor<double>& t) { tape.watch(t); });
    tape.backward(sum_all(mul(e.apply(x), w)));
    e.visit("e", [&](const std::string&, Tensor<double>& t) {
      std::uniform_int_distribution<i64> pick(0, t.numel() - 1);
      for (int c = 0; c < 20; ++c) {
        const i64 i = pick(rng);
        const double orig = t.at(i), h = 1e-5;
        t.at(i) = orig + h;
        const double fp = loss();
        t.at(i) = orig - h;
        const double fm = loss();
        t.at(i) = orig;
        const double fd = (fp - fm) / (2 * h);
        const double ad = t.grad()[static_cast<size_t>(i)];
        worst = std::max(worst, std::abs(ad - fd) / std::max({std::abs(ad), std::abs(fd), 1e-6}));
        coords_done++;
      }
    });
  }
  {  // attention layer: 4 params x 13 coords = 52
    auto p = AttnParams<double>::init(6, 2, 29, "a");
    Tensor<double> x = randn<double>({5, 6}, 1.0, 31, "x");
    Tensor<double> w = randn<double>({5, 6}, 1.0, 33, "w");
    auto loss = [&]() {
      Tensor<double> y = attention_forward(p, x);
      double acc = 0;
      for (i64 i = 0; i < y.numel(); ++i) acc += y.at(i) * w.at(i);
      return acc;
    };
    Tape<double> tape;
    p.visit("a", [&](const std::string&, Tensor<double>& t) { tape.watch(t); });
    tape.backward(sum_all(mul(attention_forward(p, x), w)));
    spot_params(p, loss, 13);
  }
  {  // full tiny model loss: 2 coords per parameter array (>= 50 total)
    ModelConfig c = preset_config("tiny-mamba-moe");
    c.d_model = 8;
    c.n_layers = 2;
    c.ffn_hidden = 12;
    c.n_experts = 2;
    c.vocab_size = 12;
    auto m = ModelParams<double>::init(c, 35);
    std::vector<int> toks = {1, 4, 2, 9, 7, 0};
    std::vector<int> targets = {4, 2, 9, 7, 0, 3};
    auto loss = [&]() {
      Tensor<double> logits = model_forward(m, std::span<const int>(toks));
      return cross_entropy_loss(logits, targets).at(0);
    };
    Tape<double> tape;
    m.watch_all(tape);
    {
      Tensor<double> logits = model_forward(m, std::span<const int>(toks));
      tape.backward(cross_entropy_loss(logits, targets));
    }
    m.visit([&](const std::string&, Tensor<double>& t) {
      std::uniform_int_distribution<i64> pick(0, t.numel() - 1);
      for (int c2 = 0; c2 < 2; ++c2) {
        const i64 i = pick(rng);
        const double orig = t.at(i), h = 1e-5;
        t.at(i) = orig + h;
        const double fp = loss();
        t.at(i) = orig - h;
        const double fm = loss();
        t.at(i) = orig;
        const double fd = (fp - fm) / (2 * h);
        const double ad = t.grad()[static_cast<size_t>(i)];
        worst = std::max(worst, std::abs(ad - fd) / std::max({std::abs(ad), std::abs(fd), 1e-6}));
        coords_done++;
      }
    });
  }
  report(5, "gradient correctness (all block types)", worst < 1e-4,
         strcat("worst relative error ", worst, " over ", coords_done, " coordinates (tol 1e-4)"),
         elapsed(t0));
}

// 6. FLOP and parameter reconciliation.
void criterion_6() {
  const auto t0 = clock_t_::now();
  const i64 D = 16;
  auto moe = MoEParams<float>::init(ExpertKind::standard, 1, D, 4 * D, 3, "moe");
  Tensor<float> x = randn<float>({1, D}, 1.0, 5, "x");
  FlopCounter fc;
  MoEOptions mo;
  moe_forward(moe, x, mo, nullptr, &fc);
  const bool moe_exact = fc.total == static_cast<u64>(moe_flops_formula(D, 1));

  FlopReport rep = preset_report("tiny-mamba-moe-std");
  const bool within_2pct = rep.block_discrepancy_ratio < 0.02;
  i64 mixer_residuals = 0;
  for (const auto& a : rep.residual_terms)
    if (a.name.find("mixer.") != std::string::npos) mixer_residuals += a.count;
  const bool itemized = rep.exact_blocks_total - rep.formula_blocks_total == mixer_residuals;

  auto params = ModelParams<float>::init(rep.config, 9);
  ExactCount from_params = exact_count(params);
  ExactCount from_shapes = exact_count_shapes(enumerate_param_shapes(rep.config));
  const bool enumeration_exact =
      from_params.total == from_shapes.total && from_params.total == params.param_count();

  const bool pass = moe_exact && within_2pct && itemized && enumeration_exact;
  report(6, "FLOP/param reconciliation", pass,
         strcat("expert-layer formula ", moe_exact ? "matches instrumented count exactly" : "MISMATCH",
                "; param formula vs exact gap ", rep.block_discrepancy_ratio * 100,
                "% (tol 2%), residual terms ", itemized ? "itemized exactly" : "UNEXPLAINED",
                "; enumeration ", enumeration_exact ? "exact" : "MISMATCH"),
         elapsed(t0));
}

// 7. Full-size preset sanity against the forward/total naming convention.
void criterion_7() {
  const auto t0 = clock_t_::now();
  FlopReport r = preset_report("340M/1.5B");
  const bool total_ok = r.exact_total >= 1300000000 && r.exact_total <= 1700000000;
  const bool fwd_ok = r.exact_forward_total >= 300000000 && r.exact_forward_total <= 400000000;
  report(7, "preset sanity (340M/1.5B)", total_ok && fwd_ok,
         strcat("total ", r.exact_total, " in [1.3e9, 1.7e9]: ", total_ok ? "yes" : "NO",
                "; forward ", r.exact_forward_total, " in [3e8, 4e8]: ", fwd_ok ? "yes" : "NO"),
         elapsed(t0));
}

// 8. Latency/memory shape at matched tiny width and depth.
void criterion_8() {
  const auto t0 = clock_t_::now();
  BenchOptions opts;
  opts.lengths = {128, 512, 2048};
  opts.repeats = 5;
  opts.warmup = 3;
  opts.window = 32;

  ModelConfig cm = preset_config("tiny-mamba-moe");
  auto ms = latency_sweep(cm, opts, 4242);
  const double mamba_ratio = ms[2].ns_per_token / ms[0].ns_per_token;
  const bool mamba_time_ok = mamba_ratio <= 1.5;
  const bool mamba_bytes_ok = ms[0].state_bytes == ms[2].state_bytes && ms[0].state_bytes > 0;

  ModelConfig ct = preset_config("tiny-transformer");
  auto ts = latency_sweep(ct, opts, 4242);
  const bool tf_increasing =
      ts[0].ns_per_token < ts[1].ns_per_token && ts[1].ns_per_token < ts[2].ns_per_token;
  const bool kv_linear = ts[1].state_bytes == 4 * ts[0].state_bytes &&
                         ts[2].state_bytes == 16 * ts[0].state_bytes;

  const double secs = elapsed(t0);
  const bool pass = mamba_time_ok && mamba_bytes_ok && tf_increasing && kv_linear && secs < 300;
  report(8, "latency/memory shape", pass,
         strcat("mamba-moe t(2048)/t(128) = ", mamba_ratio, " (<=1.5), state bytes constant: ",
                mamba_bytes_ok ? "yes" : "NO", "; transformer ns/token ", ts[0].ns_per_token, " < ",
                ts[1].ns_per_token, " < ", ts[2].ns_per_token,
                tf_increasing ? " strictly increasing" : " NOT increasing", ", KV bytes 4x/16x: ",
                kv_linear ? "exact" : "NO"),
         secs);
}

// 9. Learning demonstration: copy for both architectures, recall to 90%.
void criterion_9() {
  const auto t0 = clock_t_::now();
  std::string detail;
  bool pass = true;

  auto run_copy = [&](const char* preset) {
    ModelConfig mc = preset_config(preset);
    mc.vocab_size = 64;
    TrainConfig tc;
    tc.task = Task::copy;
    tc.steps = 2000;
    tc.batch_size = 64;
    tc.seq_len = 16;
    tc.lr = 3e-3;
    tc.min_lr = 3e-4;
    tc.seed = 1;
    tc.log_every = 0;
    tc.checkpoint_every = 0;
    tc.stop_loss_frac = 0.45;  // EMA comfortably below the 50% bound
    auto params = ModelParams<float>::init(mc, 1);
    TrainResult r = train_loop(params, tc);
    const bool ok = r.loss_ema <= 0.5 * r.initial_loss;
    pass = pass && ok;
    detail += strcat(preset, " copy: loss ", r.initial_loss, " -> ema ", r.loss_ema, " in ",
                     r.steps_run, " steps (bound: half within 2000): ", ok ? "yes" : "NO", "; ");
  };
  run_copy("tiny-mamba-moe");
  run_copy("tiny-mamba");

  {
    ModelConfig mc = preset_config("tiny-mamba-moe");
    mc.vocab_size = 64;
    TrainConfig tc;
    tc.task = Task::associative_recall;
    tc.steps = 5000;
    tc.batch_size = 16;
    tc.seq_len = 64;
    tc.lr = 4e-3;
    tc.min_lr = 1e-3;
    tc.seed = 1;
    tc.log_every = 0;
    tc.checkpoint_every = 0;
    tc.eval_every = 250;
    tc.eval_batches = 4;
    tc.stop_accuracy = 0.9;
    auto params = ModelParams<float>::init(mc, 1);
    TrainResult r = train_loop(params, tc);
    const double acc = r.last_accuracy >= 0 ? r.last_accuracy
                                            : exact_match_accuracy(params, tc, tc.seed ^ 0xacc0ull);
    const bool ok = acc >= 0.9;
    pass = pass && ok;
    detail += strcat("recall (L=64, vocab=64): accuracy ", acc, " after ", r.steps_run,
                     " steps (bound: >=0.9 within 5000): ", ok ? "yes" : "NO");
  }

  const double secs = elapsed(t0);
  pass = pass && secs < 900;
  report(9, "learning demonstration", pass, strcat(detail, "; runtime ", secs, "s (<900s)"), secs);
}

// 10. Variant collapse, bit-identical logits in double precision.
void criterion_10() {
  const auto t0 = clock_t_::now();
  std::mt19937_64 rng(55);
  std::uniform_int_distribution<int> tok(0, 31);
  auto tokens_of = [&](i64 n) {
    std::vector<int> t(static_cast<size_t>(n));
    for (auto& v : t) v = tok(rng);
    return t;
  };

  auto collapse = [&](Variant moe_variant, Variant dense_variant) {
    ModelConfig cm;
    cm.variant = moe_variant;
    cm.n_layers = 4;
    cm.d_model = 16;
    cm.state_size = 4;
    cm.dt_rank = 2;
    cm.conv_dim = 4;
    cm.n_experts = 1;
    cm.ffn_hidden = 32;
    cm.vocab_size = 32;
    cm.max_seq_len = 64;
    cm.n_heads = 2;
    cm.gate_mode = GateMode::one;
    ModelConfig cd = cm;
    cd.variant = dense_variant;
    cd.gate_mode = GateMode::sigmoid;
    auto a = ModelParams<double>::init(cm, 909);
    auto b = ModelParams<double>::init(cd, 909);
    auto toks = tokens_of(24);
    Tensor<double> la = model_forward(a, std::span<const int>(toks));
    Tensor<double> lb = model_forward(b, std::span<const int>(toks));
    return std::memcmp(la.data(), lb.data(), sizeof(double) * static_cast<size_t>(la.numel())) == 0;
  };

  const bool mamba_ok = collapse(Variant::mamba_moe, Variant::mamba);
  const bool tf_ok = collapse(Variant::transformer_moe, Variant::transformer);
  report(10, "variant collapse (bit-identical)", mamba_ok && tf_ok,
         strcat("mamba-moe(E=1, gate=1) == mamba: ", mamba_ok ? "bitwise" : "DIFFERS",
                "; transformer-moe(E=1, gate=1) == transformer: ", tf_ok ? "bitwise" : "DIFFERS"),
         elapsed(t0));
}

// 11. The selfcheck subcommand finishes under 60 s and exits 0.
void criterion_11(const std::string& cli) {
  const auto t0 = clock_t_::now();
  if (cli.empty()) {
    report(11, "selfcheck subcommand", false, "no --cli path given", 0);
    return;
  }
  const std::string cmd = cli + " selfcheck > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  const double secs = elapsed(t0);
  const bool exit_ok = rc != -1 && WIFEXITED(rc) && WEXITSTATUS(rc) == 0;
  report(11, "selfcheck subcommand", exit_ok && secs < 60,
         strcat("exit status ", exit_ok ? 0 : rc, ", wall time ", secs, "s (<60s)"), secs);
}

}  // namespace

int main(int argc, char** argv) {
  std::string cli;
  bool skip_slow = false;
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--cli") == 0 && i + 1 < argc) cli = argv[++i];
    if (std::strcmp(argv[i], "--skip-slow") == 0) skip_slow = true;
  }

  criterion_1();
  criterion_2();
  criterion_3();
  criterion_4();
  criterion_5();
  criterion_6();
  criterion_7();
  if (!skip_slow) criterion_8();
  if (!skip_slow) criterion_9();
  criterion_10();
  criterion_11(cli);

  int failed = 0;
  for (const auto& c : g_results) failed += !c.pass;
  std::printf("%zu criteria run, %d failed\n", g_results.size(), failed);
  return failed == 0 ? 0 : 1;
}
