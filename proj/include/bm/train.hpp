#pragma once

// Toy training loop: synthetic sequence tasks, Adam with linear warmup and
// cosine decay, periodic checkpointing, and newline-delimited JSON metrics.
// The loop is architecture-agnostic; anything with ModelParams trains.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "bm/checkpoint.hpp"
#include "bm/model.hpp"
#include "json.hpp"

namespace bm {

enum class Task { copy, associative_recall };

inline const char* task_name(Task t) {
  return t == Task::copy ? "copy" : "associative-recall";
}

struct TrainConfig {
  Task task = Task::copy;
  int steps = 2000;
  int batch_size = 64;
  i64 seq_len = 16;
  double lr = 3e-3;
  double min_lr = 3e-4;
  double weight_decay = 0.0;
  double warmup_frac = 0.01;
  u64 seed = 0;
  int log_every = 50;
  int checkpoint_every = 1000;
  int eval_batches = 8;
  // optional early stopping: loss EMA falling to a fraction of the initial
  // loss, or exact-match accuracy (checked every eval_every steps) reaching
  // a target. 0 disables.
  double stop_loss_frac = 0;
  double stop_accuracy = 0;
  int eval_every = 0;

  void validate() const {
    if (steps < 0) throw ConfigError(strcat("steps must be >= 0, got ", steps));
    if (batch_size < 1) throw ConfigError(strcat("batch_size must be >= 1, got ", batch_size));
    if (min_lr > lr)
      throw ConfigError(strcat("min_lr ", min_lr, " must not exceed peak lr ", lr));
    if (weight_decay < 0) throw ConfigError(strcat("weight_decay must be >= 0, got ", weight_decay));
    if (seq_len < 5) throw ConfigError(strcat("seq_len must be >= 5 for the task templates, got ", seq_len));
  }
};

// inputs/targets are [B x L] flattened; scored marks the positions whose
// next-token prediction the task grades.
struct SyntheticBatch {
  int batch = 0;
  i64 seq_len = 0;
  std::vector<int> inputs;
  std::vector<int> targets;
  std::vector<char> scored;
};

// Token-space conventions: the two top ids are reserved (SEP = vocab-1,
// PAD = vocab-2); data tokens use the rest.
//   copy:   [p1..pP, SEP, p1..pP, PAD...]                scored on the repeat
//   recall: [k1,v1,...,kM,vM, SEP, q1,a1, q2,a2, ...]    scored on each answer
// Recall queries are the stored keys in a fresh random order, as many as fit;
// every query position is scored against the bound value.
inline SyntheticBatch make_task_batch(Task task, std::mt19937_64& rng, int batch, i64 seq_len,
                                      i64 vocab) {
  check(vocab >= 8, "task vocab must be >= 8, got ", vocab);
  check(seq_len >= 5, "seq_len must be >= 5, got ", seq_len);
  const int sep = static_cast<int>(vocab) - 1;
  const int pad = static_cast<int>(vocab) - 2;
  SyntheticBatch out;
  out.batch = batch;
  out.seq_len = seq_len;
  const size_t total = static_cast<size_t>(batch) * static_cast<size_t>(seq_len);
  out.inputs.assign(total, pad);
  out.targets.assign(total, pad);
  out.scored.assign(total, 0);

  for (int b = 0; b < batch; ++b) {
    int* in = out.inputs.data() + static_cast<i64>(b) * seq_len;
    if (task == Task::copy) {
      const i64 prefix = (seq_len - 1) / 2;
      std::uniform_int_distribution<int> tok(0, static_cast<int>(vocab) - 3);
      for (i64 t = 0; t < prefix; ++t) {
        in[t] = tok(rng);
        in[prefix + 1 + t] = in[t];
      }
      in[prefix] = sep;
      for (i64 t = prefix; t < 2 * prefix; ++t)
        out.scored[static_cast<size_t>(static_cast<i64>(b) * seq_len + t)] = 1;
    } else {
      const int n_keys = static_cast<int>((vocab - 2) / 2);
      const i64 n_pairs = std::min<i64>({8, static_cast<i64>(n_keys), std::max<i64>(1, (seq_len - 3) / 4)});
      check(n_pairs >= 1, "seq_len ", seq_len, " too short for associative recall");
      // distinct keys so the answer is unique
      std::vector<int> keys(static_cast<size_t>(n_keys));
      for (int k = 0; k < n_keys; ++k) keys[static_cast<size_t>(k)] = k;
      for (i64 p = 0; p < n_pairs; ++p) {
        std::uniform_int_distribution<i64> pick(p, n_keys - 1);
        std::swap(keys[static_cast<size_t>(p)], keys[static_cast<size_t>(pick(rng))]);
      }
      std::uniform_int_distribution<int> val(n_keys, 2 * n_keys - 1);
      std::vector<int> vals(static_cast<size_t>(n_pairs));
      for (i64 p = 0; p < n_pairs; ++p) {
        vals[static_cast<size_t>(p)] = val(rng);
        in[2 * p] = keys[static_cast<size_t>(p)];
        in[2 * p + 1] = vals[static_cast<size_t>(p)];
      }
      in[2 * n_pairs] = sep;
      // queries drawn uniformly from the stored pairs fill the tail; repeats
      // are allowed and every query position is scored
      const i64 n_queries = (seq_len - (2 * n_pairs + 1)) / 2;
      std::uniform_int_distribution<i64> qpick(0, n_pairs - 1);
      for (i64 qi = 0; qi < n_queries; ++qi) {
        const i64 q = qpick(rng);
        const i64 pos = 2 * n_pairs + 1 + 2 * qi;
        in[pos] = keys[static_cast<size_t>(q)];
        in[pos + 1] = vals[static_cast<size_t>(q)];
        out.scored[static_cast<size_t>(static_cast<i64>(b) * seq_len + pos)] = 1;
      }
    }
    // next-token targets
    int* tgt = out.targets.data() + static_cast<i64>(b) * seq_len;
    for (i64 t = 0; t + 1 < seq_len; ++t) tgt[t] = in[t + 1];
    tgt[seq_len - 1] = pad;
  }
  return out;
}

inline double lr_schedule(const TrainConfig& c, int step) {
  const int warmup = std::max(1, static_cast<int>(std::lround(c.warmup_frac * c.steps)));
  if (step < warmup) return c.lr * static_cast<double>(step + 1) / warmup;
  const double progress =
      c.steps == warmup ? 1.0 : static_cast<double>(step - warmup) / (c.steps - warmup);
  return c.min_lr + 0.5 * (c.lr - c.min_lr) * (1.0 + std::cos(progress * M_PI));
}

// Adam with decoupled weight decay. Moments live here, ordered by the model's
// parameter visitation order.
template <typename T>
struct Adam {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  int t = 0;
  std::vector<std::vector<double>> m, v;

  void step(std::vector<Tensor<T>*>& params, double lr, double weight_decay) {
    if (m.empty()) {
      for (Tensor<T>* p : params) {
        m.emplace_back(static_cast<size_t>(p->numel()), 0.0);
        v.emplace_back(static_cast<size_t>(p->numel()), 0.0);
      }
    }
    t += 1;
    const double bc1 = 1.0 - std::pow(beta1, t);
    const double bc2 = 1.0 - std::pow(beta2, t);
    for (size_t i = 0; i < params.size(); ++i) {
      Tensor<T>& p = *params[i];
      const std::vector<T>& g = p.grad();
      for (i64 j = 0; j < p.numel(); ++j) {
        const double gj = static_cast<double>(g[static_cast<size_t>(j)]);
        double& mj = m[i][static_cast<size_t>(j)];
        double& vj = v[i][static_cast<size_t>(j)];
        mj = beta1 * mj + (1.0 - beta1) * gj;
        vj = beta2 * vj + (1.0 - beta2) * gj * gj;
        const double update = (mj / bc1) / (std::sqrt(vj / bc2) + eps);
        double value = static_cast<double>(p.at(j));
        value -= lr * update + lr * weight_decay * value;
        p.at(j) = static_cast<T>(value);
      }
    }
  }
};

struct TrainPaths {
  std::string checkpoint_dir;  // empty: no checkpoints
  std::string metrics_path;    // empty: no metrics file
};

struct TrainResult {
  double initial_loss = 0;
  double final_loss = 0;
  double loss_ema = 0;
  double last_accuracy = -1;  // -1: never evaluated
  int steps_run = 0;
  bool stopped_early = false;
  std::string final_checkpoint;
};

// Fraction of scored positions where the greedy prediction equals the target.
template <typename T>
double exact_match_accuracy(ModelParams<T>& params, const TrainConfig& tc, u64 seed) {
  std::mt19937_64 rng(seed);
  i64 hits = 0, scored = 0;
  for (int b = 0; b < tc.eval_batches; ++b) {
    SyntheticBatch batch =
        make_task_batch(tc.task, rng, tc.batch_size, tc.seq_len, params.config.vocab_size);
    Tensor<T> logits = model_forward(params, std::span<const int>(batch.inputs), tc.batch_size);
    const i64 V = params.config.vocab_size;
    for (i64 s = 0; s < logits.dim(0); ++s) {
      if (!batch.scored[static_cast<size_t>(s)]) continue;
      i64 best = 0;
      for (i64 j = 1; j < V; ++j)
        if (logits.at(s, j) > logits.at(s, best)) best = j;
      hits += best == batch.targets[static_cast<size_t>(s)];
      scored += 1;
    }
  }
  return scored ? static_cast<double>(hits) / static_cast<double>(scored) : 0.0;
}

// Runs the loop on an existing model. Logs ndjson records
// {step, loss, lr, expert_counts} every log_every steps; checkpoints
// periodically; aborts (throws) on a non-finite loss with step diagnostics.
template <typename T>
TrainResult train_loop(ModelParams<T>& params, const TrainConfig& tc, const TrainPaths& paths = {}) {
  tc.validate();
  namespace fs = std::filesystem;
  std::ofstream metrics;
  if (!paths.metrics_path.empty()) {
    fs::create_directories(fs::path(paths.metrics_path).parent_path().empty()
                               ? fs::path(".")
                               : fs::path(paths.metrics_path).parent_path());
    metrics.open(paths.metrics_path, std::ios::trunc);
    check(metrics.good(), "cannot open metrics file: ", paths.metrics_path);
  }
  if (!paths.checkpoint_dir.empty()) fs::create_directories(paths.checkpoint_dir);

  std::vector<Tensor<T>*> plist;
  params.visit([&](const std::string&, Tensor<T>& t) { plist.push_back(&t); });
  Adam<T> adam;
  std::mt19937_64 rng(tc.seed);
  TrainResult result;

  auto save = [&](const std::string& tag) {
    if (paths.checkpoint_dir.empty()) return std::string();
    const std::string path = paths.checkpoint_dir + "/" + tag + ".ckpt";
    save_checkpoint(path, params);
    return path;
  };

  for (int step = 0; step < tc.steps; ++step) {
    SyntheticBatch batch =
        make_task_batch(tc.task, rng, tc.batch_size, tc.seq_len, params.config.vocab_size);
    Tape<T> tape;
    params.watch_all(tape);
    std::vector<RoutingStats> routing;
    ForwardInfo info;
    info.routing = &routing;
    Tensor<T> logits = model_forward(params, std::span<const int>(batch.inputs), tc.batch_size, &info);
    Tensor<T> loss = cross_entropy_masked(logits, batch.targets, batch.scored);
    const double loss_v = static_cast<double>(loss.at(0));
    if (!std::isfinite(loss_v))
      throw std::runtime_error(strcat("training diverged: loss ", loss_v, " at step ", step,
                                      " (task ", task_name(tc.task), ", lr ", lr_schedule(tc, step), ")"));
    if (step == 0) {
      result.initial_loss = loss_v;
      result.loss_ema = loss_v;
    }
    result.final_loss = loss_v;
    result.loss_ema = 0.9 * result.loss_ema + 0.1 * loss_v;
    tape.backward(loss);

    const bool logging = tc.log_every > 0 && (step % tc.log_every == 0 || step + 1 == tc.steps);
    if (logging) {
      // spot check: experts that served no token this step carry no gradient
      size_t moe_idx = 0;
      for (auto& pair : params.pairs) {
        if (!pair.moe) continue;
        const RoutingStats& stats = routing[moe_idx++];
        for (i64 e = 0; e < pair.moe->n_experts; ++e) {
          if (stats.tokens_per_expert[static_cast<size_t>(e)] != 0) continue;
          for (T g : pair.moe->experts[static_cast<size_t>(e)].w_in.grad())
            check(g == T(0), "idle expert received gradient at step ", step);
        }
      }
      if (metrics.is_open()) {
        nlohmann::json rec{{"step", step},
                           {"loss", loss_v},
                           {"lr", lr_schedule(tc, step)}};
        nlohmann::json counts = nlohmann::json::array();
        for (const RoutingStats& s : routing) counts.push_back(s.tokens_per_expert);
        rec["expert_counts"] = counts;
        metrics << rec.dump() << "\n";
        metrics.flush();
      }
    }

    adam.step(plist, lr_schedule(tc, step), tc.weight_decay);
    if (tc.checkpoint_every > 0 && (step + 1) % tc.checkpoint_every == 0)
      save("step-" + std::to_string(step + 1));
    result.steps_run = step + 1;

    if (tc.stop_loss_frac > 0 && result.loss_ema <= tc.stop_loss_frac * result.initial_loss) {
      result.stopped_early = true;
      break;
    }
    if (tc.eval_every > 0 && (step + 1) % tc.eval_every == 0) {
      result.last_accuracy = exact_match_accuracy(params, tc, tc.seed ^ 0xacc0ull);
      if (tc.stop_accuracy > 0 && result.last_accuracy >= tc.stop_accuracy) {
        result.stopped_early = true;
        break;
      }
    }
  }
  result.final_checkpoint = save("final");
  return result;
}

template <typename T>
TrainResult train_loop(const ModelConfig& mc, const TrainConfig& tc, u64 model_seed,
                       const TrainPaths& paths = {}) {
  auto params = ModelParams<T>::init(mc, model_seed);
  return train_loop(params, tc, paths);
}

}  // namespace bm
