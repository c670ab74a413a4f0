#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "bm/accounting.hpp"
#include "bm/train.hpp"
#include "doctest.h"

using namespace bm;

TEST_SUITE_BEGIN("train");

namespace {

ModelConfig small_train_config() {
  ModelConfig c = preset_config("tiny-mamba-moe");
  c.d_model = 32;
  c.ffn_hidden = 64;
  c.vocab_size = 64;
  return c;
}

}  // namespace

TEST_CASE("copy batches repeat the prefix after the delimiter") {
  std::mt19937_64 rng(3);
  SyntheticBatch b = make_task_batch(Task::copy, rng, 2, 9, 32);
  const int sep = 31;
  for (int s = 0; s < 2; ++s) {
    const int* in = b.inputs.data() + s * 9;
    CHECK(in[4] == sep);
    for (int t = 0; t < 4; ++t) CHECK(in[5 + t] == in[t]);
    // scored positions predict exactly the repeated prefix
    for (i64 t = 0; t < 9; ++t) {
      const size_t idx = static_cast<size_t>(s * 9 + t);
      if (t >= 4 && t < 8) {
        CHECK(b.scored[idx] == 1);
        CHECK(b.targets[idx] == in[t - 4]);
      } else {
        CHECK(b.scored[idx] == 0);
      }
    }
  }
}

TEST_CASE("recall batches score the bound value at every query position") {
  std::mt19937_64 rng(5);
  SyntheticBatch b = make_task_batch(Task::associative_recall, rng, 4, 24, 64);
  // L=24 holds 5 pairs + SEP + 6 query/answer slots
  for (int s = 0; s < 4; ++s) {
    const int* in = b.inputs.data() + s * 24;
    const int n_keys = 31;
    i64 scored_count = 0;
    for (i64 t = 0; t < 24; ++t) {
      const size_t idx = static_cast<size_t>(s * 24 + t);
      if (!b.scored[idx]) continue;
      scored_count++;
      const int qk = in[t];  // scored position holds a query key
      CHECK(qk < n_keys);
      // the target is the value bound to that key in the pair region
      int bound = -1;
      for (i64 p = 0; p + 1 < 10; p += 2)
        if (in[p] == qk) bound = in[p + 1];
      CHECK(bound == b.targets[idx]);
    }
    CHECK(scored_count == 6);
  }

  // the minimal template: one pair, one query
  std::mt19937_64 rng2(9);
  SyntheticBatch tiny = make_task_batch(Task::associative_recall, rng2, 1, 5, 64);
  i64 n_scored = 0;
  for (char c : tiny.scored) n_scored += c;
  CHECK(n_scored == 1);
  CHECK(tiny.inputs[3] == tiny.inputs[0]);  // the only key is queried
  CHECK(tiny.targets[3] == tiny.inputs[1]);
}

TEST_CASE("batches are reproducible under a fixed seed") {
  std::mt19937_64 a(42), b(42);
  SyntheticBatch x = make_task_batch(Task::associative_recall, a, 3, 32, 64);
  SyntheticBatch y = make_task_batch(Task::associative_recall, b, 3, 32, 64);
  CHECK(x.inputs == y.inputs);
  CHECK(x.targets == y.targets);
  CHECK(x.scored == y.scored);
}

TEST_CASE("lr schedule: linear warmup then cosine to min") {
  TrainConfig tc;
  tc.steps = 1000;
  tc.lr = 1e-2;
  tc.min_lr = 1e-3;
  tc.warmup_frac = 0.01;
  CHECK(lr_schedule(tc, 0) == doctest::Approx(1e-2 / 10));
  CHECK(lr_schedule(tc, 9) == doctest::Approx(1e-2));
  CHECK(lr_schedule(tc, 999) == doctest::Approx(1e-3).epsilon(1e-2));
  double prev = lr_schedule(tc, 10);
  for (int s = 11; s < 1000; s += 37) {
    const double cur = lr_schedule(tc, s);
    CHECK(cur <= prev + 1e-12);
    prev = cur;
  }
}

TEST_CASE("a single Adam step on a quadratic bowl moves toward the minimum") {
  // f(x) = 0.5 * x^2, minimum at 0
  Tensor<float> x({3}, {4.0f, -2.0f, 0.5f});
  Tape<float> tape;
  tape.watch(x);
  Tensor<float> loss = scale(sum_all(mul(x, x)), 0.5f);
  tape.backward(loss);
  std::vector<Tensor<float>*> params = {&x};
  Adam<float> adam;
  adam.step(params, 0.1, 0.0);
  CHECK(std::abs(x.at(0)) < 4.0f);
  CHECK(std::abs(x.at(1)) < 2.0f);
  CHECK(std::abs(x.at(2)) < 0.5f);
  CHECK(x.at(0) > 0.0f);   // did not overshoot through the minimum
  CHECK(x.at(1) < 0.0f);
}

TEST_CASE("zero steps leaves the checkpoint equal to initialization") {
  ModelConfig mc = small_train_config();
  auto params = ModelParams<float>::init(mc, 77);
  auto reference = ModelParams<float>::init(mc, 77);
  TrainConfig tc;
  tc.steps = 0;
  train_loop(params, tc);
  bool same = true;
  std::vector<Tensor<float>*> ref;
  reference.visit([&](const std::string&, Tensor<float>& t) { ref.push_back(&t); });
  size_t i = 0;
  params.visit([&](const std::string&, Tensor<float>& t) {
    same = same && std::memcmp(t.data(), ref[i]->data(), sizeof(float) * static_cast<size_t>(t.numel())) == 0;
    ++i;
  });
  CHECK(same);
}

TEST_CASE("lr = 0 leaves parameters unchanged after steps") {
  ModelConfig mc = small_train_config();
  auto params = ModelParams<float>::init(mc, 78);
  auto reference = ModelParams<float>::init(mc, 78);
  TrainConfig tc;
  tc.steps = 3;
  tc.lr = 0.0;
  tc.min_lr = 0.0;
  tc.batch_size = 2;
  tc.seq_len = 16;
  tc.log_every = 0;
  tc.checkpoint_every = 0;
  train_loop(params, tc);
  bool same = true;
  std::vector<Tensor<float>*> ref;
  reference.visit([&](const std::string&, Tensor<float>& t) { ref.push_back(&t); });
  size_t i = 0;
  params.visit([&](const std::string&, Tensor<float>& t) {
    same = same && std::memcmp(t.data(), ref[i]->data(), sizeof(float) * static_cast<size_t>(t.numel())) == 0;
    ++i;
  });
  CHECK(same);
}

TEST_CASE("same seed and config give bit-identical first-step gradients") {
  ModelConfig mc = small_train_config();
  auto grads_of = [&]() {
    auto params = ModelParams<float>::init(mc, 99);
    std::mt19937_64 rng(123);
    SyntheticBatch batch = make_task_batch(Task::copy, rng, 2, 16, mc.vocab_size);
    Tape<float> tape;
    params.watch_all(tape);
    Tensor<float> logits = model_forward(params, std::span<const int>(batch.inputs), 2);
    tape.backward(cross_entropy_masked(logits, batch.targets, batch.scored));
    std::vector<float> all;
    params.visit([&](const std::string&, Tensor<float>& t) {
      all.insert(all.end(), t.grad().begin(), t.grad().end());
    });
    return all;
  };
  auto g1 = grads_of();
  auto g2 = grads_of();
  CHECK(std::memcmp(g1.data(), g2.data(), sizeof(float) * g1.size()) == 0);
}

TEST_CASE("loss descends when fitting a fixed batch") {
  ModelConfig mc = small_train_config();
  auto params = ModelParams<float>::init(mc, 105);
  std::mt19937_64 rng(7);
  SyntheticBatch batch = make_task_batch(Task::copy, rng, 4, 16, mc.vocab_size);
  std::vector<Tensor<float>*> plist;
  params.visit([&](const std::string&, Tensor<float>& t) { plist.push_back(&t); });
  Adam<float> adam;
  double first = 0, last = 0;
  for (int step = 0; step < 120; ++step) {
    Tape<float> tape;
    params.watch_all(tape);
    Tensor<float> logits = model_forward(params, std::span<const int>(batch.inputs), 4);
    Tensor<float> loss = cross_entropy_masked(logits, batch.targets, batch.scored);
    tape.backward(loss);
    if (step == 0) first = loss.at(0);
    last = loss.at(0);
    adam.step(plist, 3e-3, 0.0);
  }
  CHECK(last < 0.25 * first);
}

TEST_CASE("short training run logs metrics and checkpoints") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "bm_train_test";
  fs::remove_all(dir);
  ModelConfig mc = small_train_config();
  auto params = ModelParams<float>::init(mc, 101);
  TrainConfig tc;
  tc.task = Task::copy;
  tc.steps = 60;
  tc.batch_size = 4;
  tc.seq_len = 16;
  tc.lr = 3e-3;
  tc.min_lr = 3e-4;
  tc.log_every = 10;
  tc.checkpoint_every = 50;
  TrainPaths paths;
  paths.checkpoint_dir = (dir / "ckpt").string();
  paths.metrics_path = (dir / "metrics.ndjson").string();
  TrainResult r = train_loop(params, tc, paths);
  CHECK(r.steps_run == 60);
  CHECK(fs::exists(dir / "ckpt" / "step-50.ckpt"));
  CHECK(fs::exists(dir / "ckpt" / "final.ckpt"));

  std::ifstream mf(paths.metrics_path);
  REQUIRE(mf.good());
  std::string line;
  int lines = 0;
  while (std::getline(mf, line)) {
    if (line.empty()) continue;
    nlohmann::json rec = nlohmann::json::parse(line);
    CHECK(rec.contains("step"));
    CHECK(rec.contains("loss"));
    CHECK(rec.contains("lr"));
    CHECK(rec.contains("expert_counts"));
    lines++;
  }
  CHECK(lines >= 6);
  fs::remove_all(dir);
}

TEST_CASE("divergence aborts with a diagnostic") {
  ModelConfig mc = small_train_config();
  mc.variant = Variant::mamba;  // no router: divergence reaches the loss check
  auto params = ModelParams<float>::init(mc, 107);
  TrainConfig tc;
  tc.task = Task::copy;
  tc.steps = 40;
  tc.batch_size = 2;
  tc.seq_len = 16;
  tc.lr = 1e9;  // guaranteed blow-up
  tc.min_lr = 1e9;
  tc.log_every = 0;
  tc.checkpoint_every = 0;
  CHECK_THROWS_WITH_AS(train_loop(params, tc), doctest::Contains("diverged"), std::runtime_error);
}

TEST_CASE("exact-match accuracy runs on scored positions") {
  ModelConfig mc = small_train_config();
  auto params = ModelParams<float>::init(mc, 103);
  TrainConfig tc;
  tc.task = Task::associative_recall;
  tc.batch_size = 4;
  tc.seq_len = 24;
  tc.eval_batches = 2;
  const double acc = exact_match_accuracy(params, tc, 7);
  CHECK(acc >= 0.0);
  CHECK(acc <= 1.0);
}

TEST_SUITE_END();
