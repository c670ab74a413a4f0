#include "bm/bench.hpp"

#include <algorithm>
#include <chrono>
#include <sstream>

#include "bm/model.hpp"

namespace bm {

u64 recurrent_state_bytes(const ModelConfig& c, size_t elem_size) {
  if (c.has_attention()) return 0;
  const u64 per_layer = static_cast<u64>(c.d_inner() * c.state_size) +
                        static_cast<u64>((c.conv_dim - 1) * c.d_inner());
  return static_cast<u64>(c.n_pairs()) * per_layer * elem_size;
}

u64 kv_cache_bytes(const ModelConfig& c, i64 position, size_t elem_size) {
  if (!c.has_attention()) return 0;
  return static_cast<u64>(c.n_pairs()) * 2ull * static_cast<u64>(position) *
         static_cast<u64>(c.d_model) * elem_size;
}

u64 decode_state_bytes(const ModelConfig& c, i64 position, size_t elem_size) {
  return c.has_attention() ? kv_cache_bytes(c, position, elem_size)
                           : recurrent_state_bytes(c, elem_size);
}

std::vector<LatencySample> latency_sweep(const ModelConfig& c, const BenchOptions& opts, u64 seed) {
  opts.validate();
  const i64 max_len = opts.lengths.back();
  check(max_len + 1 <= c.max_seq_len, "bench length ", max_len, " exceeds max_seq_len ",
        c.max_seq_len);
  auto params = ModelParams<float>::init(c, seed);

  using clock = std::chrono::steady_clock;
  // per kept repeat, per position, nanoseconds for that token
  std::vector<std::vector<double>> times;
  for (int rep = 0; rep < opts.warmup + opts.repeats; ++rep) {
    DecodeState<float> st = make_decode_state(params);
    std::vector<double> row(static_cast<size_t>(max_len), 0.0);
    int token = 0;
    decode_step(params, st, token);  // the one-token prompt
    for (i64 pos = 0; pos < max_len; ++pos) {
      const auto t0 = clock::now();
      std::vector<float> logits = decode_step(params, st, token);
      const auto t1 = clock::now();
      row[static_cast<size_t>(pos)] =
          static_cast<double>(std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count());
      int best = 0;
      for (i64 v = 1; v < c.vocab_size; ++v)
        if (logits[static_cast<size_t>(v)] > logits[static_cast<size_t>(best)]) best = static_cast<int>(v);
      token = best;
    }
    if (rep >= opts.warmup) times.push_back(std::move(row));
  }

  std::vector<LatencySample> out;
  for (i64 target : opts.lengths) {
    std::vector<double> window;
    const i64 lo = std::max<i64>(0, target - opts.window);
    for (const auto& row : times)
      for (i64 pos = lo; pos < target; ++pos) window.push_back(row[static_cast<size_t>(pos)]);
    std::sort(window.begin(), window.end());
    LatencySample s;
    s.variant = variant_name(c.variant);
    s.position = target;
    s.ns_per_token = window[window.size() / 2];
    s.state_bytes = decode_state_bytes(c, target, sizeof(float));
    out.push_back(std::move(s));
  }
  return out;
}

std::string latency_csv(const std::vector<LatencySample>& samples) {
  std::ostringstream os;
  os << "variant,position,ns_per_token,state_bytes\n";
  for (const auto& s : samples)
    os << s.variant << "," << s.position << "," << s.ns_per_token << "," << s.state_bytes << "\n";
  return os.str();
}

nlohmann::json latency_json(const std::vector<LatencySample>& samples) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& s : samples)
    arr.push_back({{"variant", s.variant},
                   {"position", s.position},
                   {"ns_per_token", s.ns_per_token},
                   {"state_bytes", s.state_bytes}});
  return arr;
}

RoutingTable routing_histogram(const ModelConfig& c, u64 seed, int n_batches, int batch_size,
                               i64 seq_len) {
  check(c.is_moe(), "routing histogram requires an MoE variant, got ", variant_name(c.variant));
  auto params = ModelParams<float>::init(c, seed);
  RoutingTable table;
  table.counts.assign(static_cast<size_t>(c.n_pairs()),
                      std::vector<i64>(static_cast<size_t>(c.n_experts), 0));
  std::mt19937_64 rng(seed ^ 0x726f757465ull);
  std::uniform_int_distribution<int> tok(0, static_cast<int>(c.vocab_size) - 1);
  for (int b = 0; b < n_batches; ++b) {
    std::vector<int> tokens(static_cast<size_t>(batch_size) * static_cast<size_t>(seq_len));
    for (auto& t : tokens) t = tok(rng);
    std::vector<RoutingStats> routing;
    ForwardInfo info;
    info.routing = &routing;
    model_forward(params, std::span<const int>(tokens), batch_size, &info);
    for (size_t p = 0; p < routing.size(); ++p)
      for (size_t e = 0; e < routing[p].tokens_per_expert.size(); ++e)
        table.counts[p][e] += routing[p].tokens_per_expert[e];
    table.tokens_routed += static_cast<i64>(tokens.size());
  }
  for (const auto& layer : table.counts) {
    i64 mx = 0, total = 0;
    for (i64 cnt : layer) {
      mx = std::max(mx, cnt);
      total += cnt;
    }
    const double mean = static_cast<double>(total) / static_cast<double>(layer.size());
    table.max_over_mean.push_back(mean > 0 ? static_cast<double>(mx) / mean : 0.0);
  }
  return table;
}

std::string routing_csv(const ModelConfig& c, u64 seed, int n_batches, int batch_size, i64 seq_len) {
  check(c.is_moe(), "routing histogram requires an MoE variant, got ", variant_name(c.variant));
  auto params = ModelParams<float>::init(c, seed);
  std::ostringstream os;
  os << "layer,expert,token_count,step\n";
  std::mt19937_64 rng(seed ^ 0x726f757465ull);
  std::uniform_int_distribution<int> tok(0, static_cast<int>(c.vocab_size) - 1);
  for (int b = 0; b < n_batches; ++b) {
    std::vector<int> tokens(static_cast<size_t>(batch_size) * static_cast<size_t>(seq_len));
    for (auto& t : tokens) t = tok(rng);
    std::vector<RoutingStats> routing;
    ForwardInfo info;
    info.routing = &routing;
    model_forward(params, std::span<const int>(tokens), batch_size, &info);
    for (size_t p = 0; p < routing.size(); ++p)
      for (size_t e = 0; e < routing[p].tokens_per_expert.size(); ++e)
        os << p << "," << e << "," << routing[p].tokens_per_expert[e] << "," << b << "\n";
  }
  return os.str();
}

}  // namespace bm
