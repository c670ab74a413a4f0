#pragma once

// Generation latency, state-memory, and routing-statistics measurement.
// Byte accounting is exact arithmetic from the config, never heap
// inspection; timing samples are medians over repeats with warmup runs
// discarded.

#include <string>
#include <vector>

#include "bm/runconfig.hpp"
#include "json.hpp"

namespace bm {

struct LatencySample {
  std::string variant;
  i64 position = 0;
  double ns_per_token = 0;
  u64 state_bytes = 0;
};

// Recurrent state: n_mixer_layers * (I*H + (C-1)*I) elements, position-free.
u64 recurrent_state_bytes(const ModelConfig& c, size_t elem_size);
// KV cache: n_attn_layers * 2 * position * D elements.
u64 kv_cache_bytes(const ModelConfig& c, i64 position, size_t elem_size);
// Whichever of the two the variant owns, at the given position.
u64 decode_state_bytes(const ModelConfig& c, i64 position, size_t elem_size);

// Streams a single-token prompt out to max(lengths) and reports the median
// per-token wall time in a window ending at each target length.
std::vector<LatencySample> latency_sweep(const ModelConfig& c, const BenchOptions& opts, u64 seed);

std::string latency_csv(const std::vector<LatencySample>& samples);
nlohmann::json latency_json(const std::vector<LatencySample>& samples);

// Token counts per (pair, expert) aggregated over batches of random tokens
// routed with the balanced assignment.
struct RoutingTable {
  std::vector<std::vector<i64>> counts;  // [pair][expert]
  i64 tokens_routed = 0;
  std::vector<double> max_over_mean;  // per-pair load ratio
};

RoutingTable routing_histogram(const ModelConfig& c, u64 seed, int n_batches, int batch_size,
                               i64 seq_len);

// columns: layer,expert,token_count,step
std::string routing_csv(const ModelConfig& c, u64 seed, int n_batches, int batch_size, i64 seq_len);

}  // namespace bm
