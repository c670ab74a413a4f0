#pragma once

// Parameter and FLOP accounting: the published closed-form block formulas
// evaluated verbatim, exact enumeration from parameter shapes,
// instrumented-forward FLOP measurement, and reconciliation between the
// three. Formulas are kept as published even where they disagree with exact
// counts; discrepancies are reported, never silently corrected.

#include <string>
#include <vector>

#include "bm/model.hpp"
#include "json.hpp"

namespace bm {

// 3ID + 2I(H + dt + C/2) + I + 2D
i64 mamba_params_formula(i64 d_model, i64 d_inner, i64 d_state, i64 dt_rank, i64 d_conv);
// 8D^2E + DE
i64 moe_params_formula(i64 d_model, i64 n_experts);
// BLI(11H + 4dt + 1) + IH, the published approximation; not expected to
// match the instrumented count.
i64 mamba_flops_formula(i64 batch, i64 seq_len, i64 d_inner, i64 d_state, i64 dt_rank);
// DE(16D + 2); charges all E experts, while top-1 routed execution touches one.
i64 moe_flops_formula(i64 d_model, i64 n_experts);

struct ArrayCount {
  std::string name;
  Shape shape;
  i64 count = 0;
};

struct ExactCount {
  std::vector<ArrayCount> arrays;
  i64 total = 0;
};

ExactCount exact_count_shapes(const std::vector<std::pair<std::string, Shape>>& shapes);

// Ground truth from real parameter arrays.
template <typename T>
ExactCount exact_count(ModelParams<T>& params) {
  std::vector<std::pair<std::string, Shape>> shapes;
  params.visit([&](const std::string& name, Tensor<T>& t) { shapes.emplace_back(name, t.shape()); });
  return exact_count_shapes(shapes);
}

struct FlopReport {
  std::string preset;
  ModelConfig config;

  // parameters
  i64 formula_mamba_block = 0;  // per block, 0 when not applicable
  i64 formula_moe_block = 0;
  i64 formula_blocks_total = 0;  // summed over pairs
  i64 exact_blocks_total = 0;    // exact count over pair-owned arrays
  i64 exact_total = 0;           // including embeddings and the final norm
  i64 exact_forward_total = 0;   // one expert per MoE block
  std::vector<ArrayCount> residual_terms;  // itemized formula-vs-exact gap
  double block_discrepancy_ratio = 0;      // |formula - exact| / exact over blocks

  // flops
  i64 mamba_flops_per_token = 0;  // formula at B=1, L=1
  i64 moe_flops_value = 0;
  u64 measured_forward_flops = 0;  // instrumented, tiny configs only
  i64 measured_tokens = 0;
  std::vector<u64> per_block_measured;  // mixer/channel alternating, per pair

  std::vector<std::string> notes;
};

std::vector<std::string> preset_names();
ModelConfig preset_config(const std::string& name);
// Symbolic for full-size presets; instrumented (one forward of a few tokens)
// for tiny ones.
FlopReport preset_report(const std::string& name);
FlopReport config_report(const ModelConfig& config, const std::string& label, bool instrument);

nlohmann::json report_to_json(const FlopReport& r);
std::string report_table(const FlopReport& r);

}  // namespace bm
