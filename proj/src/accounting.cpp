#include "bm/accounting.hpp"

#include <cmath>
#include <sstream>

#include "bm/checkpoint.hpp"

namespace bm {

i64 mamba_params_formula(i64 d_model, i64 d_inner, i64 d_state, i64 dt_rank, i64 d_conv) {
  check(d_model > 0 && d_inner > 0 && d_state > 0 && dt_rank > 0 && d_conv > 0,
        "mamba_params_formula: dimensions must be positive");
  return 3 * d_inner * d_model + 2 * d_inner * (d_state + dt_rank + d_conv / 2) + d_inner +
         2 * d_model;
}

i64 moe_params_formula(i64 d_model, i64 n_experts) {
  check(d_model > 0 && n_experts > 0, "moe_params_formula: dimensions must be positive");
  return 8 * d_model * d_model * n_experts + d_model * n_experts;
}

i64 mamba_flops_formula(i64 batch, i64 seq_len, i64 d_inner, i64 d_state, i64 dt_rank) {
  return batch * seq_len * d_inner * (11 * d_state + 4 * dt_rank + 1) + d_inner * d_state;
}

i64 moe_flops_formula(i64 d_model, i64 n_experts) {
  return d_model * n_experts * (16 * d_model + 2);
}

ExactCount exact_count_shapes(const std::vector<std::pair<std::string, Shape>>& shapes) {
  ExactCount out;
  for (const auto& [name, shape] : shapes) {
    ArrayCount a;
    a.name = name;
    a.shape = shape;
    a.count = shape_numel(shape);
    out.total += a.count;
    out.arrays.push_back(std::move(a));
  }
  return out;
}

namespace {

i64 expert_param_count(const ModelConfig& c) {
  const i64 per_mat = c.ffn_hidden * c.d_model;
  return c.expert_kind == ExpertKind::swiglu ? 3 * per_mat : 2 * per_mat;
}

i64 dt_rank_default(i64 d_model) { return (d_model + 31) / 32; }

}  // namespace

std::vector<std::string> preset_names() {
  return {"340M/1.5B", "630M/2.8B", "tiny-mamba-moe", "tiny-mamba-moe-std", "tiny-mamba",
          "tiny-transformer", "tiny-transformer-moe"};
}

ModelConfig preset_config(const std::string& name) {
  ModelConfig c;
  if (name == "340M/1.5B" || name == "630M/2.8B") {
    const bool big = name == "630M/2.8B";
    c.variant = Variant::mamba_moe;
    c.n_layers = big ? 36 : 30;
    c.d_model = big ? 1472 : 1152;
    c.expansion = 2;
    c.state_size = 16;
    c.conv_dim = 4;
    c.dt_rank = dt_rank_default(c.d_model);
    c.n_experts = 8;
    c.ffn_hidden = big ? 3872 : 3072;
    c.expert_kind = ExpertKind::swiglu;
    c.vocab_size = 50304;
    c.max_seq_len = 2048;
    return c;
  }
  // shared tiny dimensions
  c.n_layers = 4;
  c.d_model = 64;
  c.expansion = 2;
  c.state_size = 16;
  c.dt_rank = 4;
  c.conv_dim = 4;
  c.vocab_size = 256;
  c.max_seq_len = 4096;
  c.n_heads = 4;
  if (name == "tiny-mamba-moe") {
    c.variant = Variant::mamba_moe;
    c.n_experts = 4;
    c.ffn_hidden = 128;
    c.expert_kind = ExpertKind::swiglu;
  } else if (name == "tiny-mamba-moe-std") {
    // standard 4D-hidden experts so the published block formulas apply
    c.variant = Variant::mamba_moe;
    c.n_experts = 4;
    c.ffn_hidden = 4 * c.d_model;
    c.expert_kind = ExpertKind::standard;
  } else if (name == "tiny-mamba") {
    c.variant = Variant::mamba;
    c.ffn_hidden = 128;
    c.expert_kind = ExpertKind::swiglu;
  } else if (name == "tiny-transformer") {
    c.variant = Variant::transformer;
    c.ffn_hidden = 4 * c.d_model;
    c.expert_kind = ExpertKind::standard;
  } else if (name == "tiny-transformer-moe") {
    c.variant = Variant::transformer_moe;
    c.n_experts = 4;
    c.ffn_hidden = 4 * c.d_model;
    c.expert_kind = ExpertKind::standard;
  } else {
    std::string known;
    for (const auto& n : preset_names()) known += " '" + n + "'";
    throw ConfigError(strcat("unknown preset '", name, "'; known presets:", known));
  }
  return c;
}

FlopReport config_report(const ModelConfig& config, const std::string& label, bool instrument) {
  config.validate();
  FlopReport r;
  r.preset = label;
  r.config = config;
  const i64 D = config.d_model, I = config.d_inner(), H = config.state_size, R = config.dt_rank,
            C = config.conv_dim, E = config.is_moe() ? config.n_experts : 1;
  const int pairs = config.n_pairs();

  if (!config.has_attention()) {
    r.formula_mamba_block = mamba_params_formula(D, I, H, R, C);
    r.mamba_flops_per_token = mamba_flops_formula(1, 1, I, H, R);
  }
  r.formula_moe_block = moe_params_formula(D, E);
  r.moe_flops_value = moe_flops_formula(D, E);
  if (!config.is_moe())
    r.notes.push_back("dense channel block: the expert-layer formula is evaluated at E=1; the DE "
                      "router term does not exist in the dense block");

  r.formula_blocks_total = static_cast<i64>(pairs) * (r.formula_mamba_block + r.formula_moe_block);

  ExactCount exact = exact_count_shapes(enumerate_param_shapes(config));
  r.exact_total = exact.total;
  for (const ArrayCount& a : exact.arrays) {
    if (a.name.rfind("pair", 0) == 0) r.exact_blocks_total += a.count;
  }
  r.exact_forward_total = r.exact_total - static_cast<i64>(pairs) * (E - 1) * expert_param_count(config);

  // Residual terms: block arrays with no formula term, then model-level
  // arrays outside the block formulas entirely.
  for (const ArrayCount& a : exact.arrays) {
    const bool mixer_residual = a.name.find("mixer.ln_a") != std::string::npos ||
                                a.name.find("mixer.conv_b") != std::string::npos ||
                                a.name.find("mixer.dt_bias") != std::string::npos;
    const bool model_level = a.name.rfind("pair", 0) != 0;
    if (mixer_residual || model_level) r.residual_terms.push_back(a);
  }
  if (r.exact_blocks_total > 0)
    r.block_discrepancy_ratio =
        std::abs(static_cast<double>(r.formula_blocks_total - r.exact_blocks_total)) /
        static_cast<double>(r.exact_blocks_total);

  if (!config.has_attention())
    r.notes.push_back("the published 2IH parameter term carries the {A, W_B} attribution; under the "
                      "{W_B, W_C} reading the value is identical and the unattributed I*H array is "
                      "ln_a instead of w_c; exact enumeration lists all three arrays");
  if (config.expert_kind == ExpertKind::swiglu)
    r.notes.push_back("experts are SwiGLU (3 weight matrices of F*D); the 8D^2E formula assumes a "
                      "standard 4D-hidden MLP, so the expert term differs unless F=4D and kind=standard");
  if (config.is_moe())
    r.notes.push_back("DE(16D+2) charges all E experts; top-1 routed execution touches one expert "
                      "plus the full router, i.e. 16D^2 + 2DE per token for a standard 4D expert");
  r.notes.push_back(strcat("dt_rank convention: ceil(D/32) = ", dt_rank_default(D), " for D = ", D,
                           (R == dt_rank_default(D) ? " (used)" : " (overridden by config)")));

  if (instrument) {
    auto params = ModelParams<float>::init(config, 1);
    const i64 L = 8;
    std::vector<int> toks(static_cast<size_t>(L));
    for (i64 t = 0; t < L; ++t) toks[static_cast<size_t>(t)] = static_cast<int>(t % config.vocab_size);
    FlopCounter fc;
    std::vector<u64> blocks;
    ForwardInfo info;
    info.flops = &fc;
    info.block_flops = &blocks;
    model_forward(params, std::span<const int>(toks), 1, &info);
    r.measured_forward_flops = fc.total;
    r.measured_tokens = L;
    r.per_block_measured = blocks;
  }
  return r;
}

FlopReport preset_report(const std::string& name) {
  ModelConfig c = preset_config(name);
  ExactCount exact = exact_count_shapes(enumerate_param_shapes(c));
  const bool tiny = exact.total < (i64(50) << 20);
  return config_report(c, name, tiny);
}

nlohmann::json report_to_json(const FlopReport& r) {
  nlohmann::json residuals = nlohmann::json::array();
  for (const ArrayCount& a : r.residual_terms)
    residuals.push_back({{"name", a.name}, {"shape", a.shape}, {"count", a.count}});
  nlohmann::json j{
      {"preset", r.preset},
      {"config", config_to_json(r.config)},
      {"params",
       {{"formula_mamba_block", r.formula_mamba_block},
        {"formula_moe_block", r.formula_moe_block},
        {"formula_blocks_total", r.formula_blocks_total},
        {"exact_blocks_total", r.exact_blocks_total},
        {"exact_total", r.exact_total},
        {"exact_forward_total", r.exact_forward_total},
        {"block_discrepancy_ratio", r.block_discrepancy_ratio},
        {"residual_terms", residuals}}},
      {"flops",
       {{"mamba_formula_per_token", r.mamba_flops_per_token},
        {"moe_formula", r.moe_flops_value},
        {"measured_forward", r.measured_forward_flops},
        {"measured_tokens", r.measured_tokens},
        {"per_block_measured", r.per_block_measured}}},
      {"notes", r.notes}};
  return j;
}

namespace {
std::string human(i64 n) {
  std::ostringstream os;
  if (n >= 1000000000) os << static_cast<double>(n) / 1e9 << "B";
  else if (n >= 1000000) os << static_cast<double>(n) / 1e6 << "M";
  else if (n >= 10000) os << static_cast<double>(n) / 1e3 << "K";
  else os << n;
  return os.str();
}
}  // namespace

std::string report_table(const FlopReport& r) {
  std::ostringstream os;
  os << "== " << r.preset << " (" << variant_name(r.config.variant) << ") ==\n";
  os << "  layers " << r.config.n_layers << "  d_model " << r.config.d_model << "  d_inner "
     << r.config.d_inner() << "  experts " << (r.config.is_moe() ? r.config.n_experts : 1)
     << "  ffn_hidden " << r.config.ffn_hidden << "  vocab " << r.config.vocab_size << "\n";
  os << "  parameters\n";
  if (r.formula_mamba_block)
    os << "    mamba block formula      " << human(r.formula_mamba_block) << "\n";
  os << "    channel block formula    " << human(r.formula_moe_block) << "\n";
  os << "    blocks formula total     " << human(r.formula_blocks_total) << "\n";
  os << "    blocks exact total       " << human(r.exact_blocks_total) << "  (discrepancy "
     << r.block_discrepancy_ratio * 100 << "%)\n";
  os << "    exact total              " << human(r.exact_total) << " (" << r.exact_total << ")\n";
  os << "    exact forward-pass       " << human(r.exact_forward_total) << " ("
     << r.exact_forward_total << ")\n";
  os << "    residual terms (outside the block formulas):\n";
  for (const ArrayCount& a : r.residual_terms)
    os << "      " << a.name << " " << shape_str(a.shape) << " = " << a.count << "\n";
  os << "  flops\n";
  if (r.mamba_flops_per_token)
    os << "    mamba formula/token      " << human(r.mamba_flops_per_token) << "\n";
  os << "    channel formula          " << human(r.moe_flops_value) << "\n";
  if (r.measured_tokens) {
    os << "    measured forward         " << human(static_cast<i64>(r.measured_forward_flops))
       << " over " << r.measured_tokens << " tokens ("
       << human(static_cast<i64>(r.measured_forward_flops / static_cast<u64>(r.measured_tokens)))
       << "/token)\n";
    os << "    per block (mixer, channel alternating):";
    for (u64 b : r.per_block_measured) os << " " << b;
    os << "\n";
  }
  for (const std::string& n : r.notes) os << "  note: " << n << "\n";
  return os.str();
}

}  // namespace bm
