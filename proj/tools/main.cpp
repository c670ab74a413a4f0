// Command-line front end: train, generate, bench-latency, count, route-stats,
// sinkhorn-diag, and selfcheck subcommands over a shared config file.
//
// Exit codes: 0 success, 1 validation error, 2 runtime failure, 3 selfcheck
// failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>

#include "CLI11.hpp"
#include "bm/accounting.hpp"
#include "bm/bench.hpp"
#include "bm/checkpoint.hpp"
#include "bm/model.hpp"
#include "bm/runconfig.hpp"
#include "bm/selfcheck.hpp"
#include "bm/sinkhorn.hpp"
#include "bm/train.hpp"

namespace fs = std::filesystem;
using namespace bm;

namespace {

struct CommonArgs {
  std::string config_path;
  std::string preset;
  i64 seed = -1;
  std::string out_dir = ".";
  std::string format = "csv";
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "run configuration file (INI-style)");
  cmd->add_option("--preset", args.preset, "named model preset (see `count --list`)");
  cmd->add_option("--seed", args.seed, "seed override");
  cmd->add_option("--out", args.out_dir, "output directory")->capture_default_str();
  cmd->add_option("--format", args.format, "output format: csv or json")
      ->check(CLI::IsMember({"csv", "json"}))
      ->capture_default_str();
}

RunConfig load_run_config(const CommonArgs& args) {
  RunConfig cfg;
  if (!args.config_path.empty()) {
    cfg = parse_config(args.config_path);
    if (!args.preset.empty()) {
      ModelConfig base = preset_config(args.preset);
      cfg.model = base;
    }
  } else if (!args.preset.empty()) {
    cfg.model = preset_config(args.preset);
    apply_env_overrides(cfg);
  } else {
    throw ConfigError("provide --config or --preset");
  }
  if (args.seed >= 0) {
    cfg.seed = static_cast<u64>(args.seed);
    cfg.train.seed = cfg.seed;
  }
  return cfg;
}

fs::path ensure_out_dir(const std::string& dir) {
  fs::path p(dir);
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec || !fs::is_directory(p))
    throw ConfigError(strcat("output directory is not writable: ", dir));
  return p;
}

int run_train(const CommonArgs& args) {
  RunConfig cfg = load_run_config(args);
  if (!cfg.has_train && args.config_path.empty()) cfg.has_train = true;  // preset-only runs train defaults
  if (!cfg.has_train) throw ConfigError("config has no [train] section");
  const fs::path out = ensure_out_dir(args.out_dir);
  TrainPaths paths;
  paths.checkpoint_dir = (out / cfg.paths.checkpoint_dir).string();
  paths.metrics_path = (out / cfg.paths.metrics_dir / "metrics.ndjson").string();
  fs::create_directories(out / cfg.paths.metrics_dir);
  auto params = ModelParams<float>::init(cfg.model, cfg.seed);
  std::cout << "training " << variant_name(cfg.model.variant) << " on " << task_name(cfg.train.task)
            << " for " << cfg.train.steps << " steps\n";
  TrainResult r = train_loop(params, cfg.train, paths);
  std::cout << "initial loss " << r.initial_loss << ", final loss " << r.final_loss << "\n";
  if (cfg.train.task == Task::associative_recall) {
    const double acc = exact_match_accuracy(params, cfg.train, cfg.seed ^ 0xe7a1);
    std::cout << "exact-match accuracy " << acc << "\n";
  }
  if (!r.final_checkpoint.empty()) std::cout << "checkpoint: " << r.final_checkpoint << "\n";
  std::cout << "metrics: " << paths.metrics_path << "\n";
  return 0;
}

int run_generate(const CommonArgs& args, const std::string& checkpoint, const std::string& prompt_csv,
                 int n_tokens, const std::string& mode, double temperature) {
  ModelParams<float> params = [&] {
    if (!checkpoint.empty()) return load_checkpoint<float>(checkpoint);
    RunConfig cfg = load_run_config(args);
    return ModelParams<float>::init(cfg.model, cfg.seed);
  }();
  std::vector<int> prompt;
  std::stringstream ss(prompt_csv);
  std::string part;
  while (std::getline(ss, part, ',')) {
    if (part.empty()) continue;
    try {
      prompt.push_back(std::stoi(part));
    } catch (...) {
      throw ConfigError(strcat("prompt must be comma-separated token ids, got '", part, "'"));
    }
  }
  if (prompt.empty()) throw ConfigError("prompt must contain at least one token id");
  GenerateOptions opts;
  opts.n_tokens = n_tokens;
  opts.mode = mode == "greedy" ? GenerateOptions::Mode::greedy : GenerateOptions::Mode::temperature;
  opts.temperature = temperature;
  opts.seed = args.seed >= 0 ? static_cast<u64>(args.seed) : 0;
  std::vector<int> out = generate(params, std::span<const int>(prompt), opts);
  for (size_t i = 0; i < out.size(); ++i) std::cout << (i ? "," : "") << out[i];
  std::cout << "\n";
  return 0;
}

int run_count(const CommonArgs& args, bool list) {
  if (list) {
    for (const std::string& name : preset_names()) std::cout << name << "\n";
    return 0;
  }
  FlopReport report = [&] {
    if (!args.preset.empty()) return preset_report(args.preset);
    RunConfig cfg = load_run_config(args);
    ExactCount exact = exact_count_shapes(enumerate_param_shapes(cfg.model));
    return config_report(cfg.model, args.config_path, exact.total < (i64(50) << 20));
  }();
  if (args.format == "json") {
    std::cout << report_to_json(report).dump(2) << "\n";
  } else {
    std::cout << report_table(report);
  }
  return 0;
}

int run_bench(const CommonArgs& args) {
  RunConfig cfg = load_run_config(args);
  const fs::path out = ensure_out_dir(args.out_dir);
  auto samples = latency_sweep(cfg.model, cfg.bench, cfg.seed);
  const fs::path path = out / (args.format == "json" ? "latency.json" : "latency.csv");
  std::ofstream f(path);
  if (args.format == "json") f << latency_json(samples).dump(2) << "\n";
  else f << latency_csv(samples);
  std::cout << latency_csv(samples);
  std::cout << "written: " << path.string() << "\n";
  return 0;
}

int run_route_stats(const CommonArgs& args, int batches, int batch_size, i64 seq_len) {
  RunConfig cfg = load_run_config(args);
  const fs::path out = ensure_out_dir(args.out_dir);
  const std::string csv = routing_csv(cfg.model, cfg.seed, batches, batch_size, seq_len);
  const fs::path path = out / "route_stats.csv";
  std::ofstream f(path);
  f << csv;
  RoutingTable table = routing_histogram(cfg.model, cfg.seed, batches, batch_size, seq_len);
  for (size_t p = 0; p < table.counts.size(); ++p) {
    std::cout << "layer " << p << " counts:";
    for (i64 cnt : table.counts[p]) std::cout << " " << cnt;
    std::cout << "  (max/mean " << table.max_over_mean[p] << ")\n";
  }
  std::cout << "written: " << path.string() << "\n";
  return 0;
}

int run_sinkhorn_diag(const CommonArgs& args, int trials, i64 samples, i64 experts,
                      double temperature) {
  const fs::path out = ensure_out_dir(args.out_dir);
  const fs::path path = out / "sinkhorn_diag.csv";
  std::ofstream f(path);
  f << "iters_used,residual,init,samples,experts,temperature\n";
  std::mt19937_64 rng(args.seed >= 0 ? static_cast<u64>(args.seed) : 0);
  std::normal_distribution<double> g(0, 1);
  for (int t = 0; t < trials; ++t) {
    std::vector<double> logits(static_cast<size_t>(samples * experts));
    for (auto& v : logits) v = g(rng);
    for (SinkhornInit init : {SinkhornInit::fast, SinkhornInit::uniform, SinkhornInit::fast_literal}) {
      SinkhornConfig cfg;
      cfg.init = init;
      cfg.temperature = temperature;
      RoutePlan plan = sinkhorn(logits, samples, experts, cfg);
      f << plan.iters_used << "," << plan.residual << "," << sinkhorn_init_name(init) << ","
        << samples << "," << experts << "," << temperature << "\n";
    }
  }
  std::cout << "written: " << path.string() << "\n";
  return 0;
}

int run_selfcheck(const std::string& inject_fault) {
  SelfcheckOptions opts;
  if (!inject_fault.empty()) {
    if (inject_fault != "flip-da-sign")
      throw ConfigError(strcat("unknown fault '", inject_fault, "' (known: flip-da-sign)"));
    opts.inject_flip_da_sign = true;
  }
  const auto results = run_selfcheck(opts);
  bool all_pass = true;
  double total = 0;
  for (const CheckResult& r : results) {
    std::cout << (r.pass ? "[PASS] " : "[FAIL] ") << r.name << ": " << r.detail << " ("
              << r.seconds << "s)\n";
    all_pass = all_pass && r.pass;
    total += r.seconds;
  }
  std::cout << (all_pass ? "selfcheck passed" : "selfcheck FAILED") << " in " << total << "s\n";
  return all_pass ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mamba/MoE hybrid language model workbench"};
  app.require_subcommand(1);

  CommonArgs args;

  auto* train_cmd = app.add_subcommand("train", "train a model on a synthetic task");
  add_common(train_cmd, args);

  auto* gen_cmd = app.add_subcommand("generate", "autoregressive generation on streaming state");
  add_common(gen_cmd, args);
  std::string checkpoint, prompt = "0", gen_mode = "greedy";
  int n_tokens = 32;
  double temperature = 1.0;
  gen_cmd->add_option("--checkpoint", checkpoint, "checkpoint file to load");
  gen_cmd->add_option("--prompt", prompt, "comma-separated token ids")->capture_default_str();
  gen_cmd->add_option("--n-tokens", n_tokens, "tokens to generate")->capture_default_str();
  gen_cmd->add_option("--mode", gen_mode, "greedy or temperature")
      ->check(CLI::IsMember({"greedy", "temperature"}))
      ->capture_default_str();
  gen_cmd->add_option("--temperature", temperature, "sampling temperature")->capture_default_str();

  auto* count_cmd = app.add_subcommand("count", "parameter and FLOP accounting report");
  add_common(count_cmd, args);
  bool list_presets = false;
  count_cmd->add_flag("--list", list_presets, "list known presets");

  auto* bench_cmd =
      app.add_subcommand("bench-latency", "per-token generation latency and state bytes by position "
                                          "(CSV columns: variant,position,ns_per_token,state_bytes)");
  add_common(bench_cmd, args);

  auto* route_cmd = app.add_subcommand(
      "route-stats", "token counts per layer/expert on random batches "
                     "(CSV columns: layer,expert,token_count,step)");
  add_common(route_cmd, args);
  int rs_batches = 4, rs_batch_size = 8;
  i64 rs_seq_len = 64;
  route_cmd->add_option("--batches", rs_batches, "number of batches")->capture_default_str();
  route_cmd->add_option("--batch-size", rs_batch_size, "sequences per batch")->capture_default_str();
  route_cmd->add_option("--seq-len", rs_seq_len, "sequence length")->capture_default_str();

  auto* diag_cmd = app.add_subcommand(
      "sinkhorn-diag", "router normalization diagnostics "
                       "(CSV columns: iters_used,residual,init,samples,experts,temperature)");
  add_common(diag_cmd, args);
  int sd_trials = 20;
  i64 sd_samples = 256, sd_experts = 8;
  double sd_temperature = 2.0;
  diag_cmd->add_option("--trials", sd_trials, "trials per init mode")->capture_default_str();
  diag_cmd->add_option("--samples", sd_samples, "rows per logit matrix")->capture_default_str();
  diag_cmd->add_option("--experts", sd_experts, "columns per logit matrix")->capture_default_str();
  diag_cmd->add_option("--temperature", sd_temperature, "logit rescaling")->capture_default_str();

  auto* check_cmd = app.add_subcommand("selfcheck", "run the fast invariant suite");
  std::string inject_fault;
  check_cmd->add_option("--inject-fault", inject_fault,
                        "test hook: inject a known fault (flip-da-sign) and expect failure");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train_cmd->parsed()) return run_train(args);
    if (gen_cmd->parsed()) return run_generate(args, checkpoint, prompt, n_tokens, gen_mode, temperature);
    if (count_cmd->parsed()) return run_count(args, list_presets);
    if (bench_cmd->parsed()) return run_bench(args);
    if (route_cmd->parsed()) return run_route_stats(args, rs_batches, rs_batch_size, rs_seq_len);
    if (diag_cmd->parsed()) return run_sinkhorn_diag(args, sd_trials, sd_samples, sd_experts, sd_temperature);
    if (check_cmd->parsed()) return run_selfcheck(inject_fault);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
