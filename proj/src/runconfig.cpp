#include "bm/runconfig.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "bm/accounting.hpp"
#include "bm/checkpoint.hpp"

namespace bm {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

size_t levenshtein(const std::string& a, const std::string& b) {
  std::vector<size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (size_t j = 1; j <= b.size(); ++j) {
      const size_t sub = prev[j - 1] + (a[i - 1] != b[j - 1]);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

std::vector<std::string> tokens_of(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, '_'))
    if (part.size() >= 4) out.push_back(part);
  return out;
}

std::string nearest(const std::string& key, const std::vector<std::string>& known) {
  // candidates sharing a whole underscore-token with the key win over raw
  // edit distance ("experts_count" suggests "n_experts", not "expert_kind")
  const auto key_tokens = tokens_of(key);
  std::string best;
  size_t best_d = SIZE_MAX;
  bool best_shared = false;
  for (const std::string& k : known) {
    bool shared = false;
    for (const auto& t : tokens_of(k))
      for (const auto& kt : key_tokens) shared = shared || t == kt;
    const size_t d = levenshtein(key, k);
    if (std::make_pair(!shared, d) < std::make_pair(!best_shared, best_d)) {
      best_shared = shared;
      best_d = d;
      best = k;
    }
  }
  return best_shared || best_d <= std::max<size_t>(3, key.size() / 2) ? best : "";
}

struct Entry {
  std::string section;
  std::string key;
  std::string value;
  int line;
  std::string file;

  [[noreturn]] void fail(const std::string& msg) const {
    throw ConfigError(strcat(file, ":", line, ": ", msg));
  }

  i64 as_int() const {
    try {
      size_t pos = 0;
      const i64 v = std::stoll(value, &pos);
      if (pos != value.size()) throw std::invalid_argument("");
      return v;
    } catch (...) {
      fail(strcat("key '", key, "' expects an integer, got '", value, "'"));
    }
  }
  double as_double() const {
    try {
      size_t pos = 0;
      const double v = std::stod(value, &pos);
      if (pos != value.size()) throw std::invalid_argument("");
      return v;
    } catch (...) {
      fail(strcat("key '", key, "' expects a number, got '", value, "'"));
    }
  }
  bool as_bool() const {
    if (value == "true" || value == "1" || value == "yes") return true;
    if (value == "false" || value == "0" || value == "no") return false;
    fail(strcat("key '", key, "' expects a boolean (true/false), got '", value, "'"));
  }
};

const std::vector<std::string> kModelKeys = {
    "preset",     "variant",    "n_layers", "d_model",     "expansion",   "state_size",
    "dt_rank",    "conv_dim",   "n_experts", "ffn_hidden", "vocab_size",  "max_seq_len",
    "n_heads",    "expert_kind", "gate",    "tie_embeddings"};
const std::vector<std::string> kTrainKeys = {
    "task",       "steps",      "batch_size",       "seq_len",     "lr",         "min_lr",
    "weight_decay", "warmup_frac", "log_every",     "checkpoint_every", "eval_batches"};
const std::vector<std::string> kBenchKeys = {"lengths", "repeats", "warmup", "window"};
const std::vector<std::string> kPathKeys = {"checkpoint_dir", "metrics_dir"};
const std::vector<std::string> kTopKeys = {"seed"};

void apply_model_key(ModelConfig& m, const Entry& e) {
  if (e.key == "variant") {
    try {
      m.variant = variant_from_name(e.value);
    } catch (const ConfigError& err) {
      e.fail(err.what());
    }
  } else if (e.key == "n_layers") m.n_layers = static_cast<int>(e.as_int());
  else if (e.key == "d_model") m.d_model = e.as_int();
  else if (e.key == "expansion") m.expansion = static_cast<int>(e.as_int());
  else if (e.key == "state_size") m.state_size = e.as_int();
  else if (e.key == "dt_rank") m.dt_rank = e.as_int();
  else if (e.key == "conv_dim") m.conv_dim = e.as_int();
  else if (e.key == "n_experts") m.n_experts = e.as_int();
  else if (e.key == "ffn_hidden") m.ffn_hidden = e.as_int();
  else if (e.key == "vocab_size") m.vocab_size = e.as_int();
  else if (e.key == "max_seq_len") m.max_seq_len = e.as_int();
  else if (e.key == "n_heads") m.n_heads = static_cast<int>(e.as_int());
  else if (e.key == "expert_kind") {
    if (e.value == "swiglu") m.expert_kind = ExpertKind::swiglu;
    else if (e.value == "standard") m.expert_kind = ExpertKind::standard;
    else e.fail(strcat("expert_kind must be 'swiglu' or 'standard', got '", e.value, "'"));
  } else if (e.key == "gate") {
    if (e.value == "sigmoid") m.gate_mode = GateMode::sigmoid;
    else if (e.value == "one") m.gate_mode = GateMode::one;
    else e.fail(strcat("gate must be 'sigmoid' or 'one', got '", e.value, "'"));
  } else if (e.key == "tie_embeddings") m.tie_embeddings = e.as_bool();
}

void apply_train_key(TrainConfig& t, const Entry& e) {
  if (e.key == "task") {
    if (e.value == "copy") t.task = Task::copy;
    else if (e.value == "associative-recall") t.task = Task::associative_recall;
    else e.fail(strcat("task must be 'copy' or 'associative-recall', got '", e.value, "'"));
  } else if (e.key == "steps") t.steps = static_cast<int>(e.as_int());
  else if (e.key == "batch_size") t.batch_size = static_cast<int>(e.as_int());
  else if (e.key == "seq_len") t.seq_len = e.as_int();
  else if (e.key == "lr") t.lr = e.as_double();
  else if (e.key == "min_lr") t.min_lr = e.as_double();
  else if (e.key == "weight_decay") t.weight_decay = e.as_double();
  else if (e.key == "warmup_frac") t.warmup_frac = e.as_double();
  else if (e.key == "log_every") t.log_every = static_cast<int>(e.as_int());
  else if (e.key == "checkpoint_every") t.checkpoint_every = static_cast<int>(e.as_int());
  else if (e.key == "eval_batches") t.eval_batches = static_cast<int>(e.as_int());
}

void apply_bench_key(BenchOptions& b, const Entry& e) {
  if (e.key == "lengths") {
    b.lengths.clear();
    std::stringstream ss(e.value);
    std::string part;
    while (std::getline(ss, part, ',')) {
      part = trim(part);
      if (part.empty()) continue;
      try {
        b.lengths.push_back(std::stoll(part));
      } catch (...) {
        e.fail(strcat("lengths expects comma-separated integers, got '", e.value, "'"));
      }
    }
    if (b.lengths.empty()) e.fail("lengths expects at least one value");
  } else if (e.key == "repeats") b.repeats = static_cast<int>(e.as_int());
  else if (e.key == "warmup") b.warmup = static_cast<int>(e.as_int());
  else if (e.key == "window") b.window = static_cast<int>(e.as_int());
}

}  // namespace

RunConfig parse_config_text(const std::string& text, const std::string& filename) {
  std::vector<Entry> entries;
  std::string section;
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string line = raw;
    const size_t hash = line.find_first_of("#;");
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError(strcat(filename, ":", line_no, ": malformed section header '", raw, "'"));
      section = trim(line.substr(1, line.size() - 2));
      if (section != "model" && section != "train" && section != "bench" && section != "paths")
        throw ConfigError(strcat(filename, ":", line_no, ": unknown section [", section,
                                 "]; expected [model], [train], [bench], or [paths]"));
      continue;
    }
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(strcat(filename, ":", line_no, ": expected 'key = value', got '", raw, "'"));
    Entry e;
    e.section = section;
    e.key = trim(line.substr(0, eq));
    e.value = trim(line.substr(eq + 1));
    e.line = line_no;
    e.file = filename;
    if (e.key.empty())
      throw ConfigError(strcat(filename, ":", line_no, ": missing key before '='"));
    entries.push_back(std::move(e));
  }

  auto known_for = [](const std::string& sec) -> const std::vector<std::string>& {
    if (sec == "model") return kModelKeys;
    if (sec == "train") return kTrainKeys;
    if (sec == "bench") return kBenchKeys;
    if (sec == "paths") return kPathKeys;
    return kTopKeys;
  };
  for (const Entry& e : entries) {
    const auto& known = known_for(e.section);
    if (std::find(known.begin(), known.end(), e.key) == known.end()) {
      const std::string hint = nearest(e.key, known);
      const std::string where = e.section.empty() ? "at top level" : strcat("in [", e.section, "]");
      throw ConfigError(strcat(e.file, ":", e.line, ": unknown key '", e.key, "' ", where,
                               hint.empty() ? "" : strcat("; did you mean '", hint, "'?")));
    }
  }

  RunConfig cfg;
  // preset first, explicit model keys override it
  for (const Entry& e : entries) {
    if (e.section == "model" && e.key == "preset") {
      try {
        cfg.model = preset_config(e.value);
      } catch (const ConfigError& err) {
        e.fail(err.what());
      }
    }
  }
  for (const Entry& e : entries) {
    if (e.section.empty() && e.key == "seed") cfg.seed = static_cast<u64>(e.as_int());
    else if (e.section == "model" && e.key != "preset") apply_model_key(cfg.model, e);
    else if (e.section == "train") {
      cfg.has_train = true;
      apply_train_key(cfg.train, e);
    } else if (e.section == "bench") apply_bench_key(cfg.bench, e);
    else if (e.section == "paths") {
      if (e.key == "checkpoint_dir") cfg.paths.checkpoint_dir = e.value;
      else cfg.paths.metrics_dir = e.value;
    }
  }

  cfg.model.validate();
  if (cfg.has_train) {
    cfg.train.seed = cfg.seed;
    cfg.train.validate();
  }
  cfg.bench.validate();
  return cfg;
}

RunConfig parse_config(const std::string& path) {
  std::ifstream f(path);
  if (!f.good()) throw ConfigError(strcat("cannot open config file: ", path));
  std::stringstream ss;
  ss << f.rdbuf();
  RunConfig cfg = parse_config_text(ss.str(), path);
  apply_env_overrides(cfg);
  return cfg;
}

void apply_env_overrides(RunConfig& cfg) {
  if (const char* v = std::getenv("BM_CHECKPOINT_DIR")) cfg.paths.checkpoint_dir = v;
  if (const char* v = std::getenv("BM_METRICS_DIR")) cfg.paths.metrics_dir = v;
}

}  // namespace bm
