#pragma once

// Versioned, self-describing checkpoint container.
// Layout: magic "BMCK" | u32 version | u64 header length | header JSON |
// raw little-endian parameter blobs. The header carries the model config,
// the element type, and per-parameter (name, shape, offset, nbytes).
// Round-trips are bit-exact.

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <string>

#include "bm/model.hpp"
#include "json.hpp"

namespace bm {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes little-endian");

inline constexpr char kCheckpointMagic[4] = {'B', 'M', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return nlohmann::json{{"variant", variant_name(c.variant)},
                        {"n_layers", c.n_layers},
                        {"d_model", c.d_model},
                        {"expansion", c.expansion},
                        {"state_size", c.state_size},
                        {"dt_rank", c.dt_rank},
                        {"conv_dim", c.conv_dim},
                        {"n_experts", c.n_experts},
                        {"ffn_hidden", c.ffn_hidden},
                        {"vocab_size", c.vocab_size},
                        {"max_seq_len", c.max_seq_len},
                        {"n_heads", c.n_heads},
                        {"expert_kind", c.expert_kind == ExpertKind::swiglu ? "swiglu" : "standard"},
                        {"gate_mode", c.gate_mode == GateMode::one ? "one" : "sigmoid"},
                        {"tie_embeddings", c.tie_embeddings}};
}

inline Variant variant_from_name(const std::string& name) {
  if (name == "transformer") return Variant::transformer;
  if (name == "mamba") return Variant::mamba;
  if (name == "transformer-moe") return Variant::transformer_moe;
  if (name == "mamba-moe") return Variant::mamba_moe;
  throw ConfigError(strcat("unknown variant '", name,
                           "' (expected transformer, mamba, transformer-moe, or mamba-moe)"));
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.variant = variant_from_name(j.at("variant").get<std::string>());
  c.n_layers = j.at("n_layers").get<int>();
  c.d_model = j.at("d_model").get<i64>();
  c.expansion = j.at("expansion").get<int>();
  c.state_size = j.at("state_size").get<i64>();
  c.dt_rank = j.at("dt_rank").get<i64>();
  c.conv_dim = j.at("conv_dim").get<i64>();
  c.n_experts = j.at("n_experts").get<i64>();
  c.ffn_hidden = j.at("ffn_hidden").get<i64>();
  c.vocab_size = j.at("vocab_size").get<i64>();
  c.max_seq_len = j.at("max_seq_len").get<i64>();
  c.n_heads = j.at("n_heads").get<int>();
  c.expert_kind = j.at("expert_kind").get<std::string>() == "swiglu" ? ExpertKind::swiglu
                                                                     : ExpertKind::standard;
  c.gate_mode = j.at("gate_mode").get<std::string>() == "one" ? GateMode::one : GateMode::sigmoid;
  c.tie_embeddings = j.at("tie_embeddings").get<bool>();
  return c;
}

template <typename T>
const char* dtype_name() {
  if constexpr (sizeof(T) == 4) return "f32";
  else return "f64";
}

template <typename T>
void save_checkpoint(const std::string& path, ModelParams<T>& params) {
  nlohmann::json header;
  header["dtype"] = dtype_name<T>();
  header["config"] = config_to_json(params.config);
  header["seed"] = params.seed;
  nlohmann::json entries = nlohmann::json::array();
  u64 offset = 0;
  params.visit([&](const std::string& name, Tensor<T>& t) {
    const u64 nbytes = static_cast<u64>(t.numel()) * sizeof(T);
    entries.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"nbytes", nbytes}});
    offset += nbytes;
  });
  header["params"] = entries;
  const std::string htext = header.dump();

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  check(f.good(), "cannot open checkpoint for writing: ", path);
  f.write(kCheckpointMagic, 4);
  const std::uint32_t ver = kCheckpointVersion;
  f.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
  const u64 hlen = htext.size();
  f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  f.write(htext.data(), static_cast<std::streamsize>(htext.size()));
  params.visit([&](const std::string&, Tensor<T>& t) {
    f.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * static_cast<i64>(sizeof(T))));
  });
  check(f.good(), "checkpoint write failed: ", path);
}

template <typename T>
ModelParams<T> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  check(f.good(), "cannot open checkpoint: ", path);
  char magic[4];
  f.read(magic, 4);
  check(f.good() && std::memcmp(magic, kCheckpointMagic, 4) == 0, "not a checkpoint file: ", path);
  std::uint32_t ver = 0;
  f.read(reinterpret_cast<char*>(&ver), sizeof(ver));
  check(ver == kCheckpointVersion, "unsupported checkpoint version ", ver);
  u64 hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string htext(hlen, '\0');
  f.read(htext.data(), static_cast<std::streamsize>(hlen));
  check(f.good(), "truncated checkpoint header: ", path);
  nlohmann::json header = nlohmann::json::parse(htext);
  check(header.at("dtype").get<std::string>() == dtype_name<T>(), "checkpoint dtype is ",
        header.at("dtype").get<std::string>(), ", expected ", dtype_name<T>());
  ModelConfig cfg = config_from_json(header.at("config"));
  ModelParams<T> params = ModelParams<T>::init(cfg, header.value("seed", u64(0)));

  const std::streampos blob_start = f.tellg();
  std::map<std::string, std::pair<u64, u64>> index;
  for (const auto& e : header.at("params"))
    index[e.at("name").get<std::string>()] = {e.at("offset").get<u64>(), e.at("nbytes").get<u64>()};
  params.visit([&](const std::string& name, Tensor<T>& t) {
    auto it = index.find(name);
    check(it != index.end(), "checkpoint is missing parameter ", name);
    const auto [off, nbytes] = it->second;
    check(nbytes == static_cast<u64>(t.numel()) * sizeof(T), "checkpoint size mismatch for ", name);
    f.seekg(blob_start + static_cast<std::streamoff>(off));
    f.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(nbytes));
    check(f.good(), "truncated checkpoint blob for ", name);
  });
  return params;
}

}  // namespace bm
