#include "lvrpo/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>

namespace lvrpo {

using nlohmann::ordered_json;

namespace {

constexpr char kMagic[4] = {'L', 'V', 'R', 'P'};

std::uint64_t fnv1a(const unsigned char* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t parse_hex64(const std::string& s) { return std::strtoull(s.c_str(), nullptr, 16); }

template <class T>
void write_le(std::ofstream& f, T v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_le(std::ifstream& f) {
  T v{};
  f.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}

}  // namespace

void save_checkpoint(const ParamStore<float>& params, const CheckpointInfo& info, const std::string& path) {
  ordered_json manifest;
  manifest["format_version"] = kCheckpointVersion;
  manifest["role"] = info.role;
  manifest["step"] = info.step;
  manifest["config"] = info.config;
  if (info.role == "referee") manifest["frozen_checksum"] = hex64(info.frozen_checksum);
  ordered_json tensors = ordered_json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : params.items) {
    const std::size_t bytes = t.numel() * sizeof(float);
    ordered_json entry;
    entry["name"] = name;
    entry["shape"] = t.shape;
    entry["offset"] = offset;
    entry["checksum"] = hex64(fnv1a(reinterpret_cast<const unsigned char*>(t.ptr()), bytes));
    tensors.push_back(entry);
    offset += bytes;
  }
  manifest["tensors"] = tensors;

  std::ofstream f(path, std::ios::binary);
  if (!f) fail("cannot write checkpoint: " + path);
  f.write(kMagic, 4);
  write_le<std::uint32_t>(f, kCheckpointVersion);
  const std::string mjson = manifest.dump();
  write_le<std::uint64_t>(f, mjson.size());
  f.write(mjson.data(), static_cast<std::streamsize>(mjson.size()));
  for (const auto& [name, t] : params.items) {
    f.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.numel() * sizeof(float)));
  }
  if (!f) fail("short write to checkpoint: " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail("cannot read checkpoint: " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kMagic, 4) != 0) fail("not a checkpoint file (bad magic): " + path);
  const auto version = read_le<std::uint32_t>(f);
  if (version != kCheckpointVersion) {
    fail("checkpoint format version " + std::to_string(version) + " unsupported (expected " +
         std::to_string(kCheckpointVersion) + ")");
  }
  const auto mlen = read_le<std::uint64_t>(f);
  std::string mjson(mlen, '\0');
  f.read(mjson.data(), static_cast<std::streamsize>(mlen));
  if (!f) fail("truncated checkpoint manifest: " + path);
  ordered_json manifest = ordered_json::parse(mjson);

  LoadedCheckpoint out;
  out.info.role = manifest.at("role").get<std::string>();
  out.info.step = manifest.at("step").get<long>();
  out.info.config = manifest.at("config");
  if (manifest.contains("frozen_checksum")) {
    out.info.frozen_checksum = parse_hex64(manifest.at("frozen_checksum").get<std::string>());
  }
  for (const auto& entry : manifest.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    const std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
    Tensor<float> t = Tensor<float>::zeros(shape);
    f.read(reinterpret_cast<char*>(t.ptr()), static_cast<std::streamsize>(t.numel() * sizeof(float)));
    if (!f) fail("truncated checkpoint payload: " + path);
    const std::uint64_t sum = fnv1a(reinterpret_cast<const unsigned char*>(t.ptr()), t.numel() * sizeof(float));
    if (hex64(sum) != entry.at("checksum").get<std::string>()) {
      fail("corrupt checkpoint payload for tensor '" + name + "' in " + path);
    }
    t.set_requires_grad();
    out.params.items.emplace_back(name, std::move(t));
  }
  return out;
}

nlohmann::ordered_json model_config_to_json(const ModelConfig& cfg) {
  ordered_json j;
  j["d_model"] = cfg.d_model;
  j["n_layers"] = cfg.n_layers;
  j["n_heads"] = cfg.n_heads;
  j["vocab_size"] = cfg.vocab();
  j["n_visual_tokens"] = cfg.n_visual_tokens;
  j["max_seq_len"] = cfg.max_seq_len;
  j["expert_hidden"] = cfg.hidden();
  j["router_mode"] = cfg.router_mode == RouterMode::LearnedTop2 ? "learned_top2" : "modality_hard";
  return j;
}

ModelConfig model_config_from_json(const ordered_json& j) {
  ModelConfig cfg;
  cfg.d_model = j.at("d_model").get<int>();
  cfg.n_layers = j.at("n_layers").get<int>();
  cfg.n_heads = j.at("n_heads").get<int>();
  cfg.vocab_size = j.at("vocab_size").get<int>();
  cfg.n_visual_tokens = j.at("n_visual_tokens").get<int>();
  cfg.max_seq_len = j.at("max_seq_len").get<int>();
  cfg.expert_hidden = j.at("expert_hidden").get<int>();
  const std::string mode = j.at("router_mode").get<std::string>();
  if (mode == "learned_top2") cfg.router_mode = RouterMode::LearnedTop2;
  else if (mode == "modality_hard") cfg.router_mode = RouterMode::ModalityHard;
  else fail("unknown router mode in checkpoint: " + mode);
  return cfg;
}

void save_policy_checkpoint(const Policy& policy, const std::string& role, long step,
                            const std::string& path, const nlohmann::ordered_json& provenance) {
  if (role != "policy" && role != "reference") fail("bad policy checkpoint role: " + role);
  CheckpointInfo info;
  info.role = role;
  info.step = step;
  info.config = ordered_json{{"model", model_config_to_json(policy.cfg)}};
  if (!provenance.is_null() && !provenance.empty()) info.config["run"] = provenance;
  save_checkpoint(policy.params, info, path);
}

Policy load_policy_checkpoint(const std::string& path, CheckpointInfo* info_out) {
  LoadedCheckpoint lc = load_checkpoint(path);
  if (lc.info.role != "policy" && lc.info.role != "reference") {
    fail("checkpoint at " + path + " has role '" + lc.info.role + "', expected a policy");
  }
  Policy p;
  p.cfg = model_config_from_json(lc.info.config.at("model"));
  p.params = std::move(lc.params);
  if (info_out) *info_out = lc.info;
  return p;
}

void save_referee_checkpoint(const Referee& referee, long step, const std::string& path,
                             const nlohmann::ordered_json& provenance) {
  CheckpointInfo info;
  info.role = "referee";
  info.step = step;
  info.frozen_checksum = referee.frozen_checksum;
  ordered_json rc;
  rc["dim"] = referee.cfg.dim;
  rc["n_layers"] = referee.cfg.n_layers;
  rc["n_heads"] = referee.cfg.n_heads;
  rc["ffn_hidden"] = referee.cfg.ffn_hidden;
  rc["max_text"] = referee.cfg.max_text;
  rc["frozen"] = referee.frozen;
  info.config = ordered_json{{"referee", rc}};
  if (!provenance.is_null() && !provenance.empty()) info.config["run"] = provenance;
  save_checkpoint(referee.params, info, path);
}

Referee load_referee_checkpoint(const std::string& path, CheckpointInfo* info_out) {
  LoadedCheckpoint lc = load_checkpoint(path);
  if (lc.info.role != "referee") {
    fail("checkpoint at " + path + " has role '" + lc.info.role + "', expected a referee");
  }
  Referee r;
  const auto& rc = lc.info.config.at("referee");
  r.cfg.dim = rc.at("dim").get<int>();
  r.cfg.n_layers = rc.at("n_layers").get<int>();
  r.cfg.n_heads = rc.at("n_heads").get<int>();
  r.cfg.ffn_hidden = rc.at("ffn_hidden").get<int>();
  r.cfg.max_text = rc.at("max_text").get<int>();
  r.frozen = rc.at("frozen").get<bool>();
  r.frozen_checksum = lc.info.frozen_checksum;
  r.params = std::move(lc.params);
  if (r.frozen && params_checksum(r.params) != r.frozen_checksum) {
    fail("referee checkpoint " + path + " fails its frozen checksum");
  }
  if (info_out) *info_out = lc.info;
  return r;
}

std::uint64_t file_checksum(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail("cannot read file for checksum: " + path);
  std::uint64_t h = 0xcbf29ce484222325ull;
  char buf[65536];
  while (f) {
    f.read(buf, sizeof(buf));
    h = fnv1a(reinterpret_cast<const unsigned char*>(buf), static_cast<std::size_t>(f.gcount()), h);
  }
  return h;
}

}  // namespace lvrpo
