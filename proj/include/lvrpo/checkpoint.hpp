#pragma once

#include <string>

#include "json.hpp"
#include "lvrpo/model.hpp"
#include "lvrpo/referee.hpp"

namespace lvrpo {

// Container: "LVRP" magic, u32 format version, u64 manifest length, manifest
// JSON (tensor directory with offsets and checksums, config snapshot, step,
// role), then the raw float32 little-endian payload in manifest order.
constexpr int kCheckpointVersion = 1;

struct CheckpointInfo {
  std::string role;  // policy | reference | referee
  long step = 0;
  nlohmann::ordered_json config;
  std::uint64_t frozen_checksum = 0;  // referee role only
};

void save_checkpoint(const ParamStore<float>& params, const CheckpointInfo& info, const std::string& path);

struct LoadedCheckpoint {
  ParamStore<float> params;
  CheckpointInfo info;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

nlohmann::ordered_json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::ordered_json& j);

void save_policy_checkpoint(const Policy& policy, const std::string& role, long step,
                            const std::string& path,
                            const nlohmann::ordered_json& provenance = nlohmann::ordered_json());
Policy load_policy_checkpoint(const std::string& path, CheckpointInfo* info = nullptr);

void save_referee_checkpoint(const Referee& referee, long step, const std::string& path,
                             const nlohmann::ordered_json& provenance = nlohmann::ordered_json());
Referee load_referee_checkpoint(const std::string& path, CheckpointInfo* info = nullptr);

std::uint64_t file_checksum(const std::string& path);

}  // namespace lvrpo
