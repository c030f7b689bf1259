#pragma once

// Checkpoint file: u64 little-endian header length, JSON header (magic
// "PLUGCKPT", version 1, config echo, frozen-base hash, tensor table), then
// raw little-endian f32 tensor data, contiguous row-major, in table order.

#include "plug/config.hpp"
#include "plug/params.hpp"

#include <string>

namespace plug {

struct CheckpointMeta {
  RunConfig config;
  std::string stage = "finetune";  // "pretrain" | "finetune"
  bool lora = false;
  bool dual_branch = false;
  bool refine = false;
  std::string frozen_base_hash;  // SHA-256 hex over the enc.* body region
};

struct LoadedCheckpoint {
  CheckpointMeta meta;
  ParamStore<float> params;
};

// SHA-256 hex of the concatenated f32 bytes of all `enc.*` tensors
std::string frozen_base_hash(const ParamStore<float>& ps);

// meta.frozen_base_hash is filled in from the store
void save_checkpoint(const std::string& path, const ParamStore<float>& ps,
                     CheckpointMeta meta);

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace plug
