#pragma once

#include "plug/syndata.hpp"

#include <cstdint>
#include <string>

namespace plug {

struct EncoderConfig {
  int image_size = 64;
  int patch_size = 8;
  int embed_dim = 128;
  int blocks = 4;
  int heads = 4;
  int mlp_ratio = 4;
  int rank = 4;

  int grid() const { return image_size / patch_size; }
  int tokens() const { return grid() * grid(); }
  int patch_dim() const { return patch_size * patch_size * 3; }
  int head_dim() const { return embed_dim / heads; }

  void validate() const;
};

struct PointLossParams {
  int eps = 3;
  int n = 4;
  double c = 0.75;
  int K = 256;
  double alpha = 0.1;
  double beta = 0.1;
  bool uncertainty_grad = true;
};

struct TrainConfig {
  double lr_peak = 1e-3;
  int warmup_iters = 250;
  int epochs = 50;
  int pretrain_epochs = 20;
  // the 1e-3 peak is tuned for adapter finetuning; training the encoder from
  // scratch collapses there, so pretraining ramps to a lower peak
  double pretrain_lr_peak = 3e-4;
  int batch = 8;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double weight_decay = 0.1;
  double threshold = 0.3;
  std::string threshold_space = "prob";  // "prob" | "logit"
  uint64_t seed = 1;
  // Ablation flags: fine-tuning, point loss, refine module, parallel LoRA
  bool ft = true;
  bool pt = true;
  bool rm = true;
  bool pl = true;
  int refine_blocks = 1;
  int refine_channels = 16;
};

struct RunConfig {
  EncoderConfig encoder;
  TrainConfig train;
  PointLossParams point;
  GeneratorConfig generator;
};

// JSON round trip; unknown keys are rejected, missing keys keep defaults.
RunConfig run_config_from_json_text(const std::string& text);
std::string run_config_to_json_text(const RunConfig& cfg);
RunConfig run_config_from_file(const std::string& path);

}  // namespace plug
