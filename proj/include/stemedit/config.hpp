#pragma once

#include <cstdint>
#include <string>

#include "stemedit/common.hpp"

namespace stemedit {

struct CodecConfig {
  int sample_rate = 16000;   // audio rate, Hz
  int frame_rate = 50;       // token rate, Hz
  int n_codebooks = 4;
  int codebook_size = 64;
  int feature_dim = 32;
  int kmeans_iters = 25;

  int window() const { return sample_rate / frame_rate; }
};

struct ModelConfig {
  int d_model = 64;
  int n_layers = 4;
  int n_heads = 4;
  int ffn_mult = 4;
  int d_text = 32;
  int text_layers = 2;
  int t_max = 256;  // longest supported frame sequence
};

struct FusionConfig {
  int bottleneck = 0;  // 0 = full d_model x d_model per-layer linears
};

struct LoraConfig {
  int rank = 8;
  double scale = 1.0;
};

struct DatagenConfig {
  int n_stems = 3;
  double track_duration = 12.0;
  double clip_duration = 5.0;
  double silence_frame_ms = 25.0;
  double silence_rms_threshold = 1e-3;
  double silence_max_fraction = 0.5;
  int offset_retries = 16;
  std::string instruments = "drums,bass,piano,guitar";
};

struct TrainerConfig {
  double lr = 5e-3;
  int warmup_steps = 100;
  int total_steps = 2000;
  int batch_size = 8;
  int grad_accum = 4;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  std::string loss_mode = "cross_entropy";  // or "l2_embedding"
  bool text_fusion = true;
  int checkpoint_every = 500;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
};

struct MetricsConfig {
  int ssim_fft = 1024;
  int ssim_hop = 256;
  double sisdr_cap_db = 100.0;
};

/// Merged configuration of every stage; fully echoed into checkpoints and
/// reports so a run can be reproduced from its artifacts.
struct RunConfig {
  uint64_t seed = 1234;
  CodecConfig codec;
  ModelConfig model;
  FusionConfig fusion;
  LoraConfig lora;
  DatagenConfig datagen;
  TrainerConfig trainer;
  MetricsConfig metrics;
};

/// Applies one "a.b.c = value" assignment; unknown keys are rejected.
void apply_config_kv(RunConfig& cfg, const std::string& key, const std::string& value);

/// Loads dotted-key assignments from a text file over the given defaults.
/// Lines starting with '#' and blank lines are ignored.
RunConfig load_config_file(const std::string& path, RunConfig defaults = {});

/// Parses config text (same format as the file loader).
RunConfig parse_config_text(const std::string& text, RunConfig defaults = {});

/// Renders every key in sorted order, one "key = value" per line.
std::string serialize_config(const RunConfig& cfg);

/// The named large configuration used only for parameter accounting;
/// never trained or allocated at this size.
RunConfig full_scale_config();

}  // namespace stemedit
