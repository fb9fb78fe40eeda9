#pragma once

#include <memory>
#include <string>
#include <vector>

#include "stemedit/checkpoint.hpp"
#include "stemedit/metrics.hpp"
#include "stemedit/trainer.hpp"

namespace stemedit {

/// Everything needed to run inference: codec, base model, and (after
/// finetuning) the fusion and LoRA adapters.
struct ModelBundle {
  RunConfig cfg;
  CodebookStack codec;
  BaseModel<float> base;
  std::unique_ptr<FusionParams<float>> fusion;
  std::unique_ptr<LoraSet<float>> lora;
};

void save_bundle(ModelBundle& bundle, const TrainState* state, const std::string& path);

ModelBundle load_bundle(const std::string& path, TrainState* state_out = nullptr);

/// Encodes one manifest triplet into token space.
TokenizedTriplet tokenize_triplet(const ModelBundle& bundle, BaseModel<float>& base,
                                  const ManifestRecord& rec, const std::string& root);

std::vector<TokenizedTriplet> tokenize_triplets(ModelBundle& bundle,
                                                const std::vector<ManifestRecord>& records,
                                                const std::string& root);

/// Deterministic (description, token grid) items cut from synthetic tracks.
std::vector<PretrainItem> build_pretrain_items(const std::vector<Track>& tracks,
                                               const CodebookStack& codec, const Vocab& vocab,
                                               const DatagenConfig& dg, int count, uint64_t seed);

/// One-shot edit: encode, generate with the adapters, decode, trim to the
/// input length.
Waveform edit_waveform(ModelBundle& bundle, const Waveform& input, const std::string& instruction,
                       const Sampling& sampling);

/// Embedding function backed by the codec's analysis features.
EmbeddingFn codec_embedding_fn(CodebookStack codec);

/// Greedy, seeded generation function over manifest records.
GenerateFn bundle_generate_fn(ModelBundle& bundle);

// ---- subcommand bodies ------------------------------------------------------

void cmd_gen_corpus(const RunConfig& cfg, int n_tracks, const std::string& out_dir);

std::vector<ManifestRecord> cmd_make_triplets(const RunConfig& cfg, const std::string& tracks_dir,
                                              int count, const std::string& out_dir);

void cmd_pretrain(const RunConfig& cfg, const std::string& tracks_dir, int n_items,
                  const std::string& out_ckpt, const std::string& log_path);

void cmd_finetune(const RunConfig& user_cfg, const std::string& base_ckpt,
                  const std::string& triplets_dir, const std::string& out_ckpt,
                  const std::string& log_path);

MetricsReport cmd_eval(ModelBundle& bundle, const std::string& triplets_dir);

}  // namespace stemedit
