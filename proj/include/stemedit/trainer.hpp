#pragma once

#include <functional>
#include <string>
#include <vector>

#include "stemedit/fusion.hpp"

namespace stemedit {

enum class LossMode { CrossEntropy, L2Embedding };

LossMode loss_mode_from_string(const std::string& mode);

/// One training/eval unit after tokenization.
struct TokenizedTriplet {
  TokenGrid condition;
  TokenGrid target;
  std::vector<int32_t> instruction;
  std::string task;
};

struct PretrainItem {
  std::vector<int32_t> description;
  TokenGrid target;
};

/// Linear warmup to cfg.lr, then cosine decay to zero at total_steps.
double lr_at(int64_t step, const TrainerConfig& cfg);

/// Loss over raw logits (one T x L matrix per codebook). The embedding
/// tables are required for the l2_embedding mode and ignored otherwise.
double compute_loss(const std::vector<Mat<double>>& logits, const TokenGrid& target, LossMode mode,
                    const std::vector<Mat<double>>* embedding_tables = nullptr);

/// Tape-level loss attached to a decoder output.
template <typename T>
typename Tape<T>::Id loss_node(Tape<T>& t, BaseModel<T>& m, const DecoderOutput<T>& out,
                               const TokenGrid& target, LossMode mode) {
  using Id = typename Tape<T>::Id;
  const int n = m.n_codebooks;
  Id total = -1;
  for (int c = 0; c < n; ++c) {
    std::vector<int32_t> targets(static_cast<size_t>(target.n_frames()));
    for (Eigen::Index f = 0; f < target.n_frames(); ++f)
      targets[static_cast<size_t>(f)] = target.tokens(c, f);
    Id part;
    if (mode == LossMode::CrossEntropy) {
      part = t.cross_entropy_rows(out.logits[static_cast<size_t>(c)], targets);
    } else {
      Id probs = t.softmax_rows(out.logits[static_cast<size_t>(c)]);
      Id table = t.leaf(m.tok_emb[static_cast<size_t>(c)]);
      Id predicted = t.matmul(probs, table);
      Id wanted = t.gather_rows(t.leaf(m.tok_emb[static_cast<size_t>(c)]), targets);
      part = t.mse(predicted, wanted);
    }
    total = (c == 0) ? part : t.add(total, part);
  }
  return t.scale_const(total, static_cast<T>(1.0 / n));
}

/// Decoupled weight decay Adam. Decay applies to linear projection weights
/// only; gates, gains, biases and embeddings are exempt.
struct AdamW {
  struct Slot {
    Mat<float> m, v;
  };
  std::vector<Slot> slots;
  int64_t t = 0;

  void init(const std::vector<Parameter<float>*>& params);
  void step(const std::vector<Parameter<float>*>& params, double lr, const TrainerConfig& cfg);
};

bool wants_weight_decay(const std::string& name);

/// Scales gradients so their global norm is at most clip; returns the norm.
double clip_gradients(const std::vector<Parameter<float>*>& params, double clip);

/// Mutable training state. Data order is a pure function of (seed, step), so
/// this plus the parameter values fully determines the rest of a run.
struct TrainState {
  int64_t step = 0;
  AdamW opt;
  uint64_t seed = 0;
};

struct TrainLogEntry {
  int64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double wall_ms = 0.0;
};

/// One optimizer step over batch_size * grad_accum triplets. The base must
/// be frozen; only fusion (and LoRA when given) accumulate gradients.
double finetune_step(BaseModel<float>& base, FusionParams<float>& fusion, LoraSet<float>* lora,
                     const std::vector<const TokenizedTriplet*>& batch, TrainState& state,
                     const TrainerConfig& cfg);

/// One optimizer step of next-token pretraining; every base parameter trains.
double pretrain_step(BaseModel<float>& base, const std::vector<const PretrainItem*>& batch,
                     TrainState& state, const TrainerConfig& cfg);

using StepCallback = std::function<void(const TrainLogEntry&, TrainState&)>;

std::vector<TrainLogEntry> finetune_loop(BaseModel<float>& base, FusionParams<float>& fusion,
                                         LoraSet<float>* lora,
                                         const std::vector<TokenizedTriplet>& items,
                                         const TrainerConfig& cfg, TrainState& state,
                                         const StepCallback& on_step = {});

std::vector<TrainLogEntry> pretrain_loop(BaseModel<float>& base,
                                         const std::vector<PretrainItem>& items,
                                         const TrainerConfig& cfg, TrainState& state,
                                         const StepCallback& on_step = {});

/// Teacher-forced argmax accuracy over all codebooks and frames.
double teacher_forced_accuracy(BaseModel<float>& base, FusionParams<float>* fusion,
                               LoraSet<float>* lora, const std::vector<TokenizedTriplet>& items);

double mean_eval_loss(BaseModel<float>& base, FusionParams<float>* fusion, LoraSet<float>* lora,
                      const std::vector<TokenizedTriplet>& items, LossMode mode);

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  double analytic_max_abs = 0.0;
};

/// Central finite differences against the tape gradients for every trainable
/// tensor of a small float64 model; frozen parameters never appear.
std::vector<GradCheckEntry> grad_check(const RunConfig& cfg, uint64_t seed, double h = 1e-5,
                                       int frames = 4);

}  // namespace stemedit
