#include "stemedit/trainer.hpp"

#include <chrono>
#include <cmath>
#include <numeric>

namespace stemedit {

LossMode loss_mode_from_string(const std::string& mode) {
  if (mode == "cross_entropy") return LossMode::CrossEntropy;
  if (mode == "l2_embedding") return LossMode::L2Embedding;
  throw ConfigError("unknown loss mode '" + mode + "'");
}

double lr_at(int64_t step, const TrainerConfig& cfg) {
  if (step < 0 || step > cfg.total_steps) throw InputError("lr_at: step outside [0, total_steps]");
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
    return cfg.lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  int64_t span = cfg.total_steps - cfg.warmup_steps;
  if (span <= 0) return cfg.lr;
  double phase = static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(span);
  return cfg.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * phase));
}

double compute_loss(const std::vector<Mat<double>>& logits, const TokenGrid& target, LossMode mode,
                    const std::vector<Mat<double>>* embedding_tables) {
  const auto n = static_cast<size_t>(target.n_codebooks());
  if (logits.size() != n) throw InputError("compute_loss: logits/codebook count mismatch");
  double total = 0.0;
  for (size_t c = 0; c < n; ++c) {
    const Mat<double>& lg = logits[c];
    if (lg.rows() != target.n_frames()) throw InputError("compute_loss: frame count mismatch");
    if (mode == LossMode::CrossEntropy) {
      double nll = 0.0;
      for (Eigen::Index f = 0; f < lg.rows(); ++f) {
        int32_t tok = target.tokens(static_cast<Eigen::Index>(c), f);
        if (tok < 0 || tok >= lg.cols()) throw InputError("compute_loss: token out of range");
        double m = lg.row(f).maxCoeff();
        double s = (lg.row(f).array() - m).exp().sum();
        nll -= lg(f, tok) - m - std::log(s);
      }
      total += nll / static_cast<double>(lg.rows());
    } else {
      if (embedding_tables == nullptr || embedding_tables->size() != n)
        throw ConfigError("compute_loss: l2_embedding mode needs the embedding tables");
      const Mat<double>& table = (*embedding_tables)[c];
      double acc = 0.0;
      for (Eigen::Index f = 0; f < lg.rows(); ++f) {
        int32_t tok = target.tokens(static_cast<Eigen::Index>(c), f);
        double m = lg.row(f).maxCoeff();
        Eigen::ArrayXd e = (lg.row(f).transpose().array() - m).exp();
        Eigen::VectorXd p = (e / e.sum()).matrix();
        Eigen::VectorXd predicted = table.transpose() * p;
        acc += (predicted - table.row(tok).transpose()).squaredNorm();
      }
      total += acc / static_cast<double>(lg.rows() * table.cols());
    }
  }
  return total / static_cast<double>(n);
}

bool wants_weight_decay(const std::string& name) {
  auto slash = name.find_last_of('/');
  std::string last = (slash == std::string::npos) ? name : name.substr(slash + 1);
  static const char* decayed[] = {"wq", "wk", "wv", "wo", "w1", "w2",
                                  "linear_cond", "linear_cond_in", "linear_cond_out", "a", "b"};
  for (const char* d : decayed)
    if (last == d) return true;
  if (name.rfind("base/head/", 0) == 0) return true;
  return false;
}

void AdamW::init(const std::vector<Parameter<float>*>& params) {
  slots.clear();
  t = 0;
  for (const auto* p : params) {
    Slot s;
    s.m = Mat<float>::Zero(p->value.rows(), p->value.cols());
    s.v = Mat<float>::Zero(p->value.rows(), p->value.cols());
    slots.push_back(std::move(s));
  }
}

void AdamW::step(const std::vector<Parameter<float>*>& params, double lr,
                 const TrainerConfig& cfg) {
  if (slots.size() != params.size()) throw InputError("AdamW: slot/parameter count mismatch");
  ++t;
  const float b1 = static_cast<float>(cfg.beta1), b2 = static_cast<float>(cfg.beta2);
  const float bc1 = 1.0f - std::pow(b1, static_cast<float>(t));
  const float bc2 = 1.0f - std::pow(b2, static_cast<float>(t));
  const float eps = static_cast<float>(cfg.adam_eps);
  for (size_t i = 0; i < params.size(); ++i) {
    Parameter<float>& p = *params[i];
    Slot& s = slots[i];
    float wd = wants_weight_decay(p.name) ? static_cast<float>(cfg.weight_decay) : 0.0f;
    s.m = b1 * s.m + (1.0f - b1) * p.grad;
    s.v = (b2 * s.v.array() + (1.0f - b2) * p.grad.array().square()).matrix();
    auto mhat = s.m.array() / bc1;
    auto vhat = s.v.array() / bc2;
    p.value.array() -=
        static_cast<float>(lr) * (mhat / (vhat.sqrt() + eps) + wd * p.value.array());
  }
}

double clip_gradients(const std::vector<Parameter<float>*>& params, double clip) {
  double sq = 0.0;
  for (const auto* p : params) sq += p->grad.cast<double>().squaredNorm();
  double norm = std::sqrt(sq);
  if (clip > 0.0 && norm > clip) {
    float k = static_cast<float>(clip / norm);
    for (auto* p : params)
      const_cast<Parameter<float>*>(p)->grad *= k;
  }
  return norm;
}

namespace {

std::vector<Parameter<float>*> trainable_set(FusionParams<float>& fusion, LoraSet<float>* lora) {
  std::vector<Parameter<float>*> out = fusion.params();
  if (lora) {
    auto lp = lora->params();
    out.insert(out.end(), lp.begin(), lp.end());
  }
  return out;
}

void check_finite(double loss, int64_t step, const char* what) {
  if (!std::isfinite(loss))
    throw std::runtime_error(std::string(what) + ": non-finite loss at step " +
                             std::to_string(step) + " (" + std::to_string(loss) + ")");
}

}  // namespace

double finetune_step(BaseModel<float>& base, FusionParams<float>& fusion, LoraSet<float>* lora,
                     const std::vector<const TokenizedTriplet*>& batch, TrainState& state,
                     const TrainerConfig& cfg) {
  if (!base.frozen) throw InputError("finetune_step: base must be frozen");
  if (batch.empty()) throw InputError("finetune_step: empty batch");
  LossMode mode = loss_mode_from_string(cfg.loss_mode);
  auto trainables = trainable_set(fusion, lora);
  if (state.opt.slots.empty()) state.opt.init(trainables);

  const float scale = 1.0f / static_cast<float>(batch.size());
  double loss_sum = 0.0;
  for (const TokenizedTriplet* item : batch) {
    Tape<float> tape;
    auto out = fused_decoder_forward(tape, base, item->target, item->condition,
                                     item->instruction, &fusion, lora);
    auto loss = tape.scale_const(loss_node(tape, base, out, item->target, mode), scale);
    loss_sum += tape.value(loss)(0, 0) / scale;
    tape.backward(loss);
  }
  double mean_loss = loss_sum / static_cast<double>(batch.size());
  check_finite(mean_loss, state.step, "finetune_step");

  clip_gradients(trainables, cfg.clip_norm);
  state.opt.step(trainables, lr_at(state.step, cfg), cfg);
  for (auto* p : trainables) p->zero_grad();
  ++state.step;
  return mean_loss;
}

double pretrain_step(BaseModel<float>& base, const std::vector<const PretrainItem*>& batch,
                     TrainState& state, const TrainerConfig& cfg) {
  if (base.frozen) throw InputError("pretrain_step: base is frozen");
  if (batch.empty()) throw InputError("pretrain_step: empty batch");
  auto trainables = base.params();
  if (state.opt.slots.empty()) state.opt.init(trainables);

  const float scale = 1.0f / static_cast<float>(batch.size());
  double loss_sum = 0.0;
  for (const PretrainItem* item : batch) {
    Tape<float> tape;
    auto music = teacher_input(tape, base, item->target);
    auto text = text_forward(tape, base, item->description);
    std::vector<uint8_t> mask(item->description.size(), 1);
    auto out = decoder_forward<float>(tape, base, music, text, mask);
    auto loss =
        tape.scale_const(loss_node(tape, base, out, item->target, LossMode::CrossEntropy), scale);
    loss_sum += tape.value(loss)(0, 0) / scale;
    tape.backward(loss);
  }
  double mean_loss = loss_sum / static_cast<double>(batch.size());
  check_finite(mean_loss, state.step, "pretrain_step");

  clip_gradients(trainables, cfg.clip_norm);
  state.opt.step(trainables, lr_at(state.step, cfg), cfg);
  for (auto* p : trainables) p->zero_grad();
  ++state.step;
  return mean_loss;
}

namespace {

// Data order is a fixed shuffled cycle derived from the seed; resuming at
// step s replays exactly the batches a fresh run would see.
std::vector<size_t> data_order(size_t n, uint64_t seed) {
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(mix_seed(seed, 0x0bde));
  rng.shuffle(order);
  return order;
}

template <typename Item, typename StepFn>
std::vector<TrainLogEntry> run_loop(const std::vector<Item>& items, const TrainerConfig& cfg,
                                    TrainState& state, const StepCallback& on_step,
                                    const StepFn& step_fn) {
  if (items.empty()) throw InputError("training: empty corpus");
  std::vector<size_t> order = data_order(items.size(), state.seed);
  const size_t per_step =
      static_cast<size_t>(cfg.batch_size) * static_cast<size_t>(cfg.grad_accum);
  std::vector<TrainLogEntry> log;
  while (state.step < cfg.total_steps) {
    std::vector<const Item*> batch;
    batch.reserve(per_step);
    size_t cursor = static_cast<size_t>(state.step) * per_step;
    for (size_t k = 0; k < per_step; ++k)
      batch.push_back(&items[order[(cursor + k) % order.size()]]);
    auto t0 = std::chrono::steady_clock::now();
    int64_t step_index = state.step;
    double lr = lr_at(step_index, cfg);
    double loss = step_fn(batch);
    auto t1 = std::chrono::steady_clock::now();
    TrainLogEntry e{step_index, loss,
                    lr,
                    std::chrono::duration<double, std::milli>(t1 - t0).count()};
    log.push_back(e);
    if (on_step) on_step(e, state);
  }
  return log;
}

}  // namespace

std::vector<TrainLogEntry> finetune_loop(BaseModel<float>& base, FusionParams<float>& fusion,
                                         LoraSet<float>* lora,
                                         const std::vector<TokenizedTriplet>& items,
                                         const TrainerConfig& cfg, TrainState& state,
                                         const StepCallback& on_step) {
  return run_loop(items, cfg, state, on_step,
                  [&](const std::vector<const TokenizedTriplet*>& batch) {
                    return finetune_step(base, fusion, lora, batch, state, cfg);
                  });
}

std::vector<TrainLogEntry> pretrain_loop(BaseModel<float>& base,
                                         const std::vector<PretrainItem>& items,
                                         const TrainerConfig& cfg, TrainState& state,
                                         const StepCallback& on_step) {
  return run_loop(items, cfg, state, on_step, [&](const std::vector<const PretrainItem*>& batch) {
    return pretrain_step(base, batch, state, cfg);
  });
}

double teacher_forced_accuracy(BaseModel<float>& base, FusionParams<float>* fusion,
                               LoraSet<float>* lora, const std::vector<TokenizedTriplet>& items) {
  if (items.empty()) throw InputError("teacher_forced_accuracy: no items");
  int64_t hits = 0, total = 0;
  for (const auto& item : items) {
    Tape<float> tape;
    tape.set_inference(true);
    auto out =
        fused_decoder_forward(tape, base, item.target, item.condition, item.instruction, fusion, lora);
    for (int c = 0; c < base.n_codebooks; ++c) {
      const Mat<float>& lg = tape.value(out.logits[static_cast<size_t>(c)]);
      for (Eigen::Index f = 0; f < lg.rows(); ++f) {
        Eigen::Index best = 0;
        lg.row(f).maxCoeff(&best);
        hits += (best == item.target.tokens(c, f)) ? 1 : 0;
        ++total;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(total);
}

double mean_eval_loss(BaseModel<float>& base, FusionParams<float>* fusion, LoraSet<float>* lora,
                      const std::vector<TokenizedTriplet>& items, LossMode mode) {
  if (items.empty()) throw InputError("mean_eval_loss: no items");
  double total = 0.0;
  for (const auto& item : items) {
    Tape<float> tape;
    tape.set_inference(true);
    auto out =
        fused_decoder_forward(tape, base, item.target, item.condition, item.instruction, fusion, lora);
    total += tape.value(loss_node(tape, base, out, item.target, mode))(0, 0);
  }
  return total / static_cast<double>(items.size());
}

std::vector<GradCheckEntry> grad_check(const RunConfig& cfg, uint64_t seed, double h, int frames) {
  auto base = BaseModel<double>::init(cfg, seed);
  base.set_frozen(true);
  auto fusion = FusionParams<double>::init(cfg, seed);
  auto lora = LoraSet<double>::init(cfg, seed);
  LossMode mode = loss_mode_from_string(cfg.trainer.loss_mode);

  // Move off the zero-gate / zero-B init point so every gradient path is live.
  Rng rng(mix_seed(seed, 0x9cad));
  for (auto& layer : fusion.layers) layer.gate.value(0, 0) = 0.1 * rng.normal();
  for (auto& pair : lora.q)
    for (Eigen::Index i = 0; i < pair.b.value.size(); ++i) pair.b.value.data()[i] = 0.02 * rng.normal();
  for (auto& pair : lora.v)
    for (Eigen::Index i = 0; i < pair.b.value.size(); ++i) pair.b.value.data()[i] = 0.02 * rng.normal();

  TokenizedTriplet item;
  item.instruction = base.text.vocab.tokenize("Remove bass");
  item.condition.tokens.resize(cfg.codec.n_codebooks, frames);
  item.target.tokens.resize(cfg.codec.n_codebooks, frames);
  for (Eigen::Index c = 0; c < item.condition.tokens.rows(); ++c)
    for (Eigen::Index f = 0; f < frames; ++f) {
      item.condition.tokens(c, f) =
          static_cast<int32_t>(rng.uniform_int(0, cfg.codec.codebook_size - 1));
      item.target.tokens(c, f) =
          static_cast<int32_t>(rng.uniform_int(0, cfg.codec.codebook_size - 1));
    }

  auto loss_value = [&]() {
    Tape<double> tape;
    tape.set_inference(true);
    auto out = fused_decoder_forward(tape, base, item.target, item.condition, item.instruction,
                                     &fusion, &lora);
    return tape.value(loss_node(tape, base, out, item.target, mode))(0, 0);
  };

  std::vector<Parameter<double>*> trainables = fusion.params();
  {
    auto lp = lora.params();
    trainables.insert(trainables.end(), lp.begin(), lp.end());
  }
  for (auto* p : trainables) p->zero_grad();
  {
    Tape<double> tape;
    auto out = fused_decoder_forward(tape, base, item.target, item.condition, item.instruction,
                                     &fusion, &lora);
    tape.backward(loss_node(tape, base, out, item.target, mode));
  }

  std::vector<GradCheckEntry> report;
  for (auto* p : trainables) {
    GradCheckEntry entry;
    entry.name = p->name;
    for (Eigen::Index i = 0; i < p->value.rows(); ++i) {
      for (Eigen::Index j = 0; j < p->value.cols(); ++j) {
        double keep = p->value(i, j);
        p->value(i, j) = keep + h;
        double up = loss_value();
        p->value(i, j) = keep - h;
        double dn = loss_value();
        p->value(i, j) = keep;
        double fd = (up - dn) / (2.0 * h);
        double an = p->grad(i, j);
        double rel = std::abs(an - fd) / std::max({1.0, std::abs(an), std::abs(fd)});
        entry.max_rel_err = std::max(entry.max_rel_err, rel);
        entry.analytic_max_abs = std::max(entry.analytic_max_abs, std::abs(an));
      }
    }
    report.push_back(std::move(entry));
  }
  return report;
}

}  // namespace stemedit
