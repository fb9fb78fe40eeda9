#pragma once

#include <string>
#include <vector>

#include "stemedit/lora.hpp"
#include "stemedit/model.hpp"

namespace stemedit {

template <typename T>
struct FusionLayerParams {
  Parameter<T> linear;      // d x d (used when bottleneck == 0)
  Parameter<T> linear_in;   // d x mb (bottleneck variant)
  Parameter<T> linear_out;  // mb x d
  Parameter<T> pos;         // t_max x d
  Parameter<T> gate;        // 1x1 scalar, exactly zero at init
};

/// The trainable audio-fusion set: a condition input embedding, one linear
/// and one position table per layer, and one zero-initialized gate per layer.
template <typename T>
struct FusionParams {
  int bottleneck = 0;
  int t_max = 0;
  Parameter<T> z0;  // 1 x d, broadcast over time as the layer-0 condition state
  std::vector<FusionLayerParams<T>> layers;

  static FusionParams init(const RunConfig& rc, uint64_t seed) {
    FusionParams f;
    f.bottleneck = rc.fusion.bottleneck;
    f.t_max = rc.model.t_max;
    Rng rng(mix_seed(seed, 0xf0510));
    const Eigen::Index d = rc.model.d_model;
    f.z0 = Parameter<T>("fusion/z0_cond", detail::randn_mat<T>(rng, 1, d, 0.02));
    for (int l = 0; l < rc.model.n_layers; ++l) {
      std::string base = "fusion/layer" + std::to_string(l);
      FusionLayerParams<T> lp;
      if (f.bottleneck > 0) {
        lp.linear_in = Parameter<T>(base + "/linear_cond_in",
                                    detail::randn_mat<T>(rng, d, f.bottleneck, 0.02));
        lp.linear_out = Parameter<T>(base + "/linear_cond_out",
                                     detail::randn_mat<T>(rng, f.bottleneck, d, 0.02));
      } else {
        lp.linear = Parameter<T>(base + "/linear_cond", detail::randn_mat<T>(rng, d, d, 0.02));
      }
      lp.pos = Parameter<T>(base + "/pos_emb", detail::randn_mat<T>(rng, rc.model.t_max, d, 0.02));
      lp.gate = Parameter<T>(base + "/gate", Mat<T>::Zero(1, 1));
      f.layers.push_back(std::move(lp));
    }
    return f;
  }

  std::vector<Parameter<T>*> params() {
    std::vector<Parameter<T>*> out;
    out.push_back(&z0);
    for (auto& l : layers) {
      if (bottleneck > 0) {
        out.push_back(&l.linear_in);
        out.push_back(&l.linear_out);
      } else {
        out.push_back(&l.linear);
      }
      out.push_back(&l.pos);
      out.push_back(&l.gate);
    }
    return out;
  }
};

/// Per-layer activations and projections of the condition stream.
template <typename T>
struct ConditionStates {
  std::vector<typename Tape<T>::Id> q, k, v;  // layer m projections of its input
  std::vector<typename Tape<T>::Id> states;   // z^0 .. z^M (n_layers + 1 entries)
};

/// Runs the condition stream: layer m consumes z^{m-1} plus the injected
/// Linear_cond^m(z_cond) + e_m, projects through the frozen duplicated
/// self-attention weights of the base layer, and emits z^m with no residual
/// path and no feed-forward.
template <typename T>
ConditionStates<T> condition_forward(Tape<T>& t, BaseModel<T>& m, FusionParams<T>& f,
                                     typename Tape<T>::Id cond_embedding,
                                     ForwardTrace<T>* trace = nullptr) {
  using Id = typename Tape<T>::Id;
  const Eigen::Index frames = t.value(cond_embedding).rows();
  if (frames > f.t_max) throw ConfigError("condition_forward: sequence longer than t_max");
  if (f.layers.size() != m.layers.size())
    throw ConfigError("condition_forward: fusion layer count does not match the base model");

  ConditionStates<T> cs;
  Id state = t.broadcast_row(t.leaf(f.z0), frames);
  cs.states.push_back(state);
  for (size_t l = 0; l < m.layers.size(); ++l) {
    auto& fl = f.layers[l];
    auto& bl = m.layers[l];
    Id inj = (f.bottleneck > 0)
                 ? t.matmul(t.matmul(cond_embedding, t.leaf(fl.linear_in)), t.leaf(fl.linear_out))
                 : t.matmul(cond_embedding, t.leaf(fl.linear));
    Id u = t.add(t.add(state, inj), t.slice_rows(t.leaf(fl.pos), 0, frames));
    Id q = t.matmul(u, t.leaf(bl.attn.wq));
    Id k = t.matmul(u, t.leaf(bl.attn.wk));
    Id v = t.matmul(u, t.leaf(bl.attn.wv));
    cs.q.push_back(q);
    cs.k.push_back(k);
    cs.v.push_back(v);
    state = mha(t, q, k, v, t.leaf(bl.attn.wo), m.cfg.n_heads, AttnMask::Causal, nullptr, trace);
    cs.states.push_back(state);
  }
  return cs;
}

template <typename T>
struct FusedAttention {
  typename Tape<T>::Id self_out;   // O
  typename Tape<T>::Id cross_out;  // O''
  typename Tape<T>::Id fused;      // O + g * O''
};

/// One layer's fused attention: causal self-attention output O, the
/// condition cross-attention O'' = softmax((Q+Q') K'^T / sqrt(d)) V' * W_O,
/// and O_fuse = O + g * O''.
template <typename T>
FusedAttention<T> fused_attention(Tape<T>& t, typename Tape<T>::Id q, typename Tape<T>::Id k,
                                  typename Tape<T>::Id v, typename Tape<T>::Id qc,
                                  typename Tape<T>::Id kc, typename Tape<T>::Id vc,
                                  typename Tape<T>::Id wo, typename Tape<T>::Id gate, int n_heads,
                                  ForwardTrace<T>* trace = nullptr) {
  using Id = typename Tape<T>::Id;
  if (t.value(q).rows() != t.value(qc).rows())
    throw InputError("fused_attention: music and condition lengths differ");

  FusedAttention<T> out;
  out.self_out = mha(t, q, k, v, wo, n_heads, AttnMask::Causal, nullptr, trace);

  const Eigen::Index d = t.value(q).cols();
  const Eigen::Index dh = d / n_heads;
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  std::vector<Id> heads;
  for (int h = 0; h < n_heads; ++h) {
    Id qh = t.add(t.slice_cols(q, h * dh, dh), t.slice_cols(qc, h * dh, dh));
    Id kh = t.slice_cols(kc, h * dh, dh);
    Id vh = t.slice_cols(vc, h * dh, dh);
    Id probs = t.softmax_rows(t.scale_const(t.matmul(qh, t.transpose(kh)), inv_sqrt));
    if (trace) trace->attention_probs.push_back(probs);
    heads.push_back(t.matmul(probs, vh));
  }
  out.cross_out = t.matmul(t.concat_cols(heads), wo);
  out.fused = t.add(out.self_out, t.scale(out.cross_out, gate));
  return out;
}

/// Text cross-attention for one layer: queries from the music stream through
/// the (optionally LoRA-adapted) query projection, keys through the frozen
/// key projection, values through the (optionally adapted) value projection.
/// The frozen projections are never mutated.
template <typename T>
typename Tape<T>::Id lora_cross_attention(Tape<T>& t, BaseModel<T>& m, size_t layer,
                                          typename Tape<T>::Id music_states,
                                          typename Tape<T>::Id text_states,
                                          const std::vector<uint8_t>& text_mask,
                                          LoraSet<T>* lora, ForwardTrace<T>* trace = nullptr) {
  auto& bl = m.layers[layer];
  typename Tape<T>::Id q = lora
                               ? t.matmul(music_states, apply_lora(t, bl.xattn.wq, lora->q[layer]))
                               : t.matmul(music_states, t.leaf(bl.xattn.wq));
  typename Tape<T>::Id k = t.matmul(text_states, t.leaf(bl.xattn.wk));
  typename Tape<T>::Id v = lora
                               ? t.matmul(text_states, apply_lora(t, bl.xattn.wv, lora->v[layer]))
                               : t.matmul(text_states, t.leaf(bl.xattn.wv));
  return mha(t, q, k, v, t.leaf(bl.xattn.wo), m.cfg.n_heads, AttnMask::None, &text_mask, trace);
}

template <typename T>
struct DecoderOutput {
  std::vector<typename Tape<T>::Id> logits;  // one T x L node per codebook
  std::vector<typename Tape<T>::Id> hidden;  // music states, n_layers + 1 entries
};

/// Decoder over a prepared music input. When cond/fusion are present each
/// layer's self-attention output is replaced by the fused output before the
/// residual add; when lora is present the text cross-attention query/value
/// projections are adapted. Either may be null independently.
template <typename T>
DecoderOutput<T> decoder_forward(Tape<T>& t, BaseModel<T>& m, typename Tape<T>::Id music_input,
                                 typename Tape<T>::Id text_states,
                                 const std::vector<uint8_t>& text_mask,
                                 ConditionStates<T>* cond = nullptr,
                                 FusionParams<T>* fusion = nullptr, LoraSet<T>* lora = nullptr,
                                 ForwardTrace<T>* trace = nullptr) {
  using Id = typename Tape<T>::Id;
  if ((cond == nullptr) != (fusion == nullptr))
    throw InputError("decoder_forward: condition states and fusion params must come together");

  Id x = music_input;
  DecoderOutput<T> out;
  out.hidden.push_back(x);
  if (trace) trace->hidden.push_back(x);

  for (size_t l = 0; l < m.layers.size(); ++l) {
    auto& bl = m.layers[l];

    Id xn = t.layer_norm(x, t.leaf(bl.attn_norm.gamma), t.leaf(bl.attn_norm.beta));
    Id q = t.matmul(xn, t.leaf(bl.attn.wq));
    Id k = t.matmul(xn, t.leaf(bl.attn.wk));
    Id v = t.matmul(xn, t.leaf(bl.attn.wv));
    Id attn_out;
    if (cond) {
      auto fa = fused_attention(t, q, k, v, cond->q[l], cond->k[l], cond->v[l],
                                t.leaf(bl.attn.wo), t.leaf(fusion->layers[l].gate),
                                m.cfg.n_heads, trace);
      attn_out = fa.fused;
    } else {
      attn_out = mha(t, q, k, v, t.leaf(bl.attn.wo), m.cfg.n_heads, AttnMask::Causal, nullptr, trace);
    }
    x = t.add(x, attn_out);

    Id xn2 = t.layer_norm(x, t.leaf(bl.xattn_norm.gamma), t.leaf(bl.xattn_norm.beta));
    x = t.add(x, lora_cross_attention(t, m, l, xn2, text_states, text_mask, lora, trace));

    Id xn3 = t.layer_norm(x, t.leaf(bl.ffn_norm.gamma), t.leaf(bl.ffn_norm.beta));
    Id h = t.gelu(t.add_rowvec(t.matmul(xn3, t.leaf(bl.ffn.w1)), t.leaf(bl.ffn.b1)));
    x = t.add(x, t.add_rowvec(t.matmul(h, t.leaf(bl.ffn.w2)), t.leaf(bl.ffn.b2)));

    out.hidden.push_back(x);
    if (trace) trace->hidden.push_back(x);
  }

  Id xf = t.layer_norm(x, t.leaf(m.final_norm.gamma), t.leaf(m.final_norm.beta));
  for (auto& head : m.heads) out.logits.push_back(t.matmul(xf, t.leaf(head)));
  return out;
}

/// Full edit forward: teacher-forced music prefix, tokenized condition and
/// instruction, optional fusion and LoRA adapters.
template <typename T>
DecoderOutput<T> fused_decoder_forward(Tape<T>& t, BaseModel<T>& m, const TokenGrid& music_prefix,
                                       const TokenGrid& condition,
                                       const std::vector<int32_t>& instruction_ids,
                                       FusionParams<T>* fusion, LoraSet<T>* lora,
                                       ForwardTrace<T>* trace = nullptr) {
  if (fusion != nullptr && condition.n_frames() != music_prefix.n_frames())
    throw InputError("fused_decoder_forward: condition and music grids must have equal length");
  typename Tape<T>::Id music = teacher_input(t, m, music_prefix);
  typename Tape<T>::Id text = text_forward(t, m, instruction_ids, trace);
  std::vector<uint8_t> mask(instruction_ids.size(), 1);
  ConditionStates<T> cs;
  ConditionStates<T>* csp = nullptr;
  if (fusion) {
    cs = condition_forward(t, m, *fusion, embed_grid(t, m, condition), trace);
    csp = &cs;
  }
  return decoder_forward(t, m, music, text, mask, csp, fusion, lora, trace);
}

// ---------------------------------------------------------------------------
// Autoregressive generation
// ---------------------------------------------------------------------------

struct Sampling {
  double temperature = 0.0;  // <= 0 means greedy
  int top_k = 0;             // 0 means no truncation
  uint64_t seed = 0;
};

namespace detail {

inline int32_t sample_row(const Eigen::RowVectorXf& logits, const Sampling& s, Rng& rng) {
  const int l = static_cast<int>(logits.size());
  if (s.temperature <= 0.0) {
    int32_t best = 0;
    float bv = logits(0);
    for (int i = 1; i < l; ++i)
      if (logits(i) > bv) {
        bv = logits(i);
        best = i;
      }
    return best;
  }
  std::vector<int> order(static_cast<size_t>(l));
  for (int i = 0; i < l; ++i) order[static_cast<size_t>(i)] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return logits(a) > logits(b); });
  int keep = (s.top_k > 0 && s.top_k < l) ? s.top_k : l;
  std::vector<double> probs(static_cast<size_t>(keep));
  double mx = logits(order[0]);
  double sum = 0.0;
  for (int i = 0; i < keep; ++i) {
    double e = std::exp((static_cast<double>(logits(order[static_cast<size_t>(i)])) - mx) / s.temperature);
    probs[static_cast<size_t>(i)] = e;
    sum += e;
  }
  double u = rng.uniform() * sum;
  double acc = 0.0;
  for (int i = 0; i < keep; ++i) {
    acc += probs[static_cast<size_t>(i)];
    if (u < acc) return order[static_cast<size_t>(i)];
  }
  return order[static_cast<size_t>(keep - 1)];
}

}  // namespace detail

/// Autoregressive decode. All N codebook heads are sampled jointly per step.
/// A full-length forward runs each step with placeholder tokens past the
/// prefix; causal masking keeps them invisible, so the step-t logits equal
/// the teacher-forced logits for the same prefix.
template <typename T>
TokenGrid generate(BaseModel<T>& m, const std::vector<int32_t>& instruction_ids, int length,
                   const Sampling& s, FusionParams<T>* fusion = nullptr,
                   LoraSet<T>* lora = nullptr, const TokenGrid* condition = nullptr) {
  if (length < 1) throw InputError("generate: length must be >= 1");
  if (fusion != nullptr && condition == nullptr)
    throw InputError("generate: fusion without a condition grid");

  TokenGrid cond_clip;
  if (condition != nullptr) {
    if (condition->n_frames() < length)
      throw InputError("generate: condition shorter than requested length");
    cond_clip.frame_rate = condition->frame_rate;
    cond_clip.tokens = condition->tokens.leftCols(length);
  }

  TokenGrid grid;
  grid.frame_rate = (condition != nullptr) ? condition->frame_rate : 0;
  grid.tokens.setZero(m.n_codebooks, length);

  Rng rng(mix_seed(s.seed, 0x6e6));
  for (int step = 0; step < length; ++step) {
    Tape<T> t;
    t.set_inference(true);
    DecoderOutput<T> out =
        fused_decoder_forward(t, m, grid, cond_clip.tokens.size() > 0 ? cond_clip : grid,
                              instruction_ids, fusion, lora);
    for (int n = 0; n < m.n_codebooks; ++n) {
      Eigen::RowVectorXf row = t.value(out.logits[static_cast<size_t>(n)])
                                   .row(step)
                                   .template cast<float>();
      grid.tokens(n, step) = detail::sample_row(row, s, rng);
    }
  }
  return grid;
}

}  // namespace stemedit
