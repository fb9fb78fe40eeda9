#pragma once

#include <cctype>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "stemedit/autodiff.hpp"
#include "stemedit/config.hpp"
#include "stemedit/rvq.hpp"

namespace stemedit {

inline constexpr int kTextMaxLen = 16;

/// Whitespace/lowercase tokenizer over a fixed instruction vocabulary.
/// Unknown words map to <unk>; instruction semantics live in the model.
struct Vocab {
  std::vector<std::string> words;
  std::map<std::string, int32_t> index;

  static Vocab build(const std::string& instrument_csv) {
    Vocab v;
    auto push = [&v](const std::string& w) {
      if (v.index.count(w)) return;
      v.index[w] = static_cast<int32_t>(v.words.size());
      v.words.push_back(w);
    };
    for (const char* w : {"<pad>", "<unk>", "add", "remove", "extract", "and", "music",
                          "with", "the", "a", "no", "only", "track", "mix", "solo"})
      push(w);
    std::istringstream ss(instrument_csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (!item.empty()) push(item);
    }
    return v;
  }

  int32_t unk() const { return 1; }

  std::vector<int32_t> tokenize(const std::string& text) const {
    std::vector<int32_t> out;
    std::string word;
    auto flush = [&] {
      if (word.empty()) return;
      auto it = index.find(word);
      out.push_back(it == index.end() ? unk() : it->second);
      word.clear();
    };
    for (char c : text) {
      if (std::isalnum(static_cast<unsigned char>(c)))
        word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
      else
        flush();
    }
    flush();
    if (out.empty()) throw InputError("tokenize: empty instruction");
    if (out.size() > kTextMaxLen) throw InputError("tokenize: instruction too long");
    return out;
  }

  size_t size() const { return words.size(); }
};

/// Encoded instruction: one row per token plus an attendability mask.
template <typename T>
struct TextEmbedding {
  Mat<T> values;              // S x d_text
  std::vector<uint8_t> mask;  // 1 = attend
};

template <typename T>
struct LayerNormParams {
  Parameter<T> gamma, beta;
};

template <typename T>
struct AttnProj {
  Parameter<T> wq, wk, wv, wo;
};

template <typename T>
struct FfnParams {
  Parameter<T> w1, b1, w2, b2;
};

template <typename T>
struct DecoderLayer {
  LayerNormParams<T> attn_norm;
  AttnProj<T> attn;   // music self-attention
  LayerNormParams<T> xattn_norm;
  AttnProj<T> xattn;  // text cross-attention (wk/wv consume d_text)
  LayerNormParams<T> ffn_norm;
  FfnParams<T> ffn;
};

template <typename T>
struct TextLayer {
  LayerNormParams<T> attn_norm;
  AttnProj<T> attn;
  LayerNormParams<T> ffn_norm;
  FfnParams<T> ffn;
};

template <typename T>
struct TextEncoder {
  Vocab vocab;
  Parameter<T> tok_emb;  // V x d_text
  Parameter<T> pos_emb;  // kTextMaxLen x d_text
  std::vector<TextLayer<T>> layers;
  LayerNormParams<T> final_norm;
};

/// The base token language model: a causal decoder over summed codebook
/// embeddings with per-layer text cross-attention, plus the small frozen
/// text encoder. Once frozen, no training step may touch any field.
template <typename T>
struct BaseModel {
  ModelConfig cfg;
  int n_codebooks = 0;
  int codebook_size = 0;
  std::vector<Parameter<T>> tok_emb;  // N tables, each L x d_model
  Parameter<T> sos;                   // 1 x d_model, teacher-forcing start row
  Parameter<T> pos_emb;               // t_max x d_model
  std::vector<DecoderLayer<T>> layers;
  LayerNormParams<T> final_norm;
  std::vector<Parameter<T>> heads;  // N of d_model x L
  TextEncoder<T> text;
  bool frozen = false;

  static BaseModel init(const RunConfig& rc, uint64_t seed);

  /// Every parameter in a stable, name-sorted-free construction order.
  std::vector<Parameter<T>*> params();

  void set_frozen(bool f) {
    frozen = f;
    for (auto* p : params()) p->trainable = !f;
  }

  /// Runs the text encoder outside any training tape.
  TextEmbedding<T> encode_text(const std::string& instruction);
};

namespace detail {

template <typename T>
Mat<T> randn_mat(Rng& rng, Eigen::Index r, Eigen::Index c, double stddev) {
  Mat<T> m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = static_cast<T>(stddev * rng.normal());
  return m;
}

template <typename T>
void init_norm(LayerNormParams<T>& n, const std::string& name, Eigen::Index dim) {
  n.gamma = Parameter<T>(name + "/gamma", Mat<T>::Ones(1, dim));
  n.beta = Parameter<T>(name + "/beta", Mat<T>::Zero(1, dim));
}

template <typename T>
void init_attn(AttnProj<T>& a, const std::string& name, Eigen::Index d_in_kv, Eigen::Index d,
               Rng& rng, double stddev) {
  a.wq = Parameter<T>(name + "/wq", randn_mat<T>(rng, d, d, stddev));
  a.wk = Parameter<T>(name + "/wk", randn_mat<T>(rng, d_in_kv, d, stddev));
  a.wv = Parameter<T>(name + "/wv", randn_mat<T>(rng, d_in_kv, d, stddev));
  a.wo = Parameter<T>(name + "/wo", randn_mat<T>(rng, d, d, stddev));
}

template <typename T>
void init_ffn(FfnParams<T>& f, const std::string& name, Eigen::Index d, Eigen::Index hidden,
              Rng& rng, double stddev) {
  f.w1 = Parameter<T>(name + "/w1", randn_mat<T>(rng, d, hidden, stddev));
  f.b1 = Parameter<T>(name + "/b1", Mat<T>::Zero(1, hidden));
  f.w2 = Parameter<T>(name + "/w2", randn_mat<T>(rng, hidden, d, stddev));
  f.b2 = Parameter<T>(name + "/b2", Mat<T>::Zero(1, d));
}

}  // namespace detail

template <typename T>
BaseModel<T> BaseModel<T>::init(const RunConfig& rc, uint64_t seed) {
  const ModelConfig& mc = rc.model;
  if (mc.d_model % mc.n_heads != 0) throw ConfigError("model: d_model must divide by n_heads");
  if (mc.d_text % mc.n_heads != 0) throw ConfigError("model: d_text must divide by n_heads");

  BaseModel m;
  m.cfg = mc;
  m.n_codebooks = rc.codec.n_codebooks;
  m.codebook_size = rc.codec.codebook_size;
  Rng rng(mix_seed(seed, 0xb453));
  const double s = 0.02;
  const Eigen::Index d = mc.d_model, dt = mc.d_text;

  for (int n = 0; n < m.n_codebooks; ++n)
    m.tok_emb.emplace_back("base/tok_emb/" + std::to_string(n),
                           detail::randn_mat<T>(rng, m.codebook_size, d, s));
  m.sos = Parameter<T>("base/sos", detail::randn_mat<T>(rng, 1, d, s));
  m.pos_emb = Parameter<T>("base/pos_emb", detail::randn_mat<T>(rng, mc.t_max, d, s));

  m.layers.resize(static_cast<size_t>(mc.n_layers));
  for (int l = 0; l < mc.n_layers; ++l) {
    std::string base = "base/layer" + std::to_string(l);
    auto& layer = m.layers[static_cast<size_t>(l)];
    detail::init_norm(layer.attn_norm, base + "/attn_norm", d);
    detail::init_attn(layer.attn, base + "/attn", d, d, rng, s);
    detail::init_norm(layer.xattn_norm, base + "/xattn_norm", d);
    detail::init_attn(layer.xattn, base + "/xattn", dt, d, rng, s);
    detail::init_norm(layer.ffn_norm, base + "/ffn_norm", d);
    detail::init_ffn(layer.ffn, base + "/ffn", d, d * mc.ffn_mult, rng, s);
  }
  detail::init_norm(m.final_norm, "base/final_norm", d);
  for (int n = 0; n < m.n_codebooks; ++n)
    m.heads.emplace_back("base/head/" + std::to_string(n),
                         detail::randn_mat<T>(rng, d, m.codebook_size, s));

  m.text.vocab = Vocab::build(rc.datagen.instruments);
  m.text.tok_emb = Parameter<T>("base/text/tok_emb",
                                detail::randn_mat<T>(rng, static_cast<Eigen::Index>(m.text.vocab.size()), dt, s));
  m.text.pos_emb = Parameter<T>("base/text/pos_emb", detail::randn_mat<T>(rng, kTextMaxLen, dt, s));
  m.text.layers.resize(static_cast<size_t>(mc.text_layers));
  for (int l = 0; l < mc.text_layers; ++l) {
    std::string base = "base/text/layer" + std::to_string(l);
    auto& layer = m.text.layers[static_cast<size_t>(l)];
    detail::init_norm(layer.attn_norm, base + "/attn_norm", dt);
    detail::init_attn(layer.attn, base + "/attn", dt, dt, rng, s);
    detail::init_norm(layer.ffn_norm, base + "/ffn_norm", dt);
    detail::init_ffn(layer.ffn, base + "/ffn", dt, dt * mc.ffn_mult, rng, s);
  }
  detail::init_norm(m.text.final_norm, "base/text/final_norm", dt);
  return m;
}

template <typename T>
std::vector<Parameter<T>*> BaseModel<T>::params() {
  std::vector<Parameter<T>*> out;
  auto norm = [&out](LayerNormParams<T>& n) {
    out.push_back(&n.gamma);
    out.push_back(&n.beta);
  };
  auto attn = [&out](AttnProj<T>& a) {
    out.push_back(&a.wq);
    out.push_back(&a.wk);
    out.push_back(&a.wv);
    out.push_back(&a.wo);
  };
  auto ffn = [&out](FfnParams<T>& f) {
    out.push_back(&f.w1);
    out.push_back(&f.b1);
    out.push_back(&f.w2);
    out.push_back(&f.b2);
  };
  for (auto& e : tok_emb) out.push_back(&e);
  out.push_back(&sos);
  out.push_back(&pos_emb);
  for (auto& l : layers) {
    norm(l.attn_norm);
    attn(l.attn);
    norm(l.xattn_norm);
    attn(l.xattn);
    norm(l.ffn_norm);
    ffn(l.ffn);
  }
  norm(final_norm);
  for (auto& h : heads) out.push_back(&h);
  out.push_back(&text.tok_emb);
  out.push_back(&text.pos_emb);
  for (auto& l : text.layers) {
    norm(l.attn_norm);
    attn(l.attn);
    norm(l.ffn_norm);
    ffn(l.ffn);
  }
  norm(text.final_norm);
  return out;
}

// ---------------------------------------------------------------------------
// Tape-level building blocks
// ---------------------------------------------------------------------------

/// Attention prob node ids recorded during a forward pass, plus the music
/// hidden states (input embedding + one per layer).
template <typename T>
struct ForwardTrace {
  std::vector<typename Tape<T>::Id> attention_probs;
  std::vector<typename Tape<T>::Id> hidden;
};

enum class AttnMask { None, Causal };

/// Multi-head attention core. q/k/v are full-width projections; heads are
/// column slices. Returns concat(head outputs) * wo.
template <typename T>
typename Tape<T>::Id mha(Tape<T>& t, typename Tape<T>::Id q, typename Tape<T>::Id k,
                         typename Tape<T>::Id v, typename Tape<T>::Id wo, int n_heads,
                         AttnMask mask_kind, const std::vector<uint8_t>* colmask,
                         ForwardTrace<T>* trace) {
  using Id = typename Tape<T>::Id;
  const Eigen::Index d = t.value(q).cols();
  const Eigen::Index dh = d / n_heads;
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  std::vector<Id> outs;
  for (int h = 0; h < n_heads; ++h) {
    Id qh = t.slice_cols(q, h * dh, dh);
    Id kh = t.slice_cols(k, h * dh, dh);
    Id vh = t.slice_cols(v, h * dh, dh);
    Id scores = t.scale_const(t.matmul(qh, t.transpose(kh)), inv_sqrt);
    Id probs;
    if (colmask != nullptr)
      probs = t.softmax_rows_colmask(scores, *colmask);
    else if (mask_kind == AttnMask::Causal)
      probs = t.softmax_rows_causal(scores);
    else
      probs = t.softmax_rows(scores);
    if (trace) trace->attention_probs.push_back(probs);
    outs.push_back(t.matmul(probs, vh));
  }
  return t.matmul(t.concat_cols(outs), wo);
}

/// Text encoder forward; returns an S x d_text node.
template <typename T>
typename Tape<T>::Id text_forward(Tape<T>& t, BaseModel<T>& m, const std::vector<int32_t>& ids,
                                  ForwardTrace<T>* trace = nullptr) {
  using Id = typename Tape<T>::Id;
  const Eigen::Index s = static_cast<Eigen::Index>(ids.size());
  Id x = t.add(t.gather_rows(t.leaf(m.text.tok_emb), ids),
               t.slice_rows(t.leaf(m.text.pos_emb), 0, s));
  for (auto& layer : m.text.layers) {
    Id xn = t.layer_norm(x, t.leaf(layer.attn_norm.gamma), t.leaf(layer.attn_norm.beta));
    Id q = t.matmul(xn, t.leaf(layer.attn.wq));
    Id k = t.matmul(xn, t.leaf(layer.attn.wk));
    Id v = t.matmul(xn, t.leaf(layer.attn.wv));
    x = t.add(x, mha(t, q, k, v, t.leaf(layer.attn.wo), m.cfg.n_heads, AttnMask::None, nullptr, trace));
    Id fn = t.layer_norm(x, t.leaf(layer.ffn_norm.gamma), t.leaf(layer.ffn_norm.beta));
    Id hidden = t.gelu(t.add_rowvec(t.matmul(fn, t.leaf(layer.ffn.w1)), t.leaf(layer.ffn.b1)));
    x = t.add(x, t.add_rowvec(t.matmul(hidden, t.leaf(layer.ffn.w2)), t.leaf(layer.ffn.b2)));
  }
  return t.layer_norm(x, t.leaf(m.text.final_norm.gamma), t.leaf(m.text.final_norm.beta));
}

template <typename T>
TextEmbedding<T> BaseModel<T>::encode_text(const std::string& instruction) {
  std::vector<int32_t> ids = text.vocab.tokenize(instruction);
  Tape<T> t;
  t.set_inference(true);
  TextEmbedding<T> out;
  out.values = t.value(text_forward(t, *this, ids));
  out.mask.assign(ids.size(), 1);
  return out;
}

/// Sum of the N codebook embedding lookups, one row per frame. No position
/// information is added here.
template <typename T>
typename Tape<T>::Id embed_grid(Tape<T>& t, BaseModel<T>& m, const TokenGrid& g) {
  using Id = typename Tape<T>::Id;
  if (g.n_codebooks() != m.n_codebooks) throw InputError("embed_grid: codebook count mismatch");
  Id acc = -1;
  for (int n = 0; n < m.n_codebooks; ++n) {
    std::vector<int32_t> ids(static_cast<size_t>(g.n_frames()));
    for (Eigen::Index f = 0; f < g.n_frames(); ++f) {
      int32_t tok = g.tokens(n, f);
      if (tok < 0 || tok >= m.codebook_size) throw InputError("embed_grid: token out of range");
      ids[static_cast<size_t>(f)] = tok;
    }
    Id e = t.gather_rows(t.leaf(m.tok_emb[static_cast<size_t>(n)]), ids);
    acc = (n == 0) ? e : t.add(acc, e);
  }
  return acc;
}

/// Teacher-forcing decoder input for a target grid: [sos; embed(cols 0..T-2)]
/// plus absolute position rows.
template <typename T>
typename Tape<T>::Id teacher_input(Tape<T>& t, BaseModel<T>& m, const TokenGrid& target) {
  using Id = typename Tape<T>::Id;
  const Eigen::Index frames = target.n_frames();
  if (frames < 1) throw InputError("teacher_input: empty grid");
  if (frames > m.cfg.t_max) throw ConfigError("teacher_input: sequence longer than t_max");
  Id x;
  if (frames == 1) {
    x = t.leaf(m.sos);
  } else {
    TokenGrid shifted;
    shifted.frame_rate = target.frame_rate;
    shifted.tokens = target.tokens.leftCols(frames - 1);
    x = t.concat_rows({t.leaf(m.sos), embed_grid(t, m, shifted)});
  }
  return t.add(x, t.slice_rows(t.leaf(m.pos_emb), 0, frames));
}

// ---------------------------------------------------------------------------
// Parameter accounting (pure arithmetic; nothing is allocated)
// ---------------------------------------------------------------------------

inline int64_t count_linear_cond_stack(const RunConfig& rc) {
  int64_t d = rc.model.d_model, m = rc.model.n_layers, mb = rc.fusion.bottleneck;
  return mb > 0 ? m * (d * mb + mb * d) : m * d * d;
}

inline int64_t count_fusion_params(const RunConfig& rc) {
  int64_t d = rc.model.d_model, m = rc.model.n_layers, tmax = rc.model.t_max;
  return d                              // z0_cond
         + count_linear_cond_stack(rc)  // per-layer linears
         + m * tmax * d                 // per-layer position embeddings
         + m;                           // gates
}

inline int64_t count_lora_params(const RunConfig& rc) {
  int64_t d = rc.model.d_model, dt = rc.model.d_text, m = rc.model.n_layers, r = rc.lora.rank;
  return m * ((r * d + r * d) + (r * dt + r * d));
}

inline int64_t count_base_params(const RunConfig& rc) {
  const int64_t d = rc.model.d_model, dt = rc.model.d_text;
  const int64_t n = rc.codec.n_codebooks, l = rc.codec.codebook_size;
  const int64_t f = rc.model.ffn_mult;
  const int64_t per_layer = 2 * d + 4 * d * d               // attn norm + projections
                            + 2 * d + d * d + 2 * dt * d + d * d  // xattn norm + projections
                            + 2 * d + d * f * d + f * d + f * d * d + d;  // ffn norm + mlp
  const Vocab vocab = Vocab::build(rc.datagen.instruments);
  const int64_t text_per_layer = 2 * dt + 4 * dt * dt + 2 * dt + dt * f * dt + f * dt + f * dt * dt + dt;
  const int64_t text = static_cast<int64_t>(vocab.size()) * dt + kTextMaxLen * dt +
                       rc.model.text_layers * text_per_layer + 2 * dt;
  return n * l * d                 // token embeddings
         + d                       // sos
         + rc.model.t_max * d      // positions
         + rc.model.n_layers * per_layer + 2 * d  // layers + final norm
         + n * d * l               // output heads
         + text;
}

}  // namespace stemedit
