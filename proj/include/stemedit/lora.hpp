#pragma once

#include <string>
#include <vector>

#include "stemedit/model.hpp"

namespace stemedit {

/// Low-rank factor pair; the effective weight delta is scale * A^T B.
/// B starts at zero so the initial delta vanishes.
template <typename T>
struct LoraPair {
  Parameter<T> a;  // rank x d_in
  Parameter<T> b;  // rank x d_out
  T scale = 1;
};

/// One pair per layer for the text cross-attention query projection and one
/// for the value projection. The key projection is never adapted.
template <typename T>
struct LoraSet {
  std::vector<LoraPair<T>> q;
  std::vector<LoraPair<T>> v;
  int rank = 0;

  static LoraSet init(const RunConfig& rc, uint64_t seed) {
    if (rc.lora.rank < 1) throw ConfigError("lora: rank must be >= 1");
    LoraSet s;
    s.rank = rc.lora.rank;
    Rng rng(mix_seed(seed, 0x10aa));
    const Eigen::Index r = rc.lora.rank, d = rc.model.d_model, dt = rc.model.d_text;
    const T scale = static_cast<T>(rc.lora.scale);
    for (int l = 0; l < rc.model.n_layers; ++l) {
      std::string base = "lora/layer" + std::to_string(l);
      LoraPair<T> pq;
      pq.a = Parameter<T>(base + "/q/a", detail::randn_mat<T>(rng, r, d, 0.02));
      pq.b = Parameter<T>(base + "/q/b", Mat<T>::Zero(r, d));
      pq.scale = scale;
      s.q.push_back(std::move(pq));
      LoraPair<T> pv;
      pv.a = Parameter<T>(base + "/v/a", detail::randn_mat<T>(rng, r, dt, 0.02));
      pv.b = Parameter<T>(base + "/v/b", Mat<T>::Zero(r, d));
      pv.scale = scale;
      s.v.push_back(std::move(pv));
    }
    return s;
  }

  std::vector<Parameter<T>*> params() {
    std::vector<Parameter<T>*> out;
    for (size_t l = 0; l < q.size(); ++l) {
      out.push_back(&q[l].a);
      out.push_back(&q[l].b);
      out.push_back(&v[l].a);
      out.push_back(&v[l].b);
    }
    return out;
  }

  /// Pins every delta at zero (the no-text-fusion ablation).
  void zero_deltas() {
    for (auto* p : params()) {
      p->value.setZero();
      p->trainable = false;
    }
  }
};

/// effective = frozen + scale * A^T B. The frozen weight is not touched.
template <typename T>
Mat<T> apply_lora(const Mat<T>& frozen, const LoraPair<T>& pair) {
  if (pair.a.value.cols() != frozen.rows() || pair.b.value.cols() != frozen.cols() ||
      pair.a.value.rows() != pair.b.value.rows())
    throw InputError("apply_lora: shape mismatch");
  return frozen + pair.scale * (pair.a.value.transpose() * pair.b.value);
}

/// Tape version used inside the decoder forward.
template <typename T>
typename Tape<T>::Id apply_lora(Tape<T>& t, Parameter<T>& frozen, LoraPair<T>& pair) {
  if (pair.a.value.cols() != frozen.value.rows() || pair.b.value.cols() != frozen.value.cols())
    throw InputError("apply_lora: shape mismatch");
  auto delta = t.matmul(t.transpose(t.leaf(pair.a)), t.leaf(pair.b));
  return t.add(t.leaf(frozen), t.scale_const(delta, pair.scale));
}

}  // namespace stemedit
