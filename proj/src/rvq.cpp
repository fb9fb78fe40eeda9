#include "stemedit/rvq.hpp"

#include <cmath>
#include <limits>
#include <numeric>

namespace stemedit {

namespace {

// Nearest codeword by squared distance, accumulated in double; ties resolve
// to the lowest index so encoding is stable.
int32_t nearest_codeword(const Mat<float>& codebook, const Eigen::VectorXd& x) {
  int32_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < codebook.rows(); ++i) {
    double d = 0.0;
    for (Eigen::Index j = 0; j < codebook.cols(); ++j) {
      double diff = x(j) - static_cast<double>(codebook(i, j));
      d += diff * diff;
    }
    if (d < best_d) {
      best_d = d;
      best = static_cast<int32_t>(i);
    }
  }
  return best;
}

}  // namespace

Mat<float> make_dct_analysis(int feature_dim, int window) {
  if (feature_dim < 1 || window < feature_dim)
    throw ConfigError("make_dct_analysis: need 1 <= feature_dim <= window");
  Mat<float> p(feature_dim, window);
  const double pi = 3.14159265358979323846;
  for (int k = 0; k < feature_dim; ++k) {
    double c = std::sqrt((k == 0 ? 1.0 : 2.0) / window);
    for (int t = 0; t < window; ++t)
      p(k, t) = static_cast<float>(c * std::cos(pi * (2.0 * t + 1.0) * k / (2.0 * window)));
  }
  return p;
}

namespace {

Mat<float> frames_with(const Waveform& w, const Mat<float>& analysis, int sample_rate) {
  if (w.samples.empty()) throw InputError("analysis_frames: empty waveform");
  expect_sample_rate(w, sample_rate, "analysis_frames");
  const Eigen::Index window = analysis.cols();
  const Eigen::Index n = static_cast<Eigen::Index>(w.samples.size());
  const Eigen::Index frames = (n + window - 1) / window;
  Mat<float> out(frames, analysis.rows());
  Eigen::VectorXf seg(window);
  for (Eigen::Index f = 0; f < frames; ++f) {
    for (Eigen::Index i = 0; i < window; ++i) {
      Eigen::Index s = f * window + i;
      seg(i) = s < n ? w.samples[static_cast<size_t>(s)] : 0.0f;
    }
    out.row(f) = (analysis * seg).transpose();
  }
  return out;
}

}  // namespace

Mat<float> analysis_frames(const Waveform& w, const CodebookStack& cb) {
  return frames_with(w, cb.analysis, cb.sample_rate);
}

Mat<float> analysis_frames(const Waveform& w, const CodecConfig& cfg) {
  return frames_with(w, make_dct_analysis(cfg.feature_dim, cfg.window()), cfg.sample_rate);
}

Mat<float> kmeans_fit(const Mat<float>& points, int k, int iters, Rng& rng) {
  const Eigen::Index n = points.rows(), d = points.cols();
  if (n < k) throw ConfigError("kmeans_fit: fewer points than clusters");

  std::vector<Eigen::Index> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  Mat<double> centroids(k, d);
  for (int c = 0; c < k; ++c) centroids.row(c) = points.row(order[static_cast<size_t>(c)]).cast<double>();

  std::vector<int32_t> assign(static_cast<size_t>(n), 0);
  for (int it = 0; it < iters; ++it) {
    Mat<float> cf = centroids.cast<float>();
    for (Eigen::Index i = 0; i < n; ++i)
      assign[static_cast<size_t>(i)] = nearest_codeword(cf, points.row(i).transpose().cast<double>());

    Mat<double> sums = Mat<double>::Zero(k, d);
    std::vector<int64_t> counts(static_cast<size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(assign[static_cast<size_t>(i)]) += points.row(i).cast<double>();
      counts[static_cast<size_t>(assign[static_cast<size_t>(i)])]++;
    }

    // Empty clusters reseed from the point farthest from its own centroid,
    // each grabbing a distinct point, lowest index on ties.
    std::vector<bool> taken(static_cast<size_t>(n), false);
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<size_t>(c)] > 0) {
        centroids.row(c) = sums.row(c) / static_cast<double>(counts[static_cast<size_t>(c)]);
        continue;
      }
      Eigen::Index far_i = -1;
      double far_d = -1.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (taken[static_cast<size_t>(i)]) continue;
        double dd = (points.row(i).cast<double>() - centroids.row(assign[static_cast<size_t>(i)])).squaredNorm();
        if (dd > far_d) {
          far_d = dd;
          far_i = i;
        }
      }
      centroids.row(c) = points.row(far_i).cast<double>();
      taken[static_cast<size_t>(far_i)] = true;
    }
  }
  return centroids.cast<float>();
}

CodebookStack train_codebooks(const Mat<float>& frames, const CodecConfig& cfg, uint64_t seed) {
  if (cfg.n_codebooks < 1) throw ConfigError("train_codebooks: n_codebooks must be >= 1");
  if (frames.rows() < cfg.codebook_size)
    throw ConfigError("train_codebooks: corpus smaller than codebook_size (" +
                      std::to_string(frames.rows()) + " < " + std::to_string(cfg.codebook_size) + ")");
  if (frames.cols() != cfg.feature_dim)
    throw ConfigError("train_codebooks: frame dimension mismatch");

  CodebookStack cb;
  cb.sample_rate = cfg.sample_rate;
  cb.frame_rate = cfg.frame_rate;
  cb.window = cfg.window();
  cb.feature_dim = cfg.feature_dim;
  cb.codebook_size = cfg.codebook_size;
  cb.analysis = make_dct_analysis(cfg.feature_dim, cfg.window());

  Rng root(seed);
  Mat<float> residual = frames;
  for (int stage = 0; stage < cfg.n_codebooks; ++stage) {
    Rng stage_rng = root.fork(static_cast<uint64_t>(stage));
    Mat<float> book = kmeans_fit(residual, cfg.codebook_size, cfg.kmeans_iters, stage_rng);
    cb.codebooks.push_back(book);
    for (Eigen::Index i = 0; i < residual.rows(); ++i) {
      int32_t t = nearest_codeword(book, residual.row(i).transpose().cast<double>());
      residual.row(i) -= book.row(t);
    }
  }
  return cb;
}

namespace {

using TokenTuple = std::vector<int32_t>;

TokenTuple greedy_tokens(const CodebookStack& cb, Eigen::VectorXd residual) {
  TokenTuple t(static_cast<size_t>(cb.n_codebooks()));
  for (int c = 0; c < cb.n_codebooks(); ++c) {
    int32_t idx = nearest_codeword(cb.codebooks[static_cast<size_t>(c)], residual);
    t[static_cast<size_t>(c)] = idx;
    residual -= cb.codebooks[static_cast<size_t>(c)].row(idx).transpose().cast<double>();
  }
  return t;
}

Eigen::VectorXd tuple_sum(const CodebookStack& cb, const TokenTuple& t) {
  Eigen::VectorXd q = Eigen::VectorXd::Zero(cb.feature_dim);
  for (int c = 0; c < cb.n_codebooks(); ++c)
    q += cb.codebooks[static_cast<size_t>(c)].row(t[static_cast<size_t>(c)]).transpose().cast<double>();
  return q;
}

// Greedy residual search alone is not a fixed point of re-encoding: the
// corrections of later stages can push a codeword sum across an earlier
// stage's cell boundary. Walking the re-encode orbit to its terminal cycle
// and taking the smallest tuple makes encode(decode(g)) == g structural.
TokenTuple stabilized_tokens(const CodebookStack& cb, const Eigen::VectorXd& frame) {
  TokenTuple t = greedy_tokens(cb, frame);
  std::vector<TokenTuple> visited{t};
  const int cap = 64;
  for (int it = 0; it < cap; ++it) {
    t = greedy_tokens(cb, tuple_sum(cb, t));
    for (size_t j = 0; j < visited.size(); ++j) {
      if (visited[j] == t) {
        TokenTuple best = visited[j];
        for (size_t k = j + 1; k < visited.size(); ++k)
          if (visited[k] < best) best = visited[k];
        return best;
      }
    }
    visited.push_back(t);
  }
  return visited.back();  // no repeat within cap; deterministic fallback
}

}  // namespace

TokenGrid encode(const Waveform& w, const CodebookStack& cb) {
  if (w.samples.empty()) throw InputError("encode: empty waveform");
  Mat<float> feats = analysis_frames(w, cb);
  const int n = cb.n_codebooks();
  TokenGrid g;
  g.frame_rate = cb.frame_rate;
  g.tokens.resize(n, feats.rows());
  for (Eigen::Index f = 0; f < feats.rows(); ++f) {
    TokenTuple t = stabilized_tokens(cb, feats.row(f).transpose().cast<double>());
    for (int c = 0; c < n; ++c) g.tokens(c, f) = t[static_cast<size_t>(c)];
  }
  return g;
}

Eigen::VectorXf quantized_feature(const TokenGrid& g, const CodebookStack& cb, Eigen::Index frame) {
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(cb.feature_dim);
  for (Eigen::Index c = 0; c < g.n_codebooks(); ++c) {
    int32_t t = g.tokens(c, frame);
    if (t < 0 || t >= cb.codebook_size) throw InputError("quantized_feature: token out of range");
    sum += cb.codebooks[static_cast<size_t>(c)].row(t).transpose().cast<double>();
  }
  return sum.cast<float>();
}

Waveform decode(const TokenGrid& g, const CodebookStack& cb) {
  if (g.n_codebooks() != cb.n_codebooks())
    throw InputError("decode: grid codebook count does not match the stack");
  Waveform w;
  w.sample_rate = cb.sample_rate;
  w.samples.assign(static_cast<size_t>(g.n_frames()) * static_cast<size_t>(cb.window), 0.0f);
  for (Eigen::Index f = 0; f < g.n_frames(); ++f) {
    Eigen::VectorXf feat = quantized_feature(g, cb, f);
    Eigen::VectorXf seg = cb.analysis.transpose() * feat;
    for (Eigen::Index i = 0; i < cb.window; ++i)
      w.samples[static_cast<size_t>(f * cb.window + i)] = seg(i);
  }
  return w;
}

}  // namespace stemedit
