#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "stemedit/autodiff.hpp"
#include "stemedit/config.hpp"
#include "stemedit/wav.hpp"

namespace stemedit {

/// N x T matrix of codebook indices; the universal audio representation.
struct TokenGrid {
  Eigen::Matrix<int32_t, Eigen::Dynamic, Eigen::Dynamic> tokens;  // N x T
  int frame_rate = 0;

  Eigen::Index n_codebooks() const { return tokens.rows(); }
  Eigen::Index n_frames() const { return tokens.cols(); }
};

/// Residual vector quantizer: stage c quantizes the residual left by stages
/// 0..c-1. Analysis maps a window of samples to a feature vector; its rows
/// are orthonormal, so synthesis is the transpose.
struct CodebookStack {
  int sample_rate = 0;
  int frame_rate = 0;
  int window = 0;
  int feature_dim = 0;
  int codebook_size = 0;
  Mat<float> analysis;                // feature_dim x window
  std::vector<Mat<float>> codebooks;  // each codebook_size x feature_dim

  int n_codebooks() const { return static_cast<int>(codebooks.size()); }
};

/// Orthonormal DCT-II analysis rows (feature_dim x window).
Mat<float> make_dct_analysis(int feature_dim, int window);

/// Splits a waveform into analysis feature vectors, one row per frame.
/// The final partial window is zero-padded.
Mat<float> analysis_frames(const Waveform& w, const CodebookStack& cb);

/// Same, from a bare config (used before any codebooks exist).
Mat<float> analysis_frames(const Waveform& w, const CodecConfig& cfg);

/// Residual k-means over a frame corpus (rows = frames). Stage c is fit on
/// the residuals left by stages 0..c-1. Deterministic given the seed.
CodebookStack train_codebooks(const Mat<float>& frames, const CodecConfig& cfg, uint64_t seed);

/// Runs residual k-means centroids only; exposed for corpus-level training.
Mat<float> kmeans_fit(const Mat<float>& points, int k, int iters, Rng& rng);

/// Tokenizes a waveform. Per frame, stage c picks the nearest codeword to
/// the residual left by stages 0..c-1; the greedy tuple is then stabilized
/// to a fixed point of re-encoding (terminal cycle of the codeword-sum
/// orbit, smallest tuple), so encode(decode(g)) == g for encoded grids.
TokenGrid encode(const Waveform& w, const CodebookStack& cb);

Waveform decode(const TokenGrid& g, const CodebookStack& cb);

/// Sum of the selected codewords for one grid column.
Eigen::VectorXf quantized_feature(const TokenGrid& g, const CodebookStack& cb, Eigen::Index frame);

}  // namespace stemedit
