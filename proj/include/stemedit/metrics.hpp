#pragma once

#include <Eigen/Dense>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "stemedit/config.hpp"
#include "stemedit/datagen.hpp"
#include "stemedit/wav.hpp"

namespace stemedit {

/// Gaussian statistics fitted to a set of embedding vectors.
struct EmbeddingSetStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;  // symmetrized, eigenvalues floored at zero
  int64_t count = 0;
};

EmbeddingSetStats fit_stats(const std::vector<Eigen::VectorXd>& embeddings);

/// Scale-invariant SDR in dB. A zero residual reports +cap; a zero projection
/// reports -cap.
double si_sdr(const Waveform& est, const Waveform& ref, double cap_db = 100.0);

/// si_sdr(est, ref) - si_sdr(condition, ref).
double si_sdri(const Waveform& est, const Waveform& condition, const Waveform& ref,
               double cap_db = 100.0);

/// Structural similarity between log-magnitude spectrograms, jointly
/// max-normalized to [0, 1]; windowed mean with K1=0.01, K2=0.03, range 1.
double ssim(const Waveform& a, const Waveform& b, const MetricsConfig& cfg = {});

/// The windowed SSIM kernel over two same-shape images in [0, 1].
double ssim_images(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y);

/// Fréchet distance between two Gaussians:
/// |mu_a - mu_b|^2 + tr(Sa + Sb - 2 (Sa Sb)^(1/2)).
double fad(const EmbeddingSetStats& a, const EmbeddingSetStats& b);

/// Mean over dimensions of the closed-form KL between per-dimension Gaussian
/// fits, variance floored at 1e-8.
double kl_div(const std::vector<Eigen::VectorXd>& a, const std::vector<Eigen::VectorXd>& b);

struct TaskReport {
  int64_t count = 0;
  double fad_value = 0.0;
  double kl_value = 0.0;
  double ssim_mean = 0.0;
  bool has_sisdr = false;  // absent for the add task
  double si_sdr_mean = 0.0;
  double si_sdri_mean = 0.0;
};

struct MetricsReport {
  std::map<std::string, TaskReport> per_task;
  std::vector<std::string> missing_files;
  std::string config_echo;
  std::string notes;
};

using GenerateFn = std::function<Waveform(const ManifestRecord&, const Waveform& condition)>;
using EmbeddingFn = std::function<std::vector<Eigen::VectorXd>(const Waveform&)>;

/// Runs the model over a triplet manifest and pools per-task metrics.
/// Missing audio files are listed and skipped. Deterministic for a
/// deterministic generate_fn; records are reduced in manifest order.
MetricsReport evaluate(const std::vector<ManifestRecord>& records, const std::string& root,
                       const GenerateFn& generate_fn, const EmbeddingFn& embedding_fn,
                       const MetricsConfig& cfg, const std::string& config_echo = "");

/// Aligned plain-text table. The CLAP column is reported as unavailable; it
/// needs an external pretrained contrastive model.
std::string report_table(const MetricsReport& report);

/// Line-delimited records, one per task plus one trailer.
std::string report_records(const MetricsReport& report);

}  // namespace stemedit
