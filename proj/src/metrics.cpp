#include "stemedit/metrics.hpp"

#include <cmath>
#include <complex>
#include <cstdio>
#include <filesystem>
#include <sstream>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace stemedit {

namespace {

constexpr double kPi = 3.14159265358979323846;

void fft_inplace(std::vector<std::complex<double>>& a) {
  const size_t n = a.size();
  if (n == 0 || (n & (n - 1)) != 0) throw ConfigError("fft: size must be a power of two");
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    double ang = -2.0 * kPi / static_cast<double>(len);
    std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (size_t k = 0; k < len / 2; ++k) {
        std::complex<double> u = a[i + k];
        std::complex<double> v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wl;
      }
    }
  }
}

// log1p magnitude spectrogram, bins x frames, Hann window.
Eigen::MatrixXd log_spectrogram(const Waveform& w, int fft, int hop) {
  const size_t n = w.samples.size();
  if (n < static_cast<size_t>(fft)) throw InputError("ssim: waveform shorter than one fft window");
  const size_t frames = 1 + (n - static_cast<size_t>(fft)) / static_cast<size_t>(hop);
  const int bins = fft / 2 + 1;
  std::vector<double> window(static_cast<size_t>(fft));
  for (int i = 0; i < fft; ++i)
    window[static_cast<size_t>(i)] = 0.5 * (1.0 - std::cos(2.0 * kPi * i / fft));

  Eigen::MatrixXd spec(bins, static_cast<Eigen::Index>(frames));
  std::vector<std::complex<double>> buf(static_cast<size_t>(fft));
  for (size_t f = 0; f < frames; ++f) {
    for (int i = 0; i < fft; ++i)
      buf[static_cast<size_t>(i)] = window[static_cast<size_t>(i)] *
                                    static_cast<double>(w.samples[f * static_cast<size_t>(hop) +
                                                                  static_cast<size_t>(i)]);
    fft_inplace(buf);
    for (int b = 0; b < bins; ++b)
      spec(b, static_cast<Eigen::Index>(f)) = std::log1p(std::abs(buf[static_cast<size_t>(b)]));
  }
  return spec;
}

}  // namespace

double ssim_images(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
  if (x.rows() != y.rows() || x.cols() != y.cols()) throw InputError("ssim_images: shape mismatch");
  const double c1 = 0.01 * 0.01;  // (K1 * range)^2, range = 1
  const double c2 = 0.03 * 0.03;
  const Eigen::Index rows = x.rows(), cols = x.cols();
  const Eigen::Index win = 8, stride = 4;
  double acc = 0.0;
  int64_t count = 0;
  for (Eigen::Index r = 0;; r += stride) {
    Eigen::Index r0 = std::min(r, std::max<Eigen::Index>(rows - win, 0));
    Eigen::Index rn = std::min<Eigen::Index>(win, rows);
    for (Eigen::Index c = 0;; c += stride) {
      Eigen::Index c0 = std::min(c, std::max<Eigen::Index>(cols - win, 0));
      Eigen::Index cn = std::min<Eigen::Index>(win, cols);
      auto wx = x.block(r0, c0, rn, cn);
      auto wy = y.block(r0, c0, rn, cn);
      double mx = wx.mean(), my = wy.mean();
      double vx = (wx.array() - mx).square().mean();
      double vy = (wy.array() - my).square().mean();
      double cov = ((wx.array() - mx) * (wy.array() - my)).mean();
      acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) /
             ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++count;
      if (c0 + cn >= cols) break;
    }
    if (r0 + rn >= rows) break;
  }
  return acc / static_cast<double>(count);
}

namespace {

Eigen::MatrixXd sym_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (m + m.transpose()));
  Eigen::VectorXd vals = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * vals.asDiagonal() * eig.eigenvectors().transpose();
}

}  // namespace

EmbeddingSetStats fit_stats(const std::vector<Eigen::VectorXd>& embeddings) {
  if (embeddings.size() < 2) throw InputError("fit_stats: need at least 2 embeddings");
  const Eigen::Index d = embeddings[0].size();
  EmbeddingSetStats s;
  s.count = static_cast<int64_t>(embeddings.size());
  s.mean = Eigen::VectorXd::Zero(d);
  for (const auto& e : embeddings) {
    if (e.size() != d) throw InputError("fit_stats: embedding dimension mismatch");
    s.mean += e;
  }
  s.mean /= static_cast<double>(s.count);
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
  for (const auto& e : embeddings) {
    Eigen::VectorXd c = e - s.mean;
    cov += c * c.transpose();
  }
  cov /= static_cast<double>(s.count);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (cov + cov.transpose()));
  s.cov = eig.eigenvectors() * eig.eigenvalues().cwiseMax(0.0).asDiagonal() *
          eig.eigenvectors().transpose();
  return s;
}

double si_sdr(const Waveform& est, const Waveform& ref, double cap_db) {
  if (est.samples.size() != ref.samples.size()) throw InputError("si_sdr: length mismatch");
  if (est.samples.empty()) throw InputError("si_sdr: empty input");
  double dot = 0.0, ref_energy = 0.0;
  for (size_t i = 0; i < ref.samples.size(); ++i) {
    dot += static_cast<double>(est.samples[i]) * ref.samples[i];
    ref_energy += static_cast<double>(ref.samples[i]) * ref.samples[i];
  }
  if (ref_energy == 0.0) throw InputError("si_sdr: reference is all zero");
  double alpha = dot / ref_energy;
  double target_energy = alpha * alpha * ref_energy;
  double residual = 0.0;
  for (size_t i = 0; i < ref.samples.size(); ++i) {
    double r = static_cast<double>(est.samples[i]) - alpha * ref.samples[i];
    residual += r * r;
  }
  if (residual <= 0.0) return cap_db;
  if (target_energy <= 0.0) return -cap_db;
  double value = 10.0 * std::log10(target_energy / residual);
  return std::min(cap_db, std::max(-cap_db, value));
}

double si_sdri(const Waveform& est, const Waveform& condition, const Waveform& ref,
               double cap_db) {
  return si_sdr(est, ref, cap_db) - si_sdr(condition, ref, cap_db);
}

double ssim(const Waveform& a, const Waveform& b, const MetricsConfig& cfg) {
  if (a.samples.size() != b.samples.size()) throw InputError("ssim: length mismatch");
  Eigen::MatrixXd sa = log_spectrogram(a, cfg.ssim_fft, cfg.ssim_hop);
  Eigen::MatrixXd sb = log_spectrogram(b, cfg.ssim_fft, cfg.ssim_hop);
  double peak = std::max(sa.maxCoeff(), sb.maxCoeff());
  if (peak > 0.0) {
    sa /= peak;
    sb /= peak;
  }
  return ssim_images(sa, sb);
}

double fad(const EmbeddingSetStats& a, const EmbeddingSetStats& b) {
  if (a.mean.size() != b.mean.size()) throw InputError("fad: dimension mismatch");
  if (a.count < 2 || b.count < 2) throw InputError("fad: need at least 2 samples per side");
  Eigen::MatrixXd sa = sym_sqrt(a.cov);
  Eigen::MatrixXd inner = sa * b.cov * sa;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (inner + inner.transpose()));
  double trace_sqrt = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  return (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * trace_sqrt;
}

double kl_div(const std::vector<Eigen::VectorXd>& a, const std::vector<Eigen::VectorXd>& b) {
  if (a.size() < 2 || b.size() < 2) throw InputError("kl_div: need at least 2 samples per side");
  const Eigen::Index d = a[0].size();
  if (b[0].size() != d) throw InputError("kl_div: dimension mismatch");
  const double floor = 1e-8;
  auto moments = [d](const std::vector<Eigen::VectorXd>& xs) {
    Eigen::VectorXd mu = Eigen::VectorXd::Zero(d), var = Eigen::VectorXd::Zero(d);
    for (const auto& x : xs) {
      if (x.size() != d) throw InputError("kl_div: inconsistent dimensions");
      mu += x;
    }
    mu /= static_cast<double>(xs.size());
    for (const auto& x : xs) var += (x - mu).cwiseAbs2();
    var /= static_cast<double>(xs.size());
    return std::make_pair(mu, var);
  };
  auto [mu_a, var_a] = moments(a);
  auto [mu_b, var_b] = moments(b);
  double total = 0.0;
  for (Eigen::Index i = 0; i < d; ++i) {
    double va = std::max(var_a(i), floor), vb = std::max(var_b(i), floor);
    double md = mu_a(i) - mu_b(i);
    total += 0.5 * std::log(vb / va) + (va + md * md) / (2.0 * vb) - 0.5;
  }
  return total / static_cast<double>(d);
}

MetricsReport evaluate(const std::vector<ManifestRecord>& records, const std::string& root,
                       const GenerateFn& generate_fn, const EmbeddingFn& embedding_fn,
                       const MetricsConfig& cfg, const std::string& config_echo) {
  MetricsReport report;
  report.config_echo = config_echo;
  report.notes =
      "embeddings: codec frame features (pluggable); kl: per-dimension gaussian closed form; "
      "clap: unavailable (needs a pretrained contrastive model)";

  struct Pool {
    std::vector<Eigen::VectorXd> est, ref;
    double ssim_sum = 0, sisdr_sum = 0, sisdri_sum = 0;
    int64_t count = 0;
  };
  std::map<std::string, Pool> pools;

  for (const ManifestRecord& rec : records) {
    Waveform cond, ref;
    try {
      cond = read_wav((fs::path(root) / rec.condition_path).string());
      ref = read_wav((fs::path(root) / rec.target_path).string());
    } catch (const InputError&) {
      report.missing_files.push_back(rec.id);
      continue;
    }
    Waveform est = generate_fn(rec, cond);
    Pool& pool = pools[rec.task];
    pool.ssim_sum += ssim(est, ref, cfg);
    if (rec.task != "add") {
      pool.sisdr_sum += si_sdr(est, ref, cfg.sisdr_cap_db);
      pool.sisdri_sum += si_sdri(est, cond, ref, cfg.sisdr_cap_db);
    }
    for (auto& e : embedding_fn(est)) pool.est.push_back(std::move(e));
    for (auto& e : embedding_fn(ref)) pool.ref.push_back(std::move(e));
    pool.count++;
  }

  for (auto& [task, pool] : pools) {
    TaskReport tr;
    tr.count = pool.count;
    tr.ssim_mean = pool.ssim_sum / static_cast<double>(pool.count);
    tr.fad_value = fad(fit_stats(pool.est), fit_stats(pool.ref));
    tr.kl_value = kl_div(pool.est, pool.ref);
    if (task != "add") {
      tr.has_sisdr = true;
      tr.si_sdr_mean = pool.sisdr_sum / static_cast<double>(pool.count);
      tr.si_sdri_mean = pool.sisdri_sum / static_cast<double>(pool.count);
    }
    report.per_task[task] = tr;
  }
  return report;
}

std::string report_table(const MetricsReport& report) {
  std::ostringstream os;
  for (std::istringstream echo(report.config_echo); echo;) {
    std::string line;
    if (!std::getline(echo, line)) break;
    if (!line.empty()) os << "# " << line << "\n";
  }
  if (!report.notes.empty()) os << "# " << report.notes << "\n";
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-8s %10s %6s %10s %8s %9s %9s %6s\n", "task", "FAD", "CLAP",
                "KL", "SSIM", "SI-SDR", "SI-SDRi", "n");
  os << buf;
  for (const char* task : {"add", "remove", "extract"}) {
    auto it = report.per_task.find(task);
    if (it == report.per_task.end()) continue;
    const TaskReport& tr = it->second;
    if (tr.has_sisdr) {
      std::snprintf(buf, sizeof(buf), "%-8s %10.4f %6s %10.4f %8.4f %9.2f %9.2f %6lld\n", task,
                    tr.fad_value, "-", tr.kl_value, tr.ssim_mean, tr.si_sdr_mean, tr.si_sdri_mean,
                    static_cast<long long>(tr.count));
    } else {
      std::snprintf(buf, sizeof(buf), "%-8s %10.4f %6s %10.4f %8.4f %9s %9s %6lld\n", task,
                    tr.fad_value, "-", tr.kl_value, tr.ssim_mean, "-", "-",
                    static_cast<long long>(tr.count));
    }
    os << buf;
  }
  if (!report.missing_files.empty()) os << "# missing files: " << report.missing_files.size() << "\n";
  return os.str();
}

std::string report_records(const MetricsReport& report) {
  std::ostringstream os;
  for (const char* task : {"add", "remove", "extract"}) {
    auto it = report.per_task.find(task);
    if (it == report.per_task.end()) continue;
    const TaskReport& tr = it->second;
    json j{{"task", task},        {"fad", tr.fad_value},   {"clap", "unavailable"},
           {"kl", tr.kl_value},   {"ssim", tr.ssim_mean},  {"count", tr.count}};
    if (tr.has_sisdr) {
      j["si_sdr"] = tr.si_sdr_mean;
      j["si_sdri"] = tr.si_sdri_mean;
    } else {
      j["si_sdr"] = nullptr;
      j["si_sdri"] = nullptr;
    }
    os << j.dump() << "\n";
  }
  json trailer{{"missing_files", report.missing_files}, {"notes", report.notes}};
  os << trailer.dump() << "\n";
  return os.str();
}

}  // namespace stemedit
