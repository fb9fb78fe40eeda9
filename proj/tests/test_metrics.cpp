#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <stemedit/metrics.hpp>

namespace fs = std::filesystem;
using namespace stemedit;

namespace {

Waveform wave_of(std::vector<float> samples, int rate = 16000) {
  Waveform w;
  w.sample_rate = rate;
  w.samples = std::move(samples);
  return w;
}

Waveform sine_wave(double freq, double seconds, int rate = 16000, double amp = 0.5) {
  Waveform w;
  w.sample_rate = rate;
  w.samples.resize(size_t(seconds * rate));
  for (size_t i = 0; i < w.samples.size(); ++i)
    w.samples[i] = float(amp * std::sin(2.0 * 3.14159265358979 * freq * double(i) / rate));
  return w;
}

Waveform noise_wave(uint64_t seed, double seconds, int rate = 16000, double amp = 0.3) {
  Rng rng(seed);
  Waveform w;
  w.sample_rate = rate;
  w.samples.resize(size_t(seconds * rate));
  for (auto& s : w.samples) s = float(amp * rng.normal());
  return w;
}

std::vector<Eigen::VectorXd> scalar_set(std::initializer_list<double> xs) {
  std::vector<Eigen::VectorXd> out;
  for (double x : xs) {
    Eigen::VectorXd v(1);
    v(0) = x;
    out.push_back(v);
  }
  return out;
}

}  // namespace

TEST_CASE("si_sdr: hand case, cap, scale invariance, errors") {
  CHECK(si_sdr(wave_of({1, 1}), wave_of({1, 0})) == doctest::Approx(0.0).epsilon(1e-12));

  Waveform ref = noise_wave(1, 0.1);
  CHECK(si_sdr(ref, ref) == 100.0);  // zero residual reports the cap

  Waveform est = noise_wave(2, 0.1);
  double v1 = si_sdr(est, ref);
  for (float c : {2.0f, -0.5f, 1e3f}) {
    Waveform scaled = est;
    for (auto& s : scaled.samples) s *= c;
    CHECK(std::abs(si_sdr(scaled, ref) - v1) < 1e-9);
  }

  CHECK_THROWS_AS(si_sdr(est, wave_of(std::vector<float>(est.samples.size(), 0.0f))), InputError);
  CHECK_THROWS_AS(si_sdr(wave_of({1, 2, 3}), wave_of({1, 2})), InputError);
}

TEST_CASE("si_sdri: definitional zero, oracle composition, cap case") {
  Waveform ref = noise_wave(3, 0.1);
  Waveform cond = noise_wave(4, 0.1);
  CHECK(si_sdri(cond, cond, ref) == 0.0);
  CHECK(si_sdri(ref, cond, ref) == doctest::Approx(100.0 - si_sdr(cond, ref)));

  Waveform est = noise_wave(5, 0.1);
  CHECK(si_sdri(est, cond, ref) == doctest::Approx(si_sdr(est, ref) - si_sdr(cond, ref)));
}

TEST_CASE("ssim: self-identity, symmetry, bounds, zero-variance closed form") {
  MetricsConfig cfg;
  Waveform a = sine_wave(220.0, 0.5);
  Waveform b = noise_wave(6, 0.5);
  CHECK(ssim(a, a, cfg) == 1.0);
  CHECK(ssim(a, b, cfg) == ssim(b, a, cfg));
  double v = ssim(a, b, cfg);
  CHECK(v >= -1.0);
  CHECK(v <= 1.0);

  // constant images: mu_a = 1, mu_b = 0, sigma = 0, so every window scores
  // (2*0 + C1) / (1 + 0 + C1) with C1 = 1e-4
  Eigen::MatrixXd ones = Eigen::MatrixXd::Ones(16, 16);
  Eigen::MatrixXd zeros = Eigen::MatrixXd::Zero(16, 16);
  CHECK(ssim_images(ones, zeros) == doctest::Approx(1e-4 / 1.0001).epsilon(1e-9));
  CHECK(ssim_images(ones, ones) == 1.0);

  Waveform tooshort = wave_of(std::vector<float>(100, 0.1f));
  CHECK_THROWS_AS(ssim(tooshort, tooshort, cfg), InputError);
}

TEST_CASE("fad: identical stats vanish, 1-D closed form, symmetry") {
  EmbeddingSetStats a, b;
  a.mean = Eigen::VectorXd::Zero(1);
  a.cov = Eigen::MatrixXd::Ones(1, 1);
  a.count = 10;
  b.mean = Eigen::VectorXd::Constant(1, 3.0);
  b.cov = Eigen::MatrixXd::Ones(1, 1);
  b.count = 10;
  CHECK(fad(a, a) == doctest::Approx(0.0).epsilon(1e-10));
  CHECK(fad(a, b) == doctest::Approx(9.0).epsilon(1e-9));
  CHECK(fad(a, b) == doctest::Approx(fad(b, a)).epsilon(1e-12));

  SUBCASE("fitted stats from samples behave the same way") {
    Rng rng(7);
    std::vector<Eigen::VectorXd> xs;
    for (int i = 0; i < 500; ++i) {
      Eigen::VectorXd v(3);
      for (int j = 0; j < 3; ++j) v(j) = rng.normal();
      xs.push_back(v);
    }
    EmbeddingSetStats s = fit_stats(xs);
    CHECK(fad(s, s) < 1e-8);
    CHECK(fad(s, s) >= -1e-8);
  }
  SUBCASE("dimension mismatch rejected") {
    EmbeddingSetStats c;
    c.mean = Eigen::VectorXd::Zero(2);
    c.cov = Eigen::MatrixXd::Identity(2, 2);
    c.count = 5;
    CHECK_THROWS_AS(fad(a, c), InputError);
  }
}

TEST_CASE("kl_div: self-zero, 1-D closed form, nonnegative") {
  // population moments of {-1, 1} are (0, 1); of {0, 2} are (1, 1)
  auto a = scalar_set({-1.0, 1.0});
  auto b = scalar_set({0.0, 2.0});
  CHECK(kl_div(a, a) < 1e-8);
  CHECK(kl_div(a, b) == doctest::Approx(0.5).epsilon(1e-9));

  Rng rng(8);
  std::vector<Eigen::VectorXd> xs, ys;
  for (int i = 0; i < 200; ++i) {
    Eigen::VectorXd x(4), y(4);
    for (int j = 0; j < 4; ++j) {
      x(j) = rng.normal();
      y(j) = 0.5 + 2.0 * rng.normal();
    }
    xs.push_back(x);
    ys.push_back(y);
  }
  CHECK(kl_div(xs, ys) >= 0.0);
  CHECK(kl_div(ys, xs) >= 0.0);
  CHECK(kl_div(xs, xs) < 1e-8);
}

TEST_CASE("evaluate: copy-condition and oracle models hit their closed forms") {
  // build a small manifest on disk
  fs::path dir = fs::temp_directory_path() / ("stemedit_eval_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir / "audio");
  std::vector<ManifestRecord> records;
  Rng rng(9);
  for (int i = 0; i < 6; ++i) {
    ManifestRecord r;
    char id[8];
    std::snprintf(id, sizeof(id), "%06d", i);
    r.id = id;
    r.task = (i % 3 == 0) ? "add" : (i % 3 == 1) ? "remove" : "extract";
    r.instruction = "Remove bass";
    r.condition_path = "audio/" + r.id + "_cond.wav";
    r.target_path = "audio/" + r.id + "_target.wav";
    Waveform cond = noise_wave(100 + uint64_t(i), 0.4);
    Waveform target = noise_wave(200 + uint64_t(i), 0.4);
    write_wav((dir / r.condition_path).string(), cond, WavEncoding::Float32);
    write_wav((dir / r.target_path).string(), target, WavEncoding::Float32);
    records.push_back(r);
  }
  MetricsConfig cfg;
  EmbeddingFn embed = [](const Waveform& w) {
    // 4-sample chunks as embeddings; enough for pooled stats
    std::vector<Eigen::VectorXd> out;
    for (size_t i = 0; i + 4 <= w.samples.size(); i += 4) {
      Eigen::VectorXd v(4);
      for (size_t j = 0; j < 4; ++j) v(Eigen::Index(j)) = w.samples[i + j];
      out.push_back(v);
    }
    return out;
  };

  SUBCASE("copy-condition model scores exactly 0 dB SI-SDRi on remove/extract") {
    GenerateFn copy_fn = [](const ManifestRecord&, const Waveform& cond) { return cond; };
    MetricsReport rep = evaluate(records, dir.string(), copy_fn, embed, cfg);
    CHECK(rep.per_task.at("remove").si_sdri_mean == 0.0);
    CHECK(rep.per_task.at("extract").si_sdri_mean == 0.0);
    CHECK_FALSE(rep.per_task.at("add").has_sisdr);
  }
  SUBCASE("ground-truth model: ssim 1, fad ~ 0, si_sdri = cap - si_sdr(cond)") {
    GenerateFn oracle_fn = [&](const ManifestRecord& rec, const Waveform&) {
      return read_wav((dir / rec.target_path).string());
    };
    MetricsReport rep = evaluate(records, dir.string(), oracle_fn, embed, cfg);
    for (const char* task : {"add", "remove", "extract"}) {
      CHECK(rep.per_task.at(task).ssim_mean == doctest::Approx(1.0));
      CHECK(rep.per_task.at(task).fad_value < 1e-8);
      CHECK(rep.per_task.at(task).kl_value < 1e-8);
    }
    CHECK(rep.per_task.at("remove").si_sdr_mean == 100.0);
  }
  SUBCASE("missing files are listed and skipped") {
    auto broken = records;
    broken[1].condition_path = "audio/not_there.wav";
    GenerateFn copy_fn = [](const ManifestRecord&, const Waveform& cond) { return cond; };
    MetricsReport rep = evaluate(broken, dir.string(), copy_fn, embed, cfg);
    REQUIRE(rep.missing_files.size() == 1);
    CHECK(rep.missing_files[0] == broken[1].id);
    int64_t total = 0;
    for (auto& [task, tr] : rep.per_task) total += tr.count;
    CHECK(total == 5);
  }
  SUBCASE("report writers are deterministic") {
    GenerateFn copy_fn = [](const ManifestRecord&, const Waveform& cond) { return cond; };
    MetricsReport r1 = evaluate(records, dir.string(), copy_fn, embed, cfg, "seed = 1");
    MetricsReport r2 = evaluate(records, dir.string(), copy_fn, embed, cfg, "seed = 1");
    CHECK(report_table(r1) == report_table(r2));
    CHECK(report_records(r1) == report_records(r2));
    CHECK(report_table(r1).find("CLAP") != std::string::npos);
  }
  fs::remove_all(dir);
}
