#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <stemedit/pipeline.hpp>

namespace py = pybind11;
using namespace stemedit;

namespace {

Waveform to_waveform(const py::array_t<float, py::array::c_style | py::array::forcecast>& samples,
                     int sample_rate) {
  if (samples.ndim() != 1) throw InputError("expected a 1-D float array of samples");
  Waveform w;
  w.sample_rate = sample_rate;
  w.samples.assign(samples.data(), samples.data() + samples.size());
  return w;
}

py::array_t<float> from_waveform(const Waveform& w) {
  py::array_t<float> out(static_cast<py::ssize_t>(w.samples.size()));
  std::copy(w.samples.begin(), w.samples.end(), out.mutable_data());
  return out;
}

py::array_t<int32_t> from_grid(const TokenGrid& g) {
  py::array_t<int32_t> out({static_cast<py::ssize_t>(g.n_codebooks()),
                            static_cast<py::ssize_t>(g.n_frames())});
  auto r = out.mutable_unchecked<2>();
  for (py::ssize_t i = 0; i < r.shape(0); ++i)
    for (py::ssize_t j = 0; j < r.shape(1); ++j) r(i, j) = g.tokens(i, j);
  return out;
}

TokenGrid to_grid(const py::array_t<int32_t, py::array::c_style | py::array::forcecast>& tokens,
                  int frame_rate) {
  if (tokens.ndim() != 2) throw InputError("expected a 2-D int32 token matrix");
  TokenGrid g;
  g.frame_rate = frame_rate;
  g.tokens.resize(tokens.shape(0), tokens.shape(1));
  auto r = tokens.unchecked<2>();
  for (py::ssize_t i = 0; i < r.shape(0); ++i)
    for (py::ssize_t j = 0; j < r.shape(1); ++j) g.tokens(i, j) = r(i, j);
  return g;
}

std::vector<Eigen::VectorXd> to_rows(
    const py::array_t<double, py::array::c_style | py::array::forcecast>& m) {
  if (m.ndim() != 2) throw InputError("expected a 2-D array (rows = samples)");
  std::vector<Eigen::VectorXd> out;
  auto r = m.unchecked<2>();
  for (py::ssize_t i = 0; i < r.shape(0); ++i) {
    Eigen::VectorXd v(r.shape(1));
    for (py::ssize_t j = 0; j < r.shape(1); ++j) v(j) = r(i, j);
    out.push_back(std::move(v));
  }
  return out;
}

struct PyBundle {
  ModelBundle bundle;
};

}  // namespace

PYBIND11_MODULE(_stemedit, m) {
  m.doc() = "instruction-driven stem editing over tokenized audio";

  py::register_exception<InputError>(m, "InputError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

  m.def(
      "si_sdr",
      [](py::array_t<float> est, py::array_t<float> ref, double cap) {
        return si_sdr(to_waveform(est, 1), to_waveform(ref, 1), cap);
      },
      py::arg("est"), py::arg("ref"), py::arg("cap_db") = 100.0);

  m.def(
      "si_sdri",
      [](py::array_t<float> est, py::array_t<float> cond, py::array_t<float> ref, double cap) {
        return si_sdri(to_waveform(est, 1), to_waveform(cond, 1), to_waveform(ref, 1), cap);
      },
      py::arg("est"), py::arg("condition"), py::arg("ref"), py::arg("cap_db") = 100.0);

  m.def(
      "ssim",
      [](py::array_t<float> a, py::array_t<float> b, int sample_rate) {
        MetricsConfig cfg;
        return ssim(to_waveform(a, sample_rate), to_waveform(b, sample_rate), cfg);
      },
      py::arg("a"), py::arg("b"), py::arg("sample_rate") = 16000);

  m.def(
      "fad",
      [](py::array_t<double> feats_a, py::array_t<double> feats_b) {
        return fad(fit_stats(to_rows(feats_a)), fit_stats(to_rows(feats_b)));
      },
      py::arg("features_a"), py::arg("features_b"),
      "Frechet distance between Gaussians fitted to two feature sets");

  m.def(
      "kl_div",
      [](py::array_t<double> a, py::array_t<double> b) { return kl_div(to_rows(a), to_rows(b)); },
      py::arg("features_a"), py::arg("features_b"));

  m.def(
      "lr_at",
      [](int64_t step, double lr, int warmup, int total) {
        TrainerConfig cfg;
        cfg.lr = lr;
        cfg.warmup_steps = warmup;
        cfg.total_steps = total;
        return lr_at(step, cfg);
      },
      py::arg("step"), py::arg("lr") = 5e-3, py::arg("warmup_steps") = 100,
      py::arg("total_steps") = 5000);

  m.def(
      "mix",
      [](const std::vector<py::array_t<float>>& stems, int sample_rate) {
        std::vector<Waveform> ws;
        for (const auto& s : stems) ws.push_back(to_waveform(s, sample_rate));
        return from_waveform(mix(ws));
      },
      py::arg("stems"), py::arg("sample_rate") = 16000);

  m.def(
      "silence_fraction",
      [](py::array_t<float> w, int sample_rate, double frame_ms, double threshold) {
        return silence_fraction(to_waveform(w, sample_rate), frame_ms, threshold);
      },
      py::arg("samples"), py::arg("sample_rate") = 16000, py::arg("frame_ms") = 25.0,
      py::arg("rms_threshold") = 1e-3);

  m.def(
      "gen_track",
      [](uint64_t seed, int n_stems, double duration, int sample_rate) {
        DatagenConfig dg;
        Track t = gen_synthetic_track(seed, n_stems, duration, dg, sample_rate);
        py::dict out;
        for (const Stem& s : t.stems) out[py::str(s.instrument_label)] = from_waveform(s.waveform);
        return out;
      },
      py::arg("seed"), py::arg("n_stems") = 3, py::arg("duration") = 12.0,
      py::arg("sample_rate") = 16000);

  m.def(
      "grad_check",
      [](int layers, int dmodel, int frames, uint64_t seed) {
        RunConfig cfg;
        cfg.model.n_layers = layers;
        cfg.model.d_model = dmodel;
        cfg.model.n_heads = 2;
        cfg.model.d_text = dmodel;
        cfg.model.t_max = std::max(frames, 8);
        cfg.codec.n_codebooks = 2;
        cfg.codec.codebook_size = 8;
        cfg.lora.rank = 2;
        cfg.seed = seed;
        std::vector<std::pair<std::string, double>> out;
        for (const auto& e : grad_check(cfg, seed, 1e-5, frames))
          out.emplace_back(e.name, e.max_rel_err);
        return out;
      },
      py::arg("layers") = 2, py::arg("dmodel") = 8, py::arg("frames") = 4, py::arg("seed") = 7);

  m.def("param_counts", [](bool full_scale) {
    RunConfig cfg = full_scale ? full_scale_config() : RunConfig{};
    py::dict d;
    d["base"] = count_base_params(cfg);
    d["fusion"] = count_fusion_params(cfg);
    d["lora"] = count_lora_params(cfg);
    d["linear_cond_stack"] = count_linear_cond_stack(cfg);
    return d;
  }, py::arg("full_scale") = true);

  py::class_<PyBundle>(m, "Bundle")
      .def_static("load",
                  [](const std::string& path) {
                    auto b = std::make_unique<PyBundle>();
                    b->bundle = load_bundle(path);
                    return b;
                  })
      .def_property_readonly("sample_rate",
                             [](const PyBundle& b) { return b.bundle.cfg.codec.sample_rate; })
      .def("encode",
           [](PyBundle& b, py::array_t<float> samples) {
             return from_grid(encode(to_waveform(samples, b.bundle.cfg.codec.sample_rate),
                                     b.bundle.codec));
           })
      .def("decode",
           [](PyBundle& b, py::array_t<int32_t> tokens) {
             return from_waveform(
                 decode(to_grid(tokens, b.bundle.cfg.codec.frame_rate), b.bundle.codec));
           })
      .def(
          "edit",
          [](PyBundle& b, py::array_t<float> samples, const std::string& instruction,
             double temperature, int top_k, uint64_t seed) {
            Waveform input = to_waveform(samples, b.bundle.cfg.codec.sample_rate);
            return from_waveform(
                edit_waveform(b.bundle, input, instruction, Sampling{temperature, top_k, seed}));
          },
          py::arg("samples"), py::arg("instruction"), py::arg("temperature") = 0.0,
          py::arg("top_k") = 0, py::arg("seed") = 0);
}
