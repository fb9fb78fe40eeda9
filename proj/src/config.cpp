#include "stemedit/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <vector>

namespace stemedit {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

int parse_int(const std::string& key, const std::string& v) {
  int out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError("config: bad integer for " + key + ": '" + v + "'");
  return out;
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
  uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError("config: bad seed for " + key + ": '" + v + "'");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config: bad number for " + key + ": '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: bad bool for " + key + ": '" + v + "'");
}

std::string fmt_double(double d) {
  std::ostringstream os;
  os.precision(17);
  os << d;
  return os.str();
}

}  // namespace

// Table-driven binder: one entry per key keeps parse/echo symmetric.
#define SE_INT(path, field)                                                          \
  {                                                                                  \
    path, {                                                                          \
      [](RunConfig& c, const std::string& k, const std::string& v) { c.field = parse_int(k, v); },   \
      [](const RunConfig& c) { return std::to_string(c.field); }                     \
    }                                                                                \
  }
#define SE_DBL(path, field)                                                          \
  {                                                                                  \
    path, {                                                                          \
      [](RunConfig& c, const std::string& k, const std::string& v) { c.field = parse_double(k, v); }, \
      [](const RunConfig& c) { return fmt_double(c.field); }                         \
    }                                                                                \
  }
#define SE_STR(path, field)                                                          \
  {                                                                                  \
    path, {                                                                          \
      [](RunConfig& c, const std::string&, const std::string& v) { c.field = v; },   \
      [](const RunConfig& c) { return c.field; }                                     \
    }                                                                                \
  }
#define SE_BOOL(path, field)                                                         \
  {                                                                                  \
    path, {                                                                          \
      [](RunConfig& c, const std::string& k, const std::string& v) { c.field = parse_bool(k, v); },  \
      [](const RunConfig& c) { return c.field ? std::string("true") : std::string("false"); }        \
    }                                                                                \
  }

namespace {

struct KeyBinding {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

const std::map<std::string, KeyBinding>& key_table() {
  static const std::map<std::string, KeyBinding> table = {
      {"seed",
       {[](RunConfig& c, const std::string& k, const std::string& v) { c.seed = parse_u64(k, v); },
        [](const RunConfig& c) { return std::to_string(c.seed); }}},
      SE_INT("codec.sample_rate", codec.sample_rate),
      SE_INT("codec.frame_rate", codec.frame_rate),
      SE_INT("codec.n_codebooks", codec.n_codebooks),
      SE_INT("codec.codebook_size", codec.codebook_size),
      SE_INT("codec.feature_dim", codec.feature_dim),
      SE_INT("codec.kmeans_iters", codec.kmeans_iters),
      SE_INT("model.d_model", model.d_model),
      SE_INT("model.n_layers", model.n_layers),
      SE_INT("model.n_heads", model.n_heads),
      SE_INT("model.ffn_mult", model.ffn_mult),
      SE_INT("model.d_text", model.d_text),
      SE_INT("model.text_layers", model.text_layers),
      SE_INT("model.t_max", model.t_max),
      SE_INT("fusion.bottleneck", fusion.bottleneck),
      SE_INT("lora.rank", lora.rank),
      SE_DBL("lora.scale", lora.scale),
      SE_INT("datagen.n_stems", datagen.n_stems),
      SE_DBL("datagen.track_duration", datagen.track_duration),
      SE_DBL("datagen.clip_duration", datagen.clip_duration),
      SE_DBL("datagen.silence_frame_ms", datagen.silence_frame_ms),
      SE_DBL("datagen.silence_rms_threshold", datagen.silence_rms_threshold),
      SE_DBL("datagen.silence_max_fraction", datagen.silence_max_fraction),
      SE_INT("datagen.offset_retries", datagen.offset_retries),
      SE_STR("datagen.instruments", datagen.instruments),
      SE_DBL("trainer.lr", trainer.lr),
      SE_INT("trainer.warmup_steps", trainer.warmup_steps),
      SE_INT("trainer.total_steps", trainer.total_steps),
      SE_INT("trainer.batch_size", trainer.batch_size),
      SE_INT("trainer.grad_accum", trainer.grad_accum),
      SE_DBL("trainer.weight_decay", trainer.weight_decay),
      SE_DBL("trainer.clip_norm", trainer.clip_norm),
      SE_STR("trainer.loss_mode", trainer.loss_mode),
      SE_BOOL("trainer.text_fusion", trainer.text_fusion),
      SE_INT("trainer.checkpoint_every", trainer.checkpoint_every),
      SE_DBL("trainer.beta1", trainer.beta1),
      SE_DBL("trainer.beta2", trainer.beta2),
      SE_DBL("trainer.adam_eps", trainer.adam_eps),
      SE_INT("metrics.ssim_fft", metrics.ssim_fft),
      SE_INT("metrics.ssim_hop", metrics.ssim_hop),
      SE_DBL("metrics.sisdr_cap_db", metrics.sisdr_cap_db),
  };
  return table;
}

}  // namespace

void apply_config_kv(RunConfig& cfg, const std::string& key, const std::string& value) {
  auto it = key_table().find(key);
  if (it == key_table().end()) throw ConfigError("config: unknown key '" + key + "'");
  it->second.set(cfg, key, value);
}

RunConfig parse_config_text(const std::string& text, RunConfig defaults) {
  RunConfig cfg = defaults;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: line " + std::to_string(lineno) + " has no '='");
    apply_config_kv(cfg, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  return cfg;
}

RunConfig load_config_file(const std::string& path, RunConfig defaults) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), defaults);
}

std::string serialize_config(const RunConfig& cfg) {
  std::ostringstream os;
  for (const auto& [key, binding] : key_table()) os << key << " = " << binding.get(cfg) << "\n";
  return os.str();
}

RunConfig full_scale_config() {
  RunConfig cfg;
  cfg.codec.sample_rate = 32000;
  cfg.codec.frame_rate = 50;
  cfg.codec.n_codebooks = 4;
  cfg.codec.codebook_size = 2048;
  cfg.codec.feature_dim = 128;
  cfg.model.d_model = 2048;
  cfg.model.n_layers = 48;
  cfg.model.n_heads = 32;
  cfg.model.ffn_mult = 4;
  cfg.model.d_text = 2048;
  cfg.model.text_layers = 2;
  cfg.model.t_max = 500;
  cfg.lora.rank = 8;
  return cfg;
}

}  // namespace stemedit
