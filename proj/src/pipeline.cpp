#include "stemedit/pipeline.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace stemedit {

namespace {

std::string codec_meta(const CodebookStack& cb) {
  std::ostringstream os;
  os << cb.sample_rate << " " << cb.frame_rate << " " << cb.window << " " << cb.feature_dim << " "
     << cb.codebook_size;
  return os.str();
}

void add_params(TensorFile& f, const std::vector<Parameter<float>*>& params) {
  for (const auto* p : params)
    f.add_matrix(p->name, p->trainable ? TensorGroup::Trainable : TensorGroup::Frozen, p->value);
}

void restore_params(const TensorFile& f, const std::vector<Parameter<float>*>& params) {
  for (auto* p : params) {
    const Mat<float>& m = f.matrix(p->name);
    if (m.rows() != p->value.rows() || m.cols() != p->value.cols())
      throw InputError("checkpoint: shape mismatch for " + p->name);
    p->value = m;
  }
}

}  // namespace

void save_bundle(ModelBundle& bundle, const TrainState* state, const std::string& path) {
  TensorFile f;
  f.add_bytes("meta/format", TensorGroup::Meta, "stemedit-checkpoint-v1");
  f.add_bytes("meta/config", TensorGroup::Meta, serialize_config(bundle.cfg));
  f.add_bytes("meta/frozen", TensorGroup::Meta, bundle.base.frozen ? "true" : "false");
  f.add_bytes("meta/codec", TensorGroup::Meta, codec_meta(bundle.codec));

  f.add_matrix("codec/analysis", TensorGroup::Frozen, bundle.codec.analysis);
  for (int n = 0; n < bundle.codec.n_codebooks(); ++n)
    f.add_matrix("codec/book/" + std::to_string(n), TensorGroup::Frozen,
                 bundle.codec.codebooks[static_cast<size_t>(n)]);

  add_params(f, bundle.base.params());
  if (bundle.fusion) add_params(f, bundle.fusion->params());
  if (bundle.lora) add_params(f, bundle.lora->params());

  if (state != nullptr) {
    std::vector<Parameter<float>*> trainables;
    if (bundle.base.frozen) {
      if (bundle.fusion) trainables = bundle.fusion->params();
      if (bundle.lora) {
        auto lp = bundle.lora->params();
        trainables.insert(trainables.end(), lp.begin(), lp.end());
      }
    } else {
      trainables = bundle.base.params();
    }
    if (!state->opt.slots.empty()) {
      if (state->opt.slots.size() != trainables.size())
        throw InputError("save_bundle: optimizer slots do not match the trainable set");
      for (size_t i = 0; i < trainables.size(); ++i) {
        f.add_matrix("state/opt/" + trainables[i]->name + "/m", TensorGroup::State,
                     state->opt.slots[i].m);
        f.add_matrix("state/opt/" + trainables[i]->name + "/v", TensorGroup::State,
                     state->opt.slots[i].v);
      }
    }
    f.add_bytes("meta/step", TensorGroup::Meta, std::to_string(state->step));
    f.add_bytes("meta/opt_t", TensorGroup::Meta, std::to_string(state->opt.t));
    f.add_bytes("meta/data_seed", TensorGroup::Meta, std::to_string(state->seed));
  }

  char hash[32];
  std::snprintf(hash, sizeof(hash), "%016llx",
                static_cast<unsigned long long>(f.group_hash(TensorGroup::Frozen)));
  f.add_bytes("meta/frozen_hash", TensorGroup::Meta, hash);
  f.save(path);
}

ModelBundle load_bundle(const std::string& path, TrainState* state_out) {
  TensorFile f = TensorFile::load(path);
  ModelBundle bundle;
  bundle.cfg = parse_config_text(f.bytes("meta/config"));

  {
    std::istringstream meta(f.bytes("meta/codec"));
    CodebookStack& cb = bundle.codec;
    meta >> cb.sample_rate >> cb.frame_rate >> cb.window >> cb.feature_dim >> cb.codebook_size;
    cb.analysis = f.matrix("codec/analysis");
    for (int n = 0;; ++n) {
      std::string name = "codec/book/" + std::to_string(n);
      if (!f.has(name)) break;
      cb.codebooks.push_back(f.matrix(name));
    }
  }

  bundle.base = BaseModel<float>::init(bundle.cfg, bundle.cfg.seed);
  restore_params(f, bundle.base.params());
  bundle.base.set_frozen(f.bytes("meta/frozen") == "true");

  if (f.has("fusion/z0_cond")) {
    bundle.fusion = std::make_unique<FusionParams<float>>(
        FusionParams<float>::init(bundle.cfg, bundle.cfg.seed));
    restore_params(f, bundle.fusion->params());
  }
  if (f.has("lora/layer0/q/a")) {
    bundle.lora =
        std::make_unique<LoraSet<float>>(LoraSet<float>::init(bundle.cfg, bundle.cfg.seed));
    restore_params(f, bundle.lora->params());
  }

  if (state_out != nullptr && f.has("meta/step")) {
    state_out->step = std::stoll(f.bytes("meta/step"));
    state_out->opt.t = std::stoll(f.bytes("meta/opt_t"));
    state_out->seed = std::stoull(f.bytes("meta/data_seed"));
    std::vector<Parameter<float>*> trainables;
    if (bundle.base.frozen) {
      if (bundle.fusion) trainables = bundle.fusion->params();
      if (bundle.lora) {
        auto lp = bundle.lora->params();
        trainables.insert(trainables.end(), lp.begin(), lp.end());
      }
    } else {
      trainables = bundle.base.params();
    }
    state_out->opt.slots.clear();
    for (const auto* p : trainables) {
      AdamW::Slot slot;
      slot.m = f.matrix("state/opt/" + p->name + "/m");
      slot.v = f.matrix("state/opt/" + p->name + "/v");
      state_out->opt.slots.push_back(std::move(slot));
    }
  }
  return bundle;
}

TokenizedTriplet tokenize_triplet(const ModelBundle& bundle, BaseModel<float>& base,
                                  const ManifestRecord& rec, const std::string& root) {
  TokenizedTriplet item;
  Waveform cond = read_wav((fs::path(root) / rec.condition_path).string());
  Waveform target = read_wav((fs::path(root) / rec.target_path).string());
  item.condition = encode(cond, bundle.codec);
  item.target = encode(target, bundle.codec);
  item.instruction = base.text.vocab.tokenize(rec.instruction);
  item.task = rec.task;
  return item;
}

std::vector<TokenizedTriplet> tokenize_triplets(ModelBundle& bundle,
                                                const std::vector<ManifestRecord>& records,
                                                const std::string& root) {
  std::vector<TokenizedTriplet> items;
  items.reserve(records.size());
  for (const auto& rec : records)
    items.push_back(tokenize_triplet(bundle, bundle.base, rec, root));
  return items;
}

std::vector<PretrainItem> build_pretrain_items(const std::vector<Track>& tracks,
                                               const CodebookStack& codec, const Vocab& vocab,
                                               const DatagenConfig& dg, int count, uint64_t seed) {
  if (tracks.empty()) throw InputError("build_pretrain_items: no tracks");
  std::vector<PretrainItem> items;
  items.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    Rng rng(mix_seed(seed, 0xc0de + static_cast<uint64_t>(i)));
    const Track& track = tracks[static_cast<size_t>(
        rng.uniform_int(0, static_cast<int64_t>(tracks.size()) - 1))];
    std::vector<Waveform> stems;
    for (const Stem& s : track.stems) stems.push_back(s.waveform);
    Waveform full = mix(stems);
    size_t clip_len = static_cast<size_t>(std::llround(dg.clip_duration * full.sample_rate));
    if (clip_len > full.samples.size())
      throw InputError("build_pretrain_items: clip longer than the track");
    size_t offset = static_cast<size_t>(
        rng.uniform_int(0, static_cast<int64_t>(full.samples.size() - clip_len)));
    Waveform clip;
    clip.sample_rate = full.sample_rate;
    clip.samples.assign(full.samples.begin() + static_cast<std::ptrdiff_t>(offset),
                        full.samples.begin() + static_cast<std::ptrdiff_t>(offset + clip_len));
    PretrainItem item;
    item.description = vocab.tokenize(track_description(track));
    item.target = encode(clip, codec);
    items.push_back(std::move(item));
  }
  return items;
}

Waveform edit_waveform(ModelBundle& bundle, const Waveform& input, const std::string& instruction,
                       const Sampling& sampling) {
  if (!bundle.fusion) throw ConfigError("edit: checkpoint has no fusion adapters");
  TokenGrid cond = encode(input, bundle.codec);
  int frames = static_cast<int>(cond.n_frames());
  std::vector<int32_t> ids = bundle.base.text.vocab.tokenize(instruction);
  TokenGrid out = generate(bundle.base, ids, frames, sampling, bundle.fusion.get(),
                           bundle.lora.get(), &cond);
  Waveform wav = decode(out, bundle.codec);
  wav.samples.resize(input.samples.size());
  return wav;
}

EmbeddingFn codec_embedding_fn(CodebookStack codec) {
  return [codec = std::move(codec)](const Waveform& w) {
    Mat<float> frames = analysis_frames(w, codec);
    std::vector<Eigen::VectorXd> out;
    out.reserve(static_cast<size_t>(frames.rows()));
    for (Eigen::Index i = 0; i < frames.rows(); ++i)
      out.push_back(frames.row(i).transpose().cast<double>());
    return out;
  };
}

GenerateFn bundle_generate_fn(ModelBundle& bundle) {
  return [&bundle](const ManifestRecord& rec, const Waveform& cond) {
    return edit_waveform(bundle, cond, rec.instruction, Sampling{0.0, 0, bundle.cfg.seed});
  };
}

void cmd_gen_corpus(const RunConfig& cfg, int n_tracks, const std::string& out_dir) {
  if (n_tracks < 1) throw InputError("gen-corpus: need at least one track");
  std::vector<Track> tracks;
  tracks.reserve(static_cast<size_t>(n_tracks));
  for (int i = 0; i < n_tracks; ++i)
    tracks.push_back(gen_synthetic_track(mix_seed(cfg.seed, static_cast<uint64_t>(i)),
                                         cfg.datagen.n_stems, cfg.datagen.track_duration,
                                         cfg.datagen, cfg.codec.sample_rate));
  write_tracks(tracks, out_dir);
}

std::vector<ManifestRecord> cmd_make_triplets(const RunConfig& cfg, const std::string& tracks_dir,
                                              int count, const std::string& out_dir) {
  std::vector<Track> tracks = read_tracks(tracks_dir);
  return build_manifest(tracks, count, cfg.seed, out_dir, cfg.datagen);
}

namespace {

void write_log(const std::string& path, const std::vector<TrainLogEntry>& log) {
  if (path.empty()) return;
  std::ofstream out(path);
  for (const auto& e : log)
    out << json{{"step", e.step}, {"loss", e.loss}, {"lr", e.lr}, {"wall_ms", e.wall_ms}}.dump()
        << "\n";
}

}  // namespace

void cmd_pretrain(const RunConfig& cfg, const std::string& tracks_dir, int n_items,
                  const std::string& out_ckpt, const std::string& log_path) {
  std::vector<Track> tracks = read_tracks(tracks_dir);

  // codec first: residual k-means over stem and mix frames
  std::vector<Mat<float>> frame_blocks;
  Eigen::Index total_rows = 0;
  for (const Track& track : tracks) {
    std::vector<Waveform> stems;
    for (const Stem& s : track.stems) {
      frame_blocks.push_back(analysis_frames(s.waveform, cfg.codec));
      total_rows += frame_blocks.back().rows();
      stems.push_back(s.waveform);
    }
    frame_blocks.push_back(analysis_frames(mix(stems), cfg.codec));
    total_rows += frame_blocks.back().rows();
  }
  Mat<float> corpus(total_rows, cfg.codec.feature_dim);
  Eigen::Index at = 0;
  for (const auto& block : frame_blocks) {
    corpus.middleRows(at, block.rows()) = block;
    at += block.rows();
  }

  ModelBundle bundle;
  bundle.cfg = cfg;
  bundle.codec = train_codebooks(corpus, cfg.codec, cfg.seed);
  bundle.base = BaseModel<float>::init(cfg, cfg.seed);

  std::vector<PretrainItem> items = build_pretrain_items(
      tracks, bundle.codec, bundle.base.text.vocab, cfg.datagen, n_items, cfg.seed);

  TrainState state;
  state.seed = cfg.seed;
  auto log = pretrain_loop(bundle.base, items, cfg.trainer, state);
  write_log(log_path, log);
  save_bundle(bundle, &state, out_ckpt);
}

void cmd_finetune(const RunConfig& user_cfg, const std::string& base_ckpt,
                  const std::string& triplets_dir, const std::string& out_ckpt,
                  const std::string& log_path) {
  ModelBundle bundle = load_bundle(base_ckpt);
  bundle.cfg.trainer = user_cfg.trainer;
  bundle.cfg.lora = user_cfg.lora;
  bundle.cfg.fusion = user_cfg.fusion;
  bundle.cfg.seed = user_cfg.seed;
  bundle.base.set_frozen(true);

  bundle.fusion = std::make_unique<FusionParams<float>>(
      FusionParams<float>::init(bundle.cfg, bundle.cfg.seed));
  if (bundle.cfg.trainer.text_fusion)
    bundle.lora =
        std::make_unique<LoraSet<float>>(LoraSet<float>::init(bundle.cfg, bundle.cfg.seed));

  auto records = read_manifest((fs::path(triplets_dir) / "triplets.jsonl").string());
  auto items = tokenize_triplets(bundle, records, triplets_dir);

  TrainState state;
  state.seed = bundle.cfg.seed;
  auto log = finetune_loop(bundle.base, *bundle.fusion, bundle.lora.get(), items,
                           bundle.cfg.trainer, state);
  write_log(log_path, log);
  save_bundle(bundle, &state, out_ckpt);
}

MetricsReport cmd_eval(ModelBundle& bundle, const std::string& triplets_dir) {
  auto records = read_manifest((fs::path(triplets_dir) / "triplets.jsonl").string());
  return evaluate(records, triplets_dir, bundle_generate_fn(bundle),
                  codec_embedding_fn(bundle.codec), bundle.cfg.metrics,
                  serialize_config(bundle.cfg));
}

}  // namespace stemedit
