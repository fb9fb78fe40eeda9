#include "stemedit/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace stemedit {

const char* task_name(EditTask t) {
  switch (t) {
    case EditTask::Add: return "add";
    case EditTask::Remove: return "remove";
    case EditTask::Extract: return "extract";
  }
  return "?";
}

EditTask task_from_name(const std::string& name) {
  if (name == "add") return EditTask::Add;
  if (name == "remove") return EditTask::Remove;
  if (name == "extract") return EditTask::Extract;
  throw InputError("unknown task name: " + name);
}

std::vector<std::string> split_csv(const std::string& csv) {
  std::vector<std::string> out;
  std::istringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

namespace {

// Snap to the 1/32768 grid; sums of a few hundred on-grid stems stay exactly
// representable in float32, which keeps the triplet mixing algebra
// sample-exact.
float quantize_sample(double v) {
  double q = std::round(v * 32768.0);
  q = std::max(-32767.0, std::min(32767.0, q));
  return static_cast<float>(q / 32768.0);
}

struct NotePlan {
  double seg_seconds;
  std::vector<double> pitches;  // all partials kept below 750 Hz
  double rest_prob;
  double amplitude;
  double decay_tau;  // 0 = sustain with short edge fades
  double harmonic2;
  double harmonic3;
};

NotePlan plan_for(const std::string& label) {
  if (label == "drums") return {0.25, {90.0}, 0.25, 0.7, 0.08, 0.0, 0.0};
  if (label == "bass") return {0.5, {55.0, 61.7, 73.4, 82.4}, 0.3, 0.5, 0.0, 0.0, 0.0};
  if (label == "piano") return {0.25, {196.0, 220.0, 246.9, 293.7}, 0.3, 0.5, 0.12, 0.35, 0.0};
  if (label == "guitar") return {0.25, {110.0, 130.8, 146.8, 164.8}, 0.3, 0.5, 0.2, 0.3, 0.15};
  return {0.25, {330.0, 349.2}, 0.3, 0.4, 0.15, 0.0, 0.0};
}

Waveform synth_stem(const std::string& label, double duration, int sample_rate, Rng& rng) {
  NotePlan plan = plan_for(label);
  const double pi2 = 2.0 * 3.14159265358979323846;
  size_t total = static_cast<size_t>(std::llround(duration * sample_rate));
  Waveform w;
  w.sample_rate = sample_rate;
  w.samples.assign(total, 0.0f);

  size_t seg_len = static_cast<size_t>(std::llround(plan.seg_seconds * sample_rate));
  for (size_t seg_start = 0; seg_start < total; seg_start += seg_len) {
    bool rest = rng.uniform() < plan.rest_prob;
    double pitch = plan.pitches[static_cast<size_t>(
        rng.uniform_int(0, static_cast<int64_t>(plan.pitches.size()) - 1))];
    if (rest) continue;
    size_t n = std::min(seg_len, total - seg_start);
    for (size_t i = 0; i < n; ++i) {
      double ts = static_cast<double>(i) / sample_rate;
      double env;
      if (plan.decay_tau > 0.0) {
        env = std::exp(-ts / plan.decay_tau);
      } else {
        // sustain with 5 ms fades at both segment edges
        double fade = 0.005;
        double tail = static_cast<double>(n - 1 - i) / sample_rate;
        env = std::min(1.0, std::min(ts / fade, tail / fade));
        env = std::max(env, 0.0);
      }
      double v = std::sin(pi2 * pitch * ts);
      if (plan.harmonic2 > 0.0) v += plan.harmonic2 * std::sin(pi2 * 2.0 * pitch * ts);
      if (plan.harmonic3 > 0.0) v += plan.harmonic3 * std::sin(pi2 * 3.0 * pitch * ts);
      w.samples[seg_start + i] = quantize_sample(plan.amplitude * env * v);
    }
  }
  return w;
}

}  // namespace

Track gen_synthetic_track(uint64_t seed, int n_stems, double duration, const DatagenConfig& cfg,
                          int sample_rate) {
  if (n_stems < 2) throw InputError("gen_synthetic_track: need at least 2 stems");
  std::vector<std::string> labels = split_csv(cfg.instruments);
  if (static_cast<size_t>(n_stems) > labels.size())
    throw ConfigError("gen_synthetic_track: more stems than configured instruments");
  Track track;
  track.track_id = static_cast<int64_t>(seed);
  track.duration = duration;
  Rng root(mix_seed(seed, 0x7acc));
  Rng pick = root.fork(0xfefe);
  pick.shuffle(labels);
  for (int i = 0; i < n_stems; ++i) {
    Rng stem_rng = root.fork(static_cast<uint64_t>(i));
    Stem s;
    s.instrument_label = labels[static_cast<size_t>(i)];
    s.waveform = synth_stem(s.instrument_label, duration, sample_rate, stem_rng);
    track.stems.push_back(std::move(s));
  }
  return track;
}

Waveform mix(const std::vector<Waveform>& stems) {
  if (stems.empty()) throw InputError("mix: empty stem list");
  Waveform out = stems[0];
  for (size_t i = 1; i < stems.size(); ++i) {
    if (stems[i].samples.size() != out.samples.size())
      throw InputError("mix: stem lengths differ");
    if (stems[i].sample_rate != out.sample_rate) throw InputError("mix: sample rates differ");
    for (size_t j = 0; j < out.samples.size(); ++j) out.samples[j] += stems[i].samples[j];
  }
  return out;
}

double silence_fraction(const Waveform& w, double frame_ms, double rms_threshold) {
  if (w.samples.empty()) throw InputError("silence_fraction: empty waveform");
  size_t frame = static_cast<size_t>(std::llround(frame_ms * 1e-3 * w.sample_rate));
  frame = std::max<size_t>(frame, 1);
  size_t n_frames = 0, silent = 0;
  for (size_t at = 0; at < w.samples.size(); at += frame) {
    size_t n = std::min(frame, w.samples.size() - at);
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) {
      double s = w.samples[at + i];
      acc += s * s;
    }
    double rms = std::sqrt(acc / static_cast<double>(n));
    ++n_frames;
    if (rms < rms_threshold) ++silent;
  }
  return static_cast<double>(silent) / static_cast<double>(n_frames);
}

namespace {

Waveform clip_of(const Waveform& w, size_t offset, size_t len) {
  Waveform out;
  out.sample_rate = w.sample_rate;
  out.samples.assign(w.samples.begin() + static_cast<std::ptrdiff_t>(offset),
                     w.samples.begin() + static_cast<std::ptrdiff_t>(offset + len));
  return out;
}

Waveform zeros_like(int sample_rate, size_t len) {
  Waveform out;
  out.sample_rate = sample_rate;
  out.samples.assign(len, 0.0f);
  return out;
}

}  // namespace

std::optional<EditTriplet> sample_triplet(const Track& track, Rng& rng, const DatagenConfig& cfg) {
  if (track.stems.size() < 2) throw InputError("sample_triplet: track needs at least 2 stems");
  const int sample_rate = track.stems[0].waveform.sample_rate;
  const size_t clip_len = static_cast<size_t>(std::llround(cfg.clip_duration * sample_rate));
  const size_t total = track.stems[0].waveform.samples.size();
  if (clip_len > total) throw InputError("sample_triplet: clip longer than the track");

  EditTask task = static_cast<EditTask>(rng.uniform_int(0, 2));
  size_t target_idx =
      static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(track.stems.size()) - 1));

  // n other stems: add may take zero others, remove/extract need at least one
  std::vector<size_t> others_pool;
  for (size_t i = 0; i < track.stems.size(); ++i)
    if (i != target_idx) others_pool.push_back(i);
  int64_t n_lo = (task == EditTask::Add) ? 0 : 1;
  int64_t n = rng.uniform_int(n_lo, static_cast<int64_t>(others_pool.size()));
  rng.shuffle(others_pool);
  others_pool.resize(static_cast<size_t>(n));

  // re-draw the offset while the target stem clip is mostly silent
  size_t offset = 0;
  bool found = false;
  for (int attempt = 0; attempt < cfg.offset_retries; ++attempt) {
    offset = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(total - clip_len)));
    Waveform stem_clip = clip_of(track.stems[target_idx].waveform, offset, clip_len);
    if (silence_fraction(stem_clip, cfg.silence_frame_ms, cfg.silence_rms_threshold) <=
        cfg.silence_max_fraction) {
      found = true;
      break;
    }
  }
  if (!found) return std::nullopt;

  Waveform stem_clip = clip_of(track.stems[target_idx].waveform, offset, clip_len);
  std::vector<Waveform> other_clips;
  for (size_t idx : others_pool) other_clips.push_back(clip_of(track.stems[idx].waveform, offset, clip_len));
  Waveform others_mix = other_clips.empty() ? zeros_like(sample_rate, clip_len) : mix(other_clips);

  EditTriplet t;
  t.task = task;
  t.target_stem_label = track.stems[target_idx].instrument_label;
  t.offset_seconds = static_cast<double>(offset) / sample_rate;
  t.n_other_stems = static_cast<int>(n);
  t.target_stem_clip = stem_clip;
  switch (task) {
    case EditTask::Add:
      t.instruction = "Add " + t.target_stem_label;
      t.condition = others_mix;
      t.target = mix({others_mix, stem_clip});
      break;
    case EditTask::Remove:
      t.instruction = "Remove " + t.target_stem_label;
      t.condition = mix({others_mix, stem_clip});
      t.target = others_mix;
      break;
    case EditTask::Extract:
      t.instruction = "Extract " + t.target_stem_label;
      t.condition = mix({others_mix, stem_clip});
      t.target = stem_clip;
      break;
  }
  return t;
}

std::vector<ManifestRecord> build_manifest(const std::vector<Track>& tracks, int count,
                                           uint64_t seed, const std::string& out_dir,
                                           const DatagenConfig& cfg) {
  if (count < 1) throw InputError("build_manifest: count must be >= 1");
  if (tracks.empty()) throw InputError("build_manifest: no tracks");
  fs::create_directories(fs::path(out_dir) / "audio");

  std::vector<ManifestRecord> records;
  std::ofstream manifest(fs::path(out_dir) / "triplets.jsonl");
  if (!manifest) throw InputError("build_manifest: cannot write manifest in " + out_dir);

  for (int i = 0; i < count; ++i) {
    uint64_t record_seed = mix_seed(seed, static_cast<uint64_t>(i));
    Rng rng(record_seed);
    std::optional<EditTriplet> triplet;
    // a skipped track is signaled by a redraw, not a failure
    for (int attempt = 0; attempt < 64 && !triplet; ++attempt) {
      const Track& track = tracks[static_cast<size_t>(
          rng.uniform_int(0, static_cast<int64_t>(tracks.size()) - 1))];
      triplet = sample_triplet(track, rng, cfg);
    }
    if (!triplet)
      throw InputError("build_manifest: no usable triplet after retries (corpus too silent?)");

    char idbuf[16];
    std::snprintf(idbuf, sizeof(idbuf), "%06d", i);
    ManifestRecord rec;
    rec.id = idbuf;
    rec.task = task_name(triplet->task);
    rec.instruction = triplet->instruction;
    rec.condition_path = "audio/" + rec.id + "_cond.wav";
    rec.target_path = "audio/" + rec.id + "_target.wav";
    rec.target_stem = triplet->target_stem_label;
    rec.n_other_stems = triplet->n_other_stems;
    rec.offset_seconds = triplet->offset_seconds;
    rec.seed = record_seed;

    write_wav((fs::path(out_dir) / rec.condition_path).string(), triplet->condition,
              WavEncoding::Float32);
    write_wav((fs::path(out_dir) / rec.target_path).string(), triplet->target,
              WavEncoding::Float32);

    json j{{"id", rec.id},
           {"task", rec.task},
           {"instruction", rec.instruction},
           {"condition_path", rec.condition_path},
           {"target_path", rec.target_path},
           {"target_stem", rec.target_stem},
           {"n_other_stems", rec.n_other_stems},
           {"offset_seconds", rec.offset_seconds},
           {"seed", rec.seed}};
    manifest << j.dump() << "\n";
    records.push_back(std::move(rec));
  }
  return records;
}

std::vector<ManifestRecord> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("read_manifest: cannot open " + path);
  std::vector<ManifestRecord> records;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    ManifestRecord rec;
    rec.id = j.at("id").get<std::string>();
    rec.task = j.at("task").get<std::string>();
    rec.instruction = j.at("instruction").get<std::string>();
    rec.condition_path = j.at("condition_path").get<std::string>();
    rec.target_path = j.at("target_path").get<std::string>();
    rec.target_stem = j.at("target_stem").get<std::string>();
    rec.n_other_stems = j.at("n_other_stems").get<int>();
    rec.offset_seconds = j.at("offset_seconds").get<double>();
    rec.seed = j.at("seed").get<uint64_t>();
    records.push_back(std::move(rec));
  }
  return records;
}

void write_tracks(const std::vector<Track>& tracks, const std::string& out_dir) {
  fs::create_directories(fs::path(out_dir) / "stems");
  std::ofstream listing(fs::path(out_dir) / "tracks.jsonl");
  if (!listing) throw InputError("write_tracks: cannot write listing in " + out_dir);
  for (const Track& track : tracks) {
    json stems = json::array();
    for (const Stem& s : track.stems) {
      std::string rel = "stems/track" + std::to_string(track.track_id) + "_" +
                        s.instrument_label + ".wav";
      write_wav((fs::path(out_dir) / rel).string(), s.waveform, WavEncoding::Pcm16);
      stems.push_back(json{{"label", s.instrument_label}, {"path", rel}});
    }
    listing << json{{"track_id", track.track_id}, {"duration", track.duration}, {"stems", stems}}
                   .dump()
            << "\n";
  }
}

std::vector<Track> read_tracks(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "tracks.jsonl");
  if (!in) throw InputError("read_tracks: cannot open tracks.jsonl in " + dir);
  std::vector<Track> tracks;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    Track track;
    track.track_id = j.at("track_id").get<int64_t>();
    track.duration = j.at("duration").get<double>();
    for (const json& sj : j.at("stems")) {
      Stem s;
      s.instrument_label = sj.at("label").get<std::string>();
      s.waveform = read_wav((fs::path(dir) / sj.at("path").get<std::string>()).string());
      track.stems.push_back(std::move(s));
    }
    tracks.push_back(std::move(track));
  }
  return tracks;
}

std::string track_description(const Track& track) {
  std::vector<std::string> labels;
  for (const Stem& s : track.stems) labels.push_back(s.instrument_label);
  std::sort(labels.begin(), labels.end());
  std::string out;
  for (size_t i = 0; i < labels.size(); ++i) {
    if (i) out += " and ";
    out += labels[i];
  }
  return out;
}

}  // namespace stemedit
