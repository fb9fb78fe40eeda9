#pragma once

#include <optional>
#include <string>
#include <vector>

#include "stemedit/config.hpp"
#include "stemedit/wav.hpp"

namespace stemedit {

struct Stem {
  std::string instrument_label;
  Waveform waveform;
};

struct Track {
  int64_t track_id = 0;
  std::vector<Stem> stems;
  double duration = 0.0;
};

enum class EditTask { Add, Remove, Extract };

const char* task_name(EditTask t);
EditTask task_from_name(const std::string& name);

/// (instruction, condition, target) unit plus the provenance needed to
/// verify the mixing algebra.
struct EditTriplet {
  std::string instruction;
  Waveform condition;
  Waveform target;
  EditTask task = EditTask::Add;
  std::string target_stem_label;
  double offset_seconds = 0.0;
  int n_other_stems = 0;
  Waveform target_stem_clip;  // the clip the algebra is checked against
};

/// One line of the triplet manifest.
struct ManifestRecord {
  std::string id;
  std::string task;
  std::string instruction;
  std::string condition_path;
  std::string target_path;
  std::string target_stem;
  int n_other_stems = 0;
  double offset_seconds = 0.0;
  uint64_t seed = 0;
};

/// Deterministic oscillator stems keyed by instrument label. Each stem is a
/// seeded pattern of notes with intentional rests; samples are quantized to
/// the 1/32768 grid so sums and differences of up to a few hundred stems are
/// exact in float32.
Track gen_synthetic_track(uint64_t seed, int n_stems, double duration, const DatagenConfig& cfg,
                          int sample_rate);

/// Sample-wise float sum. No clipping, no normalization.
Waveform mix(const std::vector<Waveform>& stems);

/// Fraction of non-overlapping frames whose RMS is below the threshold.
/// The trailing partial frame counts as a frame.
double silence_fraction(const Waveform& w, double frame_ms, double rms_threshold);

/// Draws (task, target stem, other stems, offset) and mixes the triplet.
/// Returns nullopt when no offset with an acceptably non-silent target stem
/// is found within the retry cap.
std::optional<EditTriplet> sample_triplet(const Track& track, Rng& rng, const DatagenConfig& cfg);

/// Writes `count` triplets drawn from `tracks` under out_dir: float32 WAV
/// pairs in audio/ plus a line-delimited manifest. Pure function of
/// (tracks, seed, cfg).
std::vector<ManifestRecord> build_manifest(const std::vector<Track>& tracks, int count,
                                           uint64_t seed, const std::string& out_dir,
                                           const DatagenConfig& cfg);

std::vector<ManifestRecord> read_manifest(const std::string& path);

/// Writes per-stem WAVs and a tracks.jsonl listing under out_dir.
void write_tracks(const std::vector<Track>& tracks, const std::string& out_dir);

std::vector<Track> read_tracks(const std::string& dir);

/// Sorted instrument labels joined with " and "; the pretraining description.
std::string track_description(const Track& track);

std::vector<std::string> split_csv(const std::string& csv);

}  // namespace stemedit
