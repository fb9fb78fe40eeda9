#pragma once

#include <string>
#include <vector>

#include "stemedit/common.hpp"

namespace stemedit {

/// Single-channel audio buffer. Samples are nominally in [-1, 1] but mixes
/// may exceed that range; nothing in the pipeline clips.
struct Waveform {
  std::vector<float> samples;
  int sample_rate = 0;

  double duration() const {
    return sample_rate > 0 ? static_cast<double>(samples.size()) / sample_rate : 0.0;
  }
};

enum class WavEncoding { Pcm16, Float32 };

/// Reads a mono 16-bit PCM or 32-bit float WAV file.
Waveform read_wav(const std::string& path);

/// Writes a mono WAV file. Float32 preserves sample values exactly;
/// if normalize is set the peak is scaled to 0.99 before encoding.
void write_wav(const std::string& path, const Waveform& w,
               WavEncoding enc = WavEncoding::Float32, bool normalize = false);

inline void expect_sample_rate(const Waveform& w, int rate, const std::string& what) {
  if (w.sample_rate != rate)
    throw InputError(what + ": sample rate " + std::to_string(w.sample_rate) +
                     " does not match configured " + std::to_string(rate));
}

}  // namespace stemedit
