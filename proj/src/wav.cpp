#include "stemedit/wav.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace stemedit {

namespace {

void put_u32(std::ostream& os, uint32_t v) {
  char b[4] = {char(v & 0xff), char((v >> 8) & 0xff), char((v >> 16) & 0xff), char((v >> 24) & 0xff)};
  os.write(b, 4);
}

void put_u16(std::ostream& os, uint16_t v) {
  char b[2] = {char(v & 0xff), char((v >> 8) & 0xff)};
  os.write(b, 2);
}

uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}

uint16_t get_u16(std::istream& is) {
  unsigned char b[2];
  is.read(reinterpret_cast<char*>(b), 2);
  return uint16_t(b[0]) | uint16_t(b[1]) << 8;
}

}  // namespace

Waveform read_wav(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("read_wav: cannot open " + path);

  char tag[4];
  in.read(tag, 4);
  if (!in || std::memcmp(tag, "RIFF", 4) != 0) throw InputError("read_wav: not a RIFF file: " + path);
  get_u32(in);  // riff size
  in.read(tag, 4);
  if (!in || std::memcmp(tag, "WAVE", 4) != 0) throw InputError("read_wav: not a WAVE file: " + path);

  uint16_t format = 0, channels = 0, bits = 0;
  uint32_t rate = 0;
  bool have_fmt = false;
  Waveform w;

  while (in.read(tag, 4)) {
    uint32_t size = get_u32(in);
    if (std::memcmp(tag, "fmt ", 4) == 0) {
      format = get_u16(in);
      channels = get_u16(in);
      rate = get_u32(in);
      get_u32(in);  // byte rate
      get_u16(in);  // block align
      bits = get_u16(in);
      if (size > 16) in.seekg(size - 16, std::ios::cur);
      have_fmt = true;
    } else if (std::memcmp(tag, "data", 4) == 0) {
      if (!have_fmt) throw InputError("read_wav: data chunk before fmt: " + path);
      if (channels != 1) throw InputError("read_wav: expected mono, got " + std::to_string(channels) + " channels");
      if (format == 1 && bits == 16) {
        size_t n = size / 2;
        w.samples.resize(n);
        std::vector<int16_t> raw(n);
        in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(size));
        for (size_t i = 0; i < n; ++i) w.samples[i] = static_cast<float>(raw[i]) / 32768.0f;
      } else if (format == 3 && bits == 32) {
        size_t n = size / 4;
        w.samples.resize(n);
        in.read(reinterpret_cast<char*>(w.samples.data()), static_cast<std::streamsize>(size));
      } else {
        throw InputError("read_wav: unsupported encoding (format " + std::to_string(format) +
                         ", " + std::to_string(bits) + " bit)");
      }
      if (size % 2) in.seekg(1, std::ios::cur);
    } else {
      in.seekg(size + (size % 2), std::ios::cur);
    }
  }
  if (w.samples.empty() && !have_fmt) throw InputError("read_wav: no fmt/data chunks in " + path);
  w.sample_rate = static_cast<int>(rate);
  for (float s : w.samples)
    if (!std::isfinite(s)) throw InputError("read_wav: non-finite sample in " + path);
  return w;
}

void write_wav(const std::string& path, const Waveform& w, WavEncoding enc, bool normalize) {
  if (w.sample_rate <= 0) throw InputError("write_wav: sample rate must be positive");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("write_wav: cannot open " + path);

  std::vector<float> samples = w.samples;
  if (normalize) {
    float peak = 0.0f;
    for (float s : samples) peak = std::max(peak, std::abs(s));
    if (peak > 0.0f) {
      float k = 0.99f / peak;
      for (float& s : samples) s *= k;
    }
  }

  uint32_t n = static_cast<uint32_t>(samples.size());
  uint16_t bits = enc == WavEncoding::Pcm16 ? 16 : 32;
  uint32_t data_bytes = n * (bits / 8);

  out.write("RIFF", 4);
  put_u32(out, 36 + data_bytes);
  out.write("WAVE", 4);
  out.write("fmt ", 4);
  put_u32(out, 16);
  put_u16(out, enc == WavEncoding::Pcm16 ? 1 : 3);
  put_u16(out, 1);
  put_u32(out, static_cast<uint32_t>(w.sample_rate));
  put_u32(out, static_cast<uint32_t>(w.sample_rate) * (bits / 8));
  put_u16(out, bits / 8);
  put_u16(out, bits);
  out.write("data", 4);
  put_u32(out, data_bytes);

  if (enc == WavEncoding::Pcm16) {
    std::vector<int16_t> raw(n);
    for (uint32_t i = 0; i < n; ++i) {
      float v = samples[i] * 32768.0f;
      v = std::max(-32768.0f, std::min(32767.0f, std::round(v)));
      raw[i] = static_cast<int16_t>(v);
    }
    out.write(reinterpret_cast<const char*>(raw.data()), data_bytes);
  } else {
    out.write(reinterpret_cast<const char*>(samples.data()), data_bytes);
  }
  if (!out) throw InputError("write_wav: write failed for " + path);
}

}  // namespace stemedit
