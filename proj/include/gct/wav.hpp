#pragma once

// RIFF/WAVE PCM16 reader and writer.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "gct/error.hpp"

namespace gct {

struct Waveform {
  std::vector<double> samples;  // in [-1, 1]
  int sample_rate = 0;

  double duration_seconds() const {
    return sample_rate > 0 ? static_cast<double>(samples.size()) / sample_rate : 0.0;
  }
};

namespace detail {

inline std::uint32_t read_le32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::uint16_t read_le16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

inline void put_le32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_le16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

}  // namespace detail

// Mono or stereo (averaged) 16-bit PCM; samples scaled by 1/32768.
inline Waveform parse_wav(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0) {
    throw FormatError("wav: missing RIFF chunk");
  }
  if (std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) throw FormatError("wav: RIFF form is not WAVE");

  bool have_fmt = false;
  std::uint16_t channels = 0, bits = 0;
  std::uint32_t rate = 0;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::string id(reinterpret_cast<const char*>(bytes.data() + pos), 4);
    const std::uint32_t len = detail::read_le32(bytes.data() + pos + 4);
    const std::size_t body = pos + 8;
    if (body + len > bytes.size()) throw FormatError("wav: chunk '" + id + "' truncated");
    if (id == "fmt ") {
      if (len < 16) throw FormatError("wav: chunk 'fmt ' too short");
      std::uint16_t format = detail::read_le16(bytes.data() + body);
      channels = detail::read_le16(bytes.data() + body + 2);
      rate = detail::read_le32(bytes.data() + body + 4);
      bits = detail::read_le16(bytes.data() + body + 14);
      if (format == 0xFFFE && len >= 26) format = detail::read_le16(bytes.data() + body + 24);
      if (format != 1) {
        throw FormatError("wav: chunk 'fmt ' has unsupported encoding " + std::to_string(format) +
                          " (only PCM)");
      }
      if (bits != 16) {
        throw FormatError("wav: chunk 'fmt ' has " + std::to_string(bits) + "-bit samples (only 16)");
      }
      if (channels != 1 && channels != 2) {
        throw FormatError("wav: chunk 'fmt ' has " + std::to_string(channels) + " channels");
      }
      if (rate == 0) throw FormatError("wav: chunk 'fmt ' has zero sample rate");
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw FormatError("wav: chunk 'data' precedes 'fmt '");
      const std::size_t frame_bytes = 2u * channels;
      const std::size_t frames = len / frame_bytes;
      Waveform w;
      w.sample_rate = static_cast<int>(rate);
      w.samples.resize(frames);
      for (std::size_t i = 0; i < frames; ++i) {
        double acc = 0.0;
        for (std::size_t c = 0; c < channels; ++c) {
          const auto s = static_cast<std::int16_t>(detail::read_le16(bytes.data() + body + i * frame_bytes + 2 * c));
          acc += s / 32768.0;
        }
        w.samples[i] = acc / channels;
      }
      return w;
    }
    pos = body + len + (len & 1u);
  }
  throw FormatError(have_fmt ? "wav: missing chunk 'data'" : "wav: missing chunk 'fmt '");
}

inline Waveform load_wav(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("wav: cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_wav(bytes);
}

// Mono PCM16; samples are clipped to [-1, 1) and rounded to the nearest step.
inline std::string encode_wav(const Waveform& w) {
  if (w.sample_rate <= 0) throw ParameterError("wav: sample rate must be positive");
  std::string out;
  const auto data_len = static_cast<std::uint32_t>(w.samples.size() * 2);
  out.append("RIFF");
  detail::put_le32(out, 36 + data_len);
  out.append("WAVEfmt ");
  detail::put_le32(out, 16);
  detail::put_le16(out, 1);
  detail::put_le16(out, 1);
  detail::put_le32(out, static_cast<std::uint32_t>(w.sample_rate));
  detail::put_le32(out, static_cast<std::uint32_t>(w.sample_rate) * 2);
  detail::put_le16(out, 2);
  detail::put_le16(out, 16);
  out.append("data");
  detail::put_le32(out, data_len);
  for (double s : w.samples) {
    const double q = std::clamp(std::round(s * 32768.0), -32768.0, 32767.0);
    detail::put_le16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
  }
  return out;
}

inline void write_wav(const std::string& path, const Waveform& w) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("wav: cannot write " + path);
  const std::string bytes = encode_wav(w);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace gct
