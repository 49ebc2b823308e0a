#pragma once

// Log mel-band energies: Hamming-windowed STFT, HTK mel scale, 128 bands.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "gct/error.hpp"
#include "gct/wav.hpp"

namespace gct {

inline constexpr std::size_t kMelBins = 128;
inline constexpr double kLogEnergyFloor = 1e-10;

// Row-major frames x bins matrix of log energies.
struct Spectrogram {
  std::size_t frames = 0;
  std::size_t bins = kMelBins;
  std::vector<double> values;

  Spectrogram() = default;
  Spectrogram(std::size_t n_frames, std::size_t n_bins, double fill = 0.0)
      : frames(n_frames), bins(n_bins), values(n_frames * n_bins, fill) {}

  double& at(std::size_t t, std::size_t b) { return values[t * bins + b]; }
  double at(std::size_t t, std::size_t b) const { return values[t * bins + b]; }
  bool operator==(const Spectrogram&) const = default;
};

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

struct MelOptions {
  double window_ms = 25.0;
  double hop_ms = 10.0;
  std::size_t n_mels = kMelBins;
};

struct FrameGeometry {
  std::size_t window = 0;  // samples
  std::size_t hop = 0;
  std::size_t fft_size = 0;
};

inline FrameGeometry frame_geometry(int sample_rate, const MelOptions& opt = {}) {
  FrameGeometry g;
  g.window = static_cast<std::size_t>(std::lround(sample_rate * opt.window_ms / 1000.0));
  g.hop = static_cast<std::size_t>(std::lround(sample_rate * opt.hop_ms / 1000.0));
  g.fft_size = 1;
  while (g.fft_size < g.window) g.fft_size <<= 1;
  return g;
}

inline std::size_t num_frames(std::size_t n_samples, const FrameGeometry& g) {
  if (n_samples < g.window) return 0;
  return (n_samples - g.window) / g.hop + 1;
}

// Triangular filters, linear in Hz between mel-equispaced corners spanning
// 0 Hz..Nyquist. The weight of FFT bin k is the mean of the triangle over the
// bin's frequency cell [f_k - df/2, f_k + df/2], so every filter touches at
// least one bin even when it is narrower than the bin spacing.
class MelFilterbank {
 public:
  MelFilterbank(int sample_rate, std::size_t fft_size, std::size_t n_mels = kMelBins)
      : n_mels_(n_mels), n_fft_bins_(fft_size / 2 + 1) {
    if (sample_rate <= 0 || fft_size < 2 || n_mels == 0) throw ParameterError("mel: bad filterbank geometry");
    const double nyquist = sample_rate / 2.0;
    const double df = static_cast<double>(sample_rate) / static_cast<double>(fft_size);
    const double mel_max = hz_to_mel(nyquist);
    corners_.resize(n_mels + 2);
    for (std::size_t i = 0; i < corners_.size(); ++i) {
      corners_[i] = mel_to_hz(mel_max * static_cast<double>(i) / static_cast<double>(n_mels + 1));
    }
    weights_.assign(n_mels * n_fft_bins_, 0.0);
    for (std::size_t m = 0; m < n_mels; ++m) {
      const double lo = corners_[m], c = corners_[m + 1], hi = corners_[m + 2];
      for (std::size_t k = 0; k < n_fft_bins_; ++k) {
        const double a = k * df - df / 2.0, b = k * df + df / 2.0;
        const double w = (segment_integral(a, b, lo, c, true) + segment_integral(a, b, c, hi, false)) / df;
        weights_[m * n_fft_bins_ + k] = w;
      }
    }
  }

  std::size_t n_mels() const { return n_mels_; }
  std::size_t n_fft_bins() const { return n_fft_bins_; }
  double center_hz(std::size_t m) const { return corners_.at(m + 1); }
  double weight(std::size_t m, std::size_t k) const { return weights_[m * n_fft_bins_ + k]; }

  // power: n_fft_bins values; out: n_mels energies
  void apply(const std::vector<double>& power, double* out) const {
    for (std::size_t m = 0; m < n_mels_; ++m) {
      double e = 0.0;
      const double* w = weights_.data() + m * n_fft_bins_;
      for (std::size_t k = 0; k < n_fft_bins_; ++k) e += w[k] * power[k];
      out[m] = e;
    }
  }

 private:
  // Integral over [a,b] of the linear ramp on [x0,x1] (0->1 if rising, 1->0 otherwise).
  static double segment_integral(double a, double b, double x0, double x1, bool rising) {
    const double s = std::max(a, x0), e = std::min(b, x1);
    if (e <= s || x1 <= x0) return 0.0;
    auto f = [&](double x) {
      const double t = (x - x0) / (x1 - x0);
      return rising ? t : 1.0 - t;
    };
    return (e - s) * 0.5 * (f(s) + f(e));
  }

  std::size_t n_mels_;
  std::size_t n_fft_bins_;
  std::vector<double> corners_;
  std::vector<double> weights_;
};

// In-place iterative radix-2 FFT; size must be a power of two.
inline void fft_inplace(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * std::numbers::pi / static_cast<double>(len);
    const std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t j = 0; j < len / 2; ++j) {
        const auto u = a[i + j];
        const auto v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
        w *= wl;
      }
    }
  }
}

inline Spectrogram log_mel(const Waveform& w, const MelOptions& opt = {}) {
  if (w.sample_rate < 8000) {
    throw ParameterError("log_mel: sample rate " + std::to_string(w.sample_rate) + " below 8 kHz");
  }
  const FrameGeometry g = frame_geometry(w.sample_rate, opt);
  const std::size_t frames = num_frames(w.samples.size(), g);
  if (frames == 0) {
    throw ParameterError("log_mel: clip of " + std::to_string(w.samples.size()) +
                         " samples is shorter than one window (" + std::to_string(g.window) + ")");
  }
  const MelFilterbank bank(w.sample_rate, g.fft_size, opt.n_mels);
  std::vector<double> window(g.window);
  for (std::size_t n = 0; n < g.window; ++n) {
    window[n] = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * n / static_cast<double>(g.window - 1));
  }
  Spectrogram s(frames, opt.n_mels);
  std::vector<std::complex<double>> buf(g.fft_size);
  std::vector<double> power(bank.n_fft_bins());
  for (std::size_t t = 0; t < frames; ++t) {
    std::fill(buf.begin(), buf.end(), std::complex<double>(0.0, 0.0));
    const double* x = w.samples.data() + t * g.hop;
    for (std::size_t n = 0; n < g.window; ++n) buf[n] = x[n] * window[n];
    fft_inplace(buf);
    for (std::size_t k = 0; k < power.size(); ++k) power[k] = std::norm(buf[k]);
    double* row = s.values.data() + t * s.bins;
    bank.apply(power, row);
    for (std::size_t m = 0; m < s.bins; ++m) row[m] = std::log(row[m] + kLogEnergyFloor);
  }
  return s;
}

// Frame order reversed; bins untouched.
inline Spectrogram reverse_time(const Spectrogram& s) {
  Spectrogram r(s.frames, s.bins);
  for (std::size_t t = 0; t < s.frames; ++t) {
    std::copy_n(s.values.data() + (s.frames - 1 - t) * s.bins, s.bins, r.values.data() + t * s.bins);
  }
  return r;
}

// One frame per line, comma separated. Values use max_digits10 so reading
// back is exact.
inline void write_spectrogram_csv(const std::string& path, const Spectrogram& s) {
  std::ofstream out(path);
  if (!out) throw FormatError("csv: cannot write " + path);
  out.precision(17);
  for (std::size_t t = 0; t < s.frames; ++t) {
    for (std::size_t b = 0; b < s.bins; ++b) out << (b ? "," : "") << s.at(t, b);
    out << '\n';
  }
}

inline Spectrogram read_spectrogram_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("csv: cannot open " + path);
  Spectrogram s;
  s.bins = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        row.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw FormatError("csv: bad value '" + cell + "' in " + path);
      }
    }
    if (s.bins == 0) s.bins = row.size();
    if (row.size() != s.bins) throw FormatError("csv: ragged row in " + path);
    s.values.insert(s.values.end(), row.begin(), row.end());
    ++s.frames;
  }
  if (s.frames == 0) throw FormatError("csv: empty spectrogram " + path);
  return s;
}

}  // namespace gct
