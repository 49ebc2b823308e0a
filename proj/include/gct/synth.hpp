#pragma once

// Deterministic synthetic sequential-event spectrograms with known labels.
//
// Each class owns a contiguous mel band. An event adds `amplitude` of linear
// energy to its band for `duration` frames on top of a noise floor; the
// stored value is ln(energy + 1e-10), matching log_mel's convention.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <limits>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gct/data.hpp"
#include "gct/error.hpp"
#include "gct/log_mel.hpp"
#include "gct/wav.hpp"

namespace gct {

struct EventTemplate {
  std::string name;
  std::size_t band_lo = 0;  // first mel bin
  std::size_t band_hi = 0;  // one past the last mel bin
  std::size_t duration = 40;  // frames
  double amplitude = 1.0;
  std::size_t onset_jitter = 0;  // +- frames
};

inline std::string synth_class_name(std::size_t i) {
  std::ostringstream os;
  os << "ev" << std::setw(2) << std::setfill('0') << i;
  return os.str();
}

// Equal-width disjoint bands with a one-bin guard on each side.
inline std::vector<EventTemplate> default_templates(std::size_t n_classes, std::size_t n_bins = kMelBins,
                                                    std::size_t duration = 40) {
  if (n_classes == 0 || n_classes > 30) throw ParameterError("synth: n_classes must lie in [1,30]");
  const std::size_t width = n_bins / n_classes;
  if (width < 3) throw ParameterError("synth: too many classes for the bin count");
  std::vector<EventTemplate> t;
  for (std::size_t i = 0; i < n_classes; ++i) {
    t.push_back({synth_class_name(i), i * width + 1, (i + 1) * width - 1, duration, 1.0, 0});
  }
  return t;
}

struct SynthClip {
  Spectrogram spec;
  std::vector<std::string> label;  // class names in onset order
  std::vector<std::size_t> onsets;
};

struct ClipOptions {
  std::size_t total_frames = 200;
  double noise_db = -30.0;  // noise energy relative to unit amplitude; -inf for none
  std::size_t min_gap = 8;  // minimum onset spacing in frames
  std::size_t bins = kMelBins;
};

inline const EventTemplate& find_template(const std::vector<EventTemplate>& templates, const std::string& name) {
  for (const auto& t : templates) {
    if (t.name == name) return t;
  }
  throw ParameterError("synth: no template for class '" + name + "'");
}

// `seq` lists the classes in onset order; onsets are drawn strictly increasing.
inline SynthClip generate_clip(const std::vector<std::string>& seq, const std::vector<EventTemplate>& templates,
                               const ClipOptions& opt, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t k = seq.size();
  std::size_t longest = 0;
  for (const auto& name : seq) longest = std::max(longest, find_template(templates, name).duration);
  if (opt.total_frames == 0) throw ParameterError("synth: total_frames must be positive");
  if (longest > opt.total_frames ||
      (k > 0 && (k - 1) * std::max<std::size_t>(opt.min_gap, 1) > opt.total_frames - longest)) {
    throw ParameterError("synth: " + std::to_string(k) + " events do not fit in " + std::to_string(opt.total_frames) +
                         " frames");
  }
  const std::size_t gap = std::max<std::size_t>(opt.min_gap, 1);
  SynthClip c;
  c.label = seq;
  if (k > 0) {
    const std::size_t free = opt.total_frames - longest - (k - 1) * gap;
    std::uniform_int_distribution<std::size_t> u(0, free);
    std::vector<std::size_t> base(k);
    for (auto& b : base) b = u(rng);
    std::sort(base.begin(), base.end());
    for (std::size_t i = 0; i < k; ++i) c.onsets.push_back(base[i] + i * gap);
    for (std::size_t i = 0; i < k; ++i) {
      const auto& t = find_template(templates, seq[i]);
      if (t.onset_jitter == 0) continue;
      std::uniform_int_distribution<long> j(-static_cast<long>(t.onset_jitter), static_cast<long>(t.onset_jitter));
      const long lo = i == 0 ? 0 : static_cast<long>(c.onsets[i - 1]) + 1;
      const long hi = std::min<long>(i + 1 < k ? static_cast<long>(c.onsets[i + 1]) - 1 : std::numeric_limits<long>::max(),
                                     static_cast<long>(opt.total_frames - t.duration));
      c.onsets[i] = static_cast<std::size_t>(std::clamp(static_cast<long>(c.onsets[i]) + j(rng), lo, std::max(lo, hi)));
    }
  }
  std::vector<double> energy(opt.total_frames * opt.bins, 0.0);
  if (std::isfinite(opt.noise_db)) {
    const double level = std::pow(10.0, opt.noise_db / 10.0);
    std::uniform_real_distribution<double> u(0.5, 1.5);
    for (auto& e : energy) e = level * u(rng);
  }
  for (std::size_t i = 0; i < k; ++i) {
    const auto& t = find_template(templates, seq[i]);
    if (t.band_hi > opt.bins || t.band_lo >= t.band_hi) throw ParameterError("synth: bad band for '" + t.name + "'");
    for (std::size_t f = c.onsets[i]; f < std::min(opt.total_frames, c.onsets[i] + t.duration); ++f)
      for (std::size_t b = t.band_lo; b < t.band_hi; ++b) energy[f * opt.bins + b] += t.amplitude;
  }
  c.spec = Spectrogram(opt.total_frames, opt.bins);
  for (std::size_t i = 0; i < energy.size(); ++i) c.spec.values[i] = std::log(energy[i] + kLogEnergyFloor);
  return c;
}

// Non-learned reference detector: a class is active where the mean linear
// energy over its band reaches half its amplitude; classes are ordered by
// their first active frame.
inline std::vector<std::string> detect_onset_order(const Spectrogram& s, const std::vector<EventTemplate>& templates) {
  std::vector<std::pair<std::size_t, std::string>> found;
  for (const auto& t : templates) {
    for (std::size_t f = 0; f < s.frames; ++f) {
      double mean = 0.0;
      for (std::size_t b = t.band_lo; b < t.band_hi; ++b) mean += std::exp(s.at(f, b)) - kLogEnergyFloor;
      mean /= static_cast<double>(t.band_hi - t.band_lo);
      if (mean >= 0.5 * t.amplitude) {
        found.emplace_back(f, t.name);
        break;
      }
    }
  }
  std::sort(found.begin(), found.end());
  std::vector<std::string> order;
  for (auto& [f, n] : found) order.push_back(n);
  return order;
}

struct DatasetOptions {
  std::size_t min_events = 1;
  ClipOptions clip;
  std::size_t duration = 40;
  bool wav = false;  // emit band-limited noise bursts as 16 kHz WAV instead of CSV
  int sample_rate = 16000;
};

struct SynthDataset {
  std::vector<EventTemplate> templates;
  std::vector<ManifestEntry> entries;
  std::vector<Spectrogram> spectrograms;
  std::vector<std::vector<std::size_t>> onsets;
};

// Class draw: classes below the per-class quota max(3, ceil(n_clips/10)) are
// picked first (fewest occurrences, random tie-break); the rest at random.
// Classes within a clip are distinct.
inline SynthDataset generate_examples(std::size_t n_clips, std::size_t n_classes, std::size_t max_events,
                                      std::uint64_t seed, const DatasetOptions& opt = {}) {
  if (n_classes == 0 || n_classes > 30) throw ParameterError("synth: n_classes must lie in [1,30]");
  if (max_events == 0 || max_events > n_classes || opt.min_events > max_events) {
    throw ParameterError("synth: need 1 <= min_events <= max_events <= n_classes");
  }
  const std::size_t quota = std::max<std::size_t>(3, (n_clips + 9) / 10);
  if (n_clips * max_events < quota * n_classes) {
    throw ParameterError("synth: " + std::to_string(n_clips) + " clips cannot give every class " +
                         std::to_string(quota) + " occurrences");
  }
  SynthDataset d;
  d.templates = default_templates(n_classes, opt.clip.bins, opt.duration);
  Rng rng(seed);
  std::vector<std::size_t> count(n_classes, 0);
  std::uniform_int_distribution<std::size_t> n_events(std::max<std::size_t>(opt.min_events, 1), max_events);
  for (std::size_t i = 0; i < n_clips; ++i) {
    // Clips left after this one, to keep the quota reachable.
    std::size_t deficit = 0;
    for (auto c : count) deficit += c < quota ? quota - c : 0;
    std::size_t k = n_events(rng);
    const std::size_t remaining = n_clips - i;
    while (k < max_events && deficit > (remaining - 1) * max_events + k) ++k;
    std::vector<std::size_t> chosen;
    std::vector<std::size_t> pool(n_classes);
    for (std::size_t c = 0; c < n_classes; ++c) pool[c] = c;
    std::shuffle(pool.begin(), pool.end(), rng);
    std::stable_sort(pool.begin(), pool.end(), [&](std::size_t a, std::size_t b) {
      const bool na = count[a] < quota, nb = count[b] < quota;
      if (na != nb) return na;
      return na && count[a] < count[b];
    });
    std::size_t under = 0;
    for (auto c : pool) under += count[c] < quota;
    std::vector<std::size_t> rest;
    for (std::size_t j = 0; j < pool.size(); ++j) {
      if (j < under && chosen.size() < k && deficit > 0 && (remaining - 1) * max_events < deficit + chosen.size() + 1) {
        chosen.push_back(pool[j]);
      } else {
        rest.push_back(pool[j]);
      }
    }
    std::shuffle(rest.begin(), rest.end(), rng);
    for (std::size_t j = 0; chosen.size() < k && j < rest.size(); ++j) chosen.push_back(rest[j]);
    std::shuffle(chosen.begin(), chosen.end(), rng);
    std::vector<std::string> seq;
    for (auto c : chosen) {
      seq.push_back(d.templates[c].name);
      ++count[c];
    }
    const SynthClip clip = generate_clip(seq, d.templates, opt.clip, rng());
    std::ostringstream path;
    path << "clips/clip_" << std::setw(4) << std::setfill('0') << i << (opt.wav ? ".wav" : ".csv");
    d.entries.push_back({path.str(), clip.label});
    d.spectrograms.push_back(clip.spec);
    d.onsets.push_back(clip.onsets);
  }
  for (std::size_t c = 0; c < n_classes; ++c) {
    if (count[c] < quota) throw ParameterError("synth: stratification failed for " + d.templates[c].name);
  }
  return d;
}

// Audio rendering of a synthetic clip: each event is a sum of random-phase
// sinusoids spread over its band's frequency range, gated over its frames.
inline Waveform render_waveform(const SynthDataset& d, std::size_t index, const DatasetOptions& opt, std::uint64_t seed) {
  const int sr = opt.sample_rate;
  const FrameGeometry g = frame_geometry(sr);
  const std::size_t n = (opt.clip.total_frames - 1) * g.hop + g.window;
  Waveform w;
  w.sample_rate = sr;
  w.samples.assign(n, 0.0);
  Rng rng(seed);
  const double mel_max = hz_to_mel(sr / 2.0);
  auto bin_hz = [&](double b) { return mel_to_hz(mel_max * (b + 1.0) / static_cast<double>(opt.clip.bins + 1)); };
  if (std::isfinite(opt.clip.noise_db)) {
    std::normal_distribution<double> noise(0.0, 0.05 * std::pow(10.0, opt.clip.noise_db / 20.0));
    for (auto& s : w.samples) s += noise(rng);
  }
  const auto& entry = d.entries.at(index);
  for (std::size_t e = 0; e < entry.events.size(); ++e) {
    const auto& t = find_template(d.templates, entry.events[e]);
    const double f_lo = bin_hz(static_cast<double>(t.band_lo)), f_hi = bin_hz(static_cast<double>(t.band_hi - 1));
    std::uniform_real_distribution<double> freq(f_lo, f_hi), phase(0.0, 2.0 * std::numbers::pi);
    constexpr int kPartials = 24;
    std::vector<double> fs(kPartials), ph(kPartials);
    for (int p = 0; p < kPartials; ++p) {
      fs[p] = freq(rng);
      ph[p] = phase(rng);
    }
    const std::size_t start = d.onsets[index][e] * g.hop;
    const std::size_t stop = std::min(n, (d.onsets[index][e] + t.duration) * g.hop + g.window);
    for (std::size_t i = start; i < stop; ++i) {
      double v = 0.0;
      for (int p = 0; p < kPartials; ++p) v += std::sin(2.0 * std::numbers::pi * fs[p] * i / sr + ph[p]);
      w.samples[i] += 0.2 * t.amplitude * v / kPartials;
    }
  }
  for (auto& s : w.samples) s = std::clamp(s, -1.0, 32767.0 / 32768.0);
  return w;
}

// Writes clips/ + manifest.tsv under out_dir; returns the manifest path.
inline std::filesystem::path generate_dataset(std::size_t n_clips, std::size_t n_classes, std::size_t max_events,
                                              std::uint64_t seed, const std::filesystem::path& out_dir,
                                              const DatasetOptions& opt = {}) {
  const SynthDataset d = generate_examples(n_clips, n_classes, max_events, seed, opt);
  std::filesystem::create_directories(out_dir / "clips");
  for (std::size_t i = 0; i < d.entries.size(); ++i) {
    const auto path = out_dir / d.entries[i].audio_path;
    if (opt.wav) {
      write_wav(path.string(), render_waveform(d, i, opt, seed * 1000003ull + i));
    } else {
      write_spectrogram_csv(path.string(), d.spectrograms[i]);
    }
  }
  const auto manifest = out_dir / "manifest.tsv";
  write_manifest(manifest, d.entries);
  return manifest;
}

// In-memory dataset (no files) with the vocabulary built from all events.
inline Dataset to_dataset(const SynthDataset& d, const Vocab& vocab) {
  Dataset out;
  for (std::size_t i = 0; i < d.entries.size(); ++i) {
    out.push_back({d.entries[i].audio_path, d.spectrograms[i], encode_events(vocab, d.entries[i].events)});
  }
  return out;
}

inline Vocab synth_vocab(const SynthDataset& d) {
  std::set<std::string> names;
  for (const auto& t : d.templates) names.insert(t.name);
  return Vocab(names);
}

}  // namespace gct
