#pragma once

// Vocabulary, sequential labels, manifests and batching.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gct/error.hpp"
#include "gct/log_mel.hpp"
#include "gct/ops.hpp"
#include "gct/wav.hpp"

namespace gct {

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kStart = 1;         // <S>
inline constexpr TokenId kReverseStart = 2;  // <S'>
inline constexpr TokenId kEnd = 3;           // <E>
inline constexpr TokenId kFirstEvent = 4;

// Control tokens at ids 0-3, then events in lexicographic order.
class Vocab {
 public:
  Vocab() = default;

  explicit Vocab(const std::set<std::string>& events) {
    for (const auto& e : events) {
      check_event_name(e);
      events_.push_back(e);
    }
  }

  template <class It>
  static Vocab from_events(It first, It last) {
    return Vocab(std::set<std::string>(first, last));
  }

  std::size_t size() const { return events_.size() + kFirstEvent; }
  std::size_t num_events() const { return events_.size(); }
  const std::vector<std::string>& events() const { return events_; }

  static bool is_event(TokenId id) { return id >= kFirstEvent; }

  TokenId id(const std::string& name) const {
    auto it = std::lower_bound(events_.begin(), events_.end(), name);
    if (it == events_.end() || *it != name) throw ParameterError("vocab: unknown event '" + name + "'");
    return static_cast<TokenId>(it - events_.begin()) + kFirstEvent;
  }

  std::string name(TokenId id) const {
    switch (id) {
      case kPad: return "<PAD>";
      case kStart: return "<S>";
      case kReverseStart: return "<S'>";
      case kEnd: return "<E>";
      default: break;
    }
    if (id < 0 || static_cast<std::size_t>(id) >= size()) {
      throw ParameterError("vocab: token id " + std::to_string(id) + " out of range");
    }
    return events_[static_cast<std::size_t>(id - kFirstEvent)];
  }

  bool operator==(const Vocab&) const = default;

  static void check_event_name(const std::string& e) {
    if (e.empty()) throw FormatError("vocab: empty event name");
    if (e.find_first_of(",\t\n") != std::string::npos) {
      throw FormatError("vocab: event name '" + e + "' contains a comma, tab or newline");
    }
    if (e == "<PAD>" || e == "<S>" || e == "<S'>" || e == "<E>") {
      throw FormatError("vocab: event name '" + e + "' collides with a control token");
    }
  }

 private:
  std::vector<std::string> events_;
};

// Event tokens in start-boundary order; never contains control tokens.
using SequentialLabel = std::vector<TokenId>;

// Unpadded teacher-forcing layout, each of length k+1.
struct EncodedLabel {
  std::vector<TokenId> normal_in;    // <S>  e1 .. ek
  std::vector<TokenId> normal_tgt;   // e1 .. ek <E>
  std::vector<TokenId> reverse_in;   // <S'> ek .. e1
  std::vector<TokenId> reverse_tgt;  // ek .. e1 <E>
};

inline EncodedLabel encode_labels(const SequentialLabel& label, std::size_t max_len) {
  const std::size_t k = label.size();
  if (k + 1 > max_len) {
    throw ParameterError("encode_labels: " + std::to_string(k) + " events do not fit max_len " +
                         std::to_string(max_len));
  }
  for (TokenId t : label) {
    if (!Vocab::is_event(t)) throw ParameterError("encode_labels: control token " + std::to_string(t) + " in label");
  }
  EncodedLabel e;
  e.normal_in.push_back(kStart);
  e.normal_in.insert(e.normal_in.end(), label.begin(), label.end());
  e.normal_tgt.assign(label.begin(), label.end());
  e.normal_tgt.push_back(kEnd);
  e.reverse_in.push_back(kReverseStart);
  e.reverse_in.insert(e.reverse_in.end(), label.rbegin(), label.rend());
  e.reverse_tgt.assign(label.rbegin(), label.rend());
  e.reverse_tgt.push_back(kEnd);
  return e;
}

// Recovers the label from a (possibly PAD-padded) normal target row.
inline SequentialLabel decode_normal_target(const std::vector<TokenId>& tgt) {
  SequentialLabel l;
  for (TokenId t : tgt) {
    if (t == kEnd || t == kPad) break;
    l.push_back(t);
  }
  return l;
}

// ---------------------------------------------------------------------------
// Manifest: `<relative/audio.wav>\t<event1,event2,...>`, '#' starts a comment.

struct ManifestEntry {
  std::string audio_path;  // as written in the manifest
  std::vector<std::string> events;
};

struct Manifest {
  std::filesystem::path base_dir;
  std::vector<ManifestEntry> entries;

  std::filesystem::path resolve(const ManifestEntry& e) const {
    std::filesystem::path p(e.audio_path);
    return p.is_absolute() ? p : base_dir / p;
  }

  Vocab build_vocab() const {
    std::set<std::string> names;
    for (const auto& e : entries) names.insert(e.events.begin(), e.events.end());
    return Vocab(names);
  }
};

inline Manifest parse_manifest(std::istream& in, std::filesystem::path base_dir = {}) {
  Manifest m;
  m.base_dir = std::move(base_dir);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    const auto tab = line.find('\t');
    ManifestEntry e;
    e.audio_path = line.substr(0, tab);
    if (e.audio_path.empty()) throw FormatError("manifest line " + std::to_string(lineno) + ": empty path");
    if (tab != std::string::npos) {
      const std::string events = line.substr(tab + 1);
      if (events.find('\t') != std::string::npos) {
        throw FormatError("manifest line " + std::to_string(lineno) + ": more than one tab");
      }
      std::stringstream ss(events);
      std::string name;
      while (std::getline(ss, name, ',')) {
        if (name.empty()) throw FormatError("manifest line " + std::to_string(lineno) + ": empty event name");
        Vocab::check_event_name(name);
        e.events.push_back(name);
      }
    }
    m.entries.push_back(std::move(e));
  }
  return m;
}

inline Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("manifest: cannot open " + path.string());
  return parse_manifest(in, path.parent_path());
}

inline void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream out(path);
  if (!out) throw FormatError("manifest: cannot write " + path.string());
  for (const auto& e : entries) {
    out << e.audio_path << '\t';
    for (std::size_t i = 0; i < e.events.size(); ++i) out << (i ? "," : "") << e.events[i];
    out << '\n';
  }
}

inline SequentialLabel encode_events(const Vocab& vocab, const std::vector<std::string>& events) {
  SequentialLabel l;
  l.reserve(events.size());
  for (const auto& e : events) l.push_back(vocab.id(e));
  return l;
}

// ---------------------------------------------------------------------------

struct Example {
  std::string id;
  Spectrogram features;
  SequentialLabel label;
};

using Dataset = std::vector<Example>;

// .wav goes through log_mel; .csv is read as a precomputed spectrogram.
inline Spectrogram load_features(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".csv") return read_spectrogram_csv(path.string());
  if (ext == ".wav" || ext == ".WAV") return log_mel(load_wav(path.string()));
  throw FormatError("features: unsupported file type '" + ext + "' for " + path.string());
}

inline Dataset load_dataset(const Manifest& m, const Vocab& vocab) {
  Dataset d;
  d.reserve(m.entries.size());
  for (const auto& e : m.entries) {
    d.push_back({e.audio_path, load_features(m.resolve(e)), encode_events(vocab, e.events)});
  }
  return d;
}

// Padded mini-batch. Features are padded with the log-mel floor, label rows
// with PAD; both branches share the padded width.
struct Batch {
  std::vector<std::size_t> indices;  // into the dataset
  std::size_t max_frames = 0;
  std::size_t bins = 0;
  std::vector<double> features;  // size() x max_frames x bins
  std::vector<std::size_t> frame_lengths;
  std::size_t max_tokens = 0;  // padded width of every label row
  std::vector<std::vector<TokenId>> normal_in, normal_tgt, reverse_in, reverse_tgt;
  std::vector<std::size_t> label_lengths;  // k+1 per sequence

  std::size_t size() const { return indices.size(); }

  Spectrogram clip(std::size_t i) const {
    Spectrogram s(frame_lengths[i], bins);
    const double* src = features.data() + i * max_frames * bins;
    std::copy_n(src, frame_lengths[i] * bins, s.values.data());
    return s;
  }

  std::vector<std::size_t> pad_mask(std::size_t i) const {
    std::vector<std::size_t> m(max_tokens, 0);
    std::fill_n(m.begin(), label_lengths[i], 1);
    return m;
  }
};

inline Batch build_batch(const Dataset& data, const std::vector<std::size_t>& indices, std::size_t max_len,
                         std::size_t pad_tokens_to = 0) {
  Batch b;
  b.indices = indices;
  b.bins = indices.empty() ? kMelBins : data.at(indices.front()).features.bins;
  std::vector<EncodedLabel> enc;
  for (auto i : indices) {
    const auto& ex = data.at(i);
    if (ex.features.bins != b.bins) throw DimensionError("batch: mixed bin counts");
    b.max_frames = std::max(b.max_frames, ex.features.frames);
    enc.push_back(encode_labels(ex.label, max_len));
    b.max_tokens = std::max(b.max_tokens, enc.back().normal_in.size());
  }
  b.max_tokens = std::max(b.max_tokens, pad_tokens_to);
  b.features.assign(indices.size() * b.max_frames * b.bins, std::log(kLogEnergyFloor));
  for (std::size_t n = 0; n < indices.size(); ++n) {
    const auto& f = data[indices[n]].features;
    std::copy(f.values.begin(), f.values.end(), b.features.begin() + n * b.max_frames * b.bins);
    b.frame_lengths.push_back(f.frames);
    auto pad = [&](std::vector<TokenId> v) {
      v.resize(b.max_tokens, kPad);
      return v;
    };
    b.label_lengths.push_back(enc[n].normal_in.size());
    b.normal_in.push_back(pad(enc[n].normal_in));
    b.normal_tgt.push_back(pad(enc[n].normal_tgt));
    b.reverse_in.push_back(pad(enc[n].reverse_in));
    b.reverse_tgt.push_back(pad(enc[n].reverse_tgt));
  }
  return b;
}

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

// Seeded shuffle, then the first round(val_fraction * n) clips go to validation.
inline Split split_dataset(std::size_t n, double val_fraction, unsigned long long seed) {
  if (n == 0) throw ParameterError("split: empty dataset");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ParameterError("split: val_fraction must lie in [0,1)");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_val = static_cast<std::size_t>(std::lround(val_fraction * static_cast<double>(n)));
  Split s;
  s.val.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  s.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  return s;
}

inline std::vector<Batch> batches_of(const Dataset& data, const std::vector<std::size_t>& indices,
                                     std::size_t batch_size, std::size_t max_len) {
  if (batch_size == 0) throw ParameterError("batches: batch_size must be positive");
  std::vector<Batch> out;
  for (std::size_t i = 0; i < indices.size(); i += batch_size) {
    const auto end = std::min(indices.size(), i + batch_size);
    out.push_back(build_batch(data, {indices.begin() + static_cast<std::ptrdiff_t>(i),
                                     indices.begin() + static_cast<std::ptrdiff_t>(end)},
                              max_len));
  }
  return out;
}

struct BatchedSplit {
  std::vector<Batch> train;
  std::vector<Batch> val;
};

inline BatchedSplit make_batches(const Dataset& data, std::size_t batch_size, unsigned long long seed,
                                 double val_fraction = 0.2, std::size_t max_len = 12) {
  const Split s = split_dataset(data.size(), val_fraction, seed);
  return {batches_of(data, s.train, batch_size, max_len), batches_of(data, s.val, batch_size, max_len)};
}

}  // namespace gct
