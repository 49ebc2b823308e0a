#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include <unistd.h>

#include "test_util.hpp"

using namespace gct;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  return fs::temp_directory_path() / ("gct_synth_" + std::to_string(::getpid())) / name;
}

}  // namespace

TEST(Templates, DisjointBandsWithGuards) {
  const auto t = default_templates(6);
  ASSERT_EQ(t.size(), 6u);
  EXPECT_EQ(t[0].name, "ev00");
  EXPECT_EQ(t[5].name, "ev05");
  for (std::size_t i = 1; i < t.size(); ++i) EXPECT_GT(t[i].band_lo, t[i - 1].band_hi);
  EXPECT_THROW(default_templates(0), ParameterError);
  EXPECT_THROW(default_templates(31), ParameterError);
}

TEST(Clip, EmptySequenceIsNoise) {
  const auto t = default_templates(3);
  ClipOptions opt;
  const auto c = generate_clip({}, t, opt, 1);
  EXPECT_TRUE(c.label.empty());
  EXPECT_EQ(c.spec.frames, 200u);
  const double hi = std::log(1.5e-3 + kLogEnergyFloor), lo = std::log(0.5e-3);
  for (double v : c.spec.values) {
    EXPECT_LE(v, hi);
    EXPECT_GE(v, lo);
  }
  EXPECT_TRUE(detect_onset_order(c.spec, t).empty());
}

TEST(Clip, NoiselessEventOccupiesItsBandOnly) {
  const auto t = default_templates(4);
  ClipOptions opt;
  opt.noise_db = -std::numeric_limits<double>::infinity();
  const auto c = generate_clip({"ev02"}, t, opt, 7);
  ASSERT_EQ(c.onsets.size(), 1u);
  const std::size_t on = c.onsets[0];
  const double floor = std::log(kLogEnergyFloor);
  for (std::size_t f = 0; f < c.spec.frames; ++f) {
    const bool active = f >= on && f < on + t[2].duration;
    for (std::size_t b = 0; b < c.spec.bins; ++b) {
      const bool in_band = b >= t[2].band_lo && b < t[2].band_hi;
      if (active && in_band) EXPECT_NEAR(c.spec.at(f, b), 0.0, 1e-9);
      else EXPECT_EQ(c.spec.at(f, b), floor);
    }
  }
}

TEST(Clip, OnsetsIncreaseAndDetectorRecoversOrder) {
  const auto t = default_templates(6);
  ClipOptions opt;
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<std::string> names{"ev00", "ev01", "ev02", "ev03", "ev04", "ev05"};
    std::shuffle(names.begin(), names.end(), rng);
    names.resize(1 + trial % 4);
    const auto c = generate_clip(names, t, opt, rng());
    for (std::size_t i = 1; i < c.onsets.size(); ++i) EXPECT_GE(c.onsets[i], c.onsets[i - 1] + opt.min_gap);
    EXPECT_EQ(detect_onset_order(c.spec, t), names);
  }
}

TEST(Clip, OverlappingEventsKeepOnsetOrder) {
  auto t = default_templates(3);
  ClipOptions opt;
  opt.total_frames = 60;
  opt.min_gap = 2;
  const auto c = generate_clip({"ev02", "ev00"}, t, opt, 3);
  // Both 40-frame events fit only if they overlap.
  EXPECT_LT(c.onsets[1], c.onsets[0] + t[2].duration);
  EXPECT_EQ(detect_onset_order(c.spec, t), (std::vector<std::string>{"ev02", "ev00"}));
}

TEST(Clip, RejectsImpossibleLayouts) {
  const auto t = default_templates(3);
  ClipOptions opt;
  opt.total_frames = 30;
  EXPECT_THROW(generate_clip({"ev00"}, t, opt, 1), ParameterError);
  EXPECT_THROW(generate_clip({"nope"}, t, ClipOptions{}, 1), ParameterError);
}

TEST(Dataset, SameSeedSameData) {
  const auto a = generate_examples(40, 6, 4, 5);
  const auto b = generate_examples(40, 6, 4, 5);
  ASSERT_EQ(a.entries.size(), 40u);
  for (std::size_t i = 0; i < 40; ++i) {
    EXPECT_EQ(a.entries[i].events, b.entries[i].events);
    EXPECT_EQ(a.spectrograms[i], b.spectrograms[i]);
  }
  const auto c = generate_examples(40, 6, 4, 6);
  bool differs = false;
  for (std::size_t i = 0; i < 40; ++i) differs |= a.entries[i].events != c.entries[i].events;
  EXPECT_TRUE(differs);
}

TEST(Dataset, EveryClassMeetsQuotaAndLabelsAreDistinct) {
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto d = generate_examples(300, 6, 4, seed);
    std::map<std::string, std::size_t> count;
    for (const auto& e : d.entries) {
      EXPECT_GE(e.events.size(), 1u);
      EXPECT_LE(e.events.size(), 4u);
      std::set<std::string> uniq(e.events.begin(), e.events.end());
      EXPECT_EQ(uniq.size(), e.events.size());
      for (const auto& n : e.events) ++count[n];
    }
    ASSERT_EQ(count.size(), 6u);
    for (const auto& [n, k] : count) EXPECT_GE(k, 30u) << n;
  }
  const auto small = generate_examples(6, 5, 3, 1);
  std::map<std::string, std::size_t> count;
  for (const auto& e : small.entries)
    for (const auto& n : e.events) ++count[n];
  for (const auto& [n, k] : count) EXPECT_GE(k, 3u) << n;
  EXPECT_THROW(generate_examples(2, 6, 2, 1), ParameterError);
}

TEST(Dataset, FiftyClipsSplitFortyTen) {
  const auto d = generate_examples(50, 6, 4, 9);
  const auto v = synth_vocab(d);
  const auto data = to_dataset(d, v);
  const auto b = make_batches(data, 64, 9);
  EXPECT_EQ(b.train[0].size(), 40u);
  EXPECT_EQ(b.val[0].size(), 10u);
}

TEST(Dataset, FilesAreReproducible) {
  DatasetOptions opt;
  opt.clip.total_frames = 60;
  opt.duration = 10;
  const auto m1 = generate_dataset(10, 3, 2, 4, scratch("a"), opt);
  const auto m2 = generate_dataset(10, 3, 2, 4, scratch("b"), opt);
  EXPECT_EQ(slurp(m1), slurp(m2));
  const auto man = load_manifest(m1);
  ASSERT_EQ(man.entries.size(), 10u);
  for (const auto& e : man.entries) EXPECT_EQ(slurp(man.resolve(e)), slurp(scratch("b") / e.audio_path));
  const auto spec = read_spectrogram_csv(man.resolve(man.entries[0]).string());
  EXPECT_EQ(spec.frames, 60u);
}

TEST(Dataset, WavRenderingDecodesToTheRightOrder) {
  DatasetOptions opt;
  opt.wav = true;
  opt.clip.total_frames = 150;
  opt.duration = 30;
  opt.clip.noise_db = -std::numeric_limits<double>::infinity();
  const auto m = load_manifest(generate_dataset(6, 3, 2, 8, scratch("wav"), opt));
  const auto templates = default_templates(3);
  std::size_t hits = 0;
  for (const auto& e : m.entries) {
    const auto s = log_mel(load_wav(m.resolve(e).string()));
    EXPECT_EQ(s.frames, 150u);
    // Mean band energy of each class over the clip; the labelled ones stand out.
    std::vector<double> energy;
    for (const auto& t : templates) {
      double acc = 0;
      for (std::size_t f = 0; f < s.frames; ++f)
        for (std::size_t b = t.band_lo; b < t.band_hi; ++b) acc += std::exp(s.at(f, b));
      energy.push_back(acc);
    }
    std::set<std::string> present(e.events.begin(), e.events.end());
    double min_on = 1e300, max_off = 0;
    for (std::size_t c = 0; c < templates.size(); ++c) {
      if (present.count(templates[c].name)) min_on = std::min(min_on, energy[c]);
      else max_off = std::max(max_off, energy[c]);
    }
    hits += min_on > 10 * max_off;
  }
  EXPECT_EQ(hits, m.entries.size());
}
