#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "gct/error.hpp"
#include "gct/log_mel.hpp"

namespace gct {

// Non-overlapping tiling of a spectrogram, time-major: patch (i, j) covers
// frames [i*patch_time, (i+1)*patch_time) and bins [j*patch_freq, ...), and
// sits at index i*grid_freq + j. Each patch is flattened row-major.
struct PatchGrid {
  std::size_t grid_time = 0;
  std::size_t grid_freq = 0;
  std::size_t patch_time = 0;
  std::size_t patch_freq = 0;
  std::vector<double> values;  // num_patches() x patch_size()

  std::size_t num_patches() const { return grid_time * grid_freq; }
  std::size_t patch_size() const { return patch_time * patch_freq; }
  const double* patch(std::size_t index) const { return values.data() + index * patch_size(); }
  // Frame index where the patch at `index` starts.
  std::size_t time_of(std::size_t index) const { return (index / grid_freq) * patch_time; }
};

inline PatchGrid to_patches(const Spectrogram& s, std::size_t patch_time, std::size_t patch_freq) {
  if (patch_time == 0 || patch_freq == 0) throw ParameterError("to_patches: patch dims must be >= 1");
  if (s.frames < patch_time || s.bins < patch_freq) {
    throw ParameterError("to_patches: spectrogram " + std::to_string(s.frames) + "x" +
                         std::to_string(s.bins) + " smaller than one " + std::to_string(patch_time) +
                         "x" + std::to_string(patch_freq) + " patch");
  }
  PatchGrid g;
  g.patch_time = patch_time;
  g.patch_freq = patch_freq;
  g.grid_time = s.frames / patch_time;
  g.grid_freq = s.bins / patch_freq;
  g.values.reserve(g.num_patches() * g.patch_size());
  for (std::size_t i = 0; i < g.grid_time; ++i)
    for (std::size_t j = 0; j < g.grid_freq; ++j)
      for (std::size_t t = 0; t < patch_time; ++t)
        for (std::size_t f = 0; f < patch_freq; ++f)
          g.values.push_back(s.at(i * patch_time + t, j * patch_freq + f));
  return g;
}

// Inverse tiling: the cropped spectrogram the grid was cut from.
inline Spectrogram from_patches(const PatchGrid& g) {
  Spectrogram s(g.grid_time * g.patch_time, g.grid_freq * g.patch_freq);
  std::size_t k = 0;
  for (std::size_t i = 0; i < g.grid_time; ++i)
    for (std::size_t j = 0; j < g.grid_freq; ++j)
      for (std::size_t t = 0; t < g.patch_time; ++t)
        for (std::size_t f = 0; f < g.patch_freq; ++f) s.at(i * g.patch_time + t, j * g.patch_freq + f) = g.values[k++];
  return s;
}

}  // namespace gct
