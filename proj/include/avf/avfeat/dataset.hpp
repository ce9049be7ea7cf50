#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "avf/avfeat/avfeat.hpp"
#include "avf/m3so/m3so.hpp"

namespace avf::feat {

/// One clip cropped to its first T frames.
struct Sample {
  diff::Tensor frames;  // [T, H, W]
  diff::Tensor audio;   // [T, bins, cols]
  std::optional<m3so::Box> block_box;
  std::uint64_t seed = 0;
};

struct Dataset {
  std::vector<Sample> samples;
  int frames = 0, size = 0, bins = 0, cols = 0;

  int count() const { return static_cast<int>(samples.size()); }
};

Sample make_sample(const m3so::Clip& clip, int frames, int audio_rate, int fps, const StftParams& p);
Dataset make_dataset(const std::vector<m3so::Clip>& clips, int frames, int audio_rate, int fps, const StftParams& p);
/// Reads a generated split and its recorded generator configuration.
Dataset load_dataset(const std::filesystem::path& root, const std::string& split, int frames, const StftParams& p,
                     int limit = -1);

struct Batch {
  diff::Tensor frames;  // [N, T, H, W]
  diff::Tensor audio;   // [N, T, bins, cols]
};

Batch gather(const Dataset& data, std::span<const int> indices);

}  // namespace avf::feat
