#include "avf/avfeat/dataset.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace avf::feat {

Sample make_sample(const m3so::Clip& clip, int frames, int audio_rate, int fps, const StftParams& p) {
  const m3so::Video& v = clip.video;
  if (frames < 1 || frames > v.frames) {
    throw std::invalid_argument("frames: clip has " + std::to_string(v.frames) + " frames, requested " + std::to_string(frames));
  }
  const std::size_t per_frame = static_cast<std::size_t>(audio_rate / fps);
  if (clip.audio.size() < per_frame * static_cast<std::size_t>(frames)) throw std::invalid_argument("audio: clip too short");
  Sample s;
  s.frames = diff::Tensor({frames, v.height, v.width});
  std::copy_n(v.pixels.begin(), s.frames.numel(), s.frames.data());
  const std::span<const double> audio(clip.audio.data(), per_frame * static_cast<std::size_t>(frames));
  s.audio = stack(frame_spectrograms(audio, frames, audio_rate, fps, p));
  s.block_box = clip.block_box;
  s.seed = clip.seed;
  return s;
}

Dataset make_dataset(const std::vector<m3so::Clip>& clips, int frames, int audio_rate, int fps, const StftParams& p) {
  if (clips.empty()) throw std::invalid_argument("dataset: no clips");
  Dataset d;
  for (const auto& c : clips) d.samples.push_back(make_sample(c, frames, audio_rate, fps, p));
  const Sample& s = d.samples.front();
  d.frames = frames;
  d.size = s.frames.dim(1);
  d.bins = s.audio.dim(1);
  d.cols = s.audio.dim(2);
  return d;
}

Dataset load_dataset(const std::filesystem::path& root, const std::string& split, int frames, const StftParams& p,
                     int limit) {
  const m3so::M3soConfig cfg = m3so::load_split_config(root, split);
  return make_dataset(m3so::load_split(root, split, limit), frames, cfg.audio_rate, cfg.fps, p);
}

Batch gather(const Dataset& data, std::span<const int> indices) {
  if (indices.empty()) throw std::invalid_argument("batch: no indices");
  const int n = static_cast<int>(indices.size());
  Batch b{diff::Tensor({n, data.frames, data.size, data.size}), diff::Tensor({n, data.frames, data.bins, data.cols})};
  const std::size_t fstride = b.frames.numel() / static_cast<std::size_t>(n);
  const std::size_t astride = b.audio.numel() / static_cast<std::size_t>(n);
  for (int i = 0; i < n; ++i) {
    const Sample& s = data.samples.at(static_cast<std::size_t>(indices[static_cast<std::size_t>(i)]));
    std::copy_n(s.frames.data(), fstride, b.frames.data() + static_cast<std::size_t>(i) * fstride);
    std::copy_n(s.audio.data(), astride, b.audio.data() + static_cast<std::size_t>(i) * astride);
  }
  return b;
}

}  // namespace avf::feat
