#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

#include "../support/dft_oracle.hpp"
#include "avf/avfeat/avfeat.hpp"
#include "avf/avfeat/dataset.hpp"
#include "avf/m3so/m3so.hpp"

using namespace avf::feat;

namespace {

std::vector<double> sine(double f, int rate, int n, double phase = 0.0) {
  std::vector<double> x(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) x[static_cast<std::size_t>(i)] = std::sin(2.0 * std::numbers::pi * f * i / rate + phase);
  return x;
}

int argmax_row(const avf::diff::Tensor& m, int col) {
  int best = 0;
  const int cols = m.dim(1);
  for (int r = 1; r < m.dim(0); ++r) {
    if (m[static_cast<std::size_t>(r * cols + col)] > m[static_cast<std::size_t>(best * cols + col)]) best = r;
  }
  return best;
}

}  // namespace

TEST(Stft, ZeroWaveGivesZeroMatrix) {
  std::vector<double> x(800, 0.0);
  auto m = stft(x, {});
  EXPECT_EQ(m.shape(), (avf::diff::Shape{128, 9}));
  for (double v : m.values()) EXPECT_EQ(v, 0.0);
}

TEST(Stft, MatchesDirectDft) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> x(600);
  for (double& v : x) v = u(rng);
  StftParams p;
  auto m = stft(x, p);
  const auto w = avf::testing::hann_window(p.window);
  for (int c = 0; c < m.dim(1); ++c) {
    std::vector<double> seg(static_cast<std::size_t>(p.window));
    for (int n = 0; n < p.window; ++n) seg[static_cast<std::size_t>(n)] = w[static_cast<std::size_t>(n)] * x[static_cast<std::size_t>(c * p.hop + n)];
    const auto X = avf::testing::direct_dft(seg, p.nfft);
    for (int k = 0; k < p.bins(); ++k) {
      EXPECT_NEAR(m[static_cast<std::size_t>(k * m.dim(1) + c)], std::abs(X[static_cast<std::size_t>(k)]), 1e-9);
    }
  }
}

TEST(Stft, PureSinePeaksAtNearestBin) {
  for (double f : {440.0, 659.26, 880.0, 1320.0}) {
    auto m = stft(sine(f, 8000, 800), {});
    const int expected = static_cast<int>(std::lround(f * 256 / 8000));
    for (int c = 0; c < m.dim(1); ++c) EXPECT_EQ(argmax_row(m, c), expected) << f;
  }
}

TEST(Stft, ConcatenatedSinesChangePeak) {
  auto a = sine(440.0, 8000, 800), b = sine(1320.0, 8000, 800);
  a.insert(a.end(), b.begin(), b.end());
  auto m = stft(a, {});
  EXPECT_EQ(argmax_row(m, 0), 14);
  EXPECT_EQ(argmax_row(m, m.dim(1) - 1), 42);
}

TEST(Stft, ShortWaveRejected) {
  std::vector<double> x(100, 0.0);
  EXPECT_THROW(stft(x, {}), std::invalid_argument);
}

TEST(Stft, ParsevalOnSingleColumn) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> x(256);
  for (double& v : x) v = u(rng);
  const auto w = hann(256);
  std::vector<double> xw(256);
  double energy = 0;
  for (int n = 0; n < 256; ++n) {
    xw[static_cast<std::size_t>(n)] = w[static_cast<std::size_t>(n)] * x[static_cast<std::size_t>(n)];
    energy += xw[static_cast<std::size_t>(n)] * xw[static_cast<std::size_t>(n)];
  }
  const auto X = rfft(xw, 256);
  double spec = std::norm(X[0]) + std::norm(X[128]);
  for (int k = 1; k < 128; ++k) spec += 2.0 * std::norm(X[static_cast<std::size_t>(k)]);
  EXPECT_NEAR(spec / (256.0 * energy), 1.0, 1e-9);
}

TEST(Stft, HopDelayShiftsColumns) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> x(1000);
  for (double& v : x) v = u(rng);
  std::vector<double> y(64, 0.0);
  y.insert(y.end(), x.begin(), x.end() - 64);
  auto a = stft(x, {}), b = stft(y, {});
  for (int c = 1; c < a.dim(1); ++c) {
    for (int k = 0; k < a.dim(0); ++k) {
      EXPECT_NEAR(b[static_cast<std::size_t>(k * a.dim(1) + c)], a[static_cast<std::size_t>(k * a.dim(1) + c - 1)], 1e-9);
    }
  }
}

TEST(Stft, LogFlagCompresses) {
  auto x = sine(440.0, 8000, 800);
  StftParams p;
  auto lin = stft(x, p);
  p.log_magnitude = true;
  auto lg = stft(x, p);
  for (std::size_t i = 0; i < lin.numel(); ++i) EXPECT_NEAR(lg[i], std::log1p(lin[i]), 1e-12);
}

TEST(FrameSpectrograms, OneBlockPerFrame) {
  auto x = sine(440.0, 8000, 800);
  auto seq = frame_spectrograms(x, 1, 8000, 10, {});
  EXPECT_EQ(seq.blocks.size(), 1u);
  EXPECT_THROW(frame_spectrograms(x, 2, 8000, 10, {}), std::invalid_argument);
}

TEST(FrameSpectrograms, ShortFramesArePadded) {
  auto x = sine(440.0, 1000, 300);
  auto seq = frame_spectrograms(x, 3, 1000, 10, {});
  ASSERT_EQ(seq.blocks.size(), 3u);
  EXPECT_EQ(seq.blocks[0].shape(), (avf::diff::Shape{128, 1}));
}

TEST(FrameSpectrograms, GeneratedClipsAlign) {
  avf::m3so::M3soConfig c;
  c.frames_per_clip = 12;
  c.block_frame = 5;
  auto clip = avf::m3so::generate_clip(c, 4);
  auto seq = frame_spectrograms(clip.audio, clip.video.frames, c.audio_rate, c.fps, {});
  EXPECT_EQ(static_cast<int>(seq.blocks.size()), clip.video.frames);
  EXPECT_EQ(stack(seq).shape(), (avf::diff::Shape{12, 128, 9}));
}

TEST(FrameSpectrograms, EventFreeClipSharesPeakRow) {
  avf::m3so::M3soConfig c;
  c.frames_per_clip = 6;
  c.block_enabled = false;
  std::mt19937_64 rng(1);
  auto t = avf::m3so::simulate(c, {16.0, 16.0}, {1.2, -1.6}, rng);
  ASSERT_TRUE(t.events.empty());
  auto audio = avf::m3so::synth_audio(t, c, 6);
  auto seq = frame_spectrograms(audio, 6, c.audio_rate, c.fps, {});
  const int expected = avf::testing::dominant_bin(audio, 0, 256, 256);
  for (const auto& b : seq.blocks) {
    for (int col = 0; col < b.dim(1); ++col) EXPECT_EQ(argmax_row(b, col), expected);
  }
}

TEST(PositionCode, OriginAlternates) {
  auto c = position_encode(0, 8);
  for (int i = 0; i < 8; ++i) EXPECT_EQ(c[static_cast<std::size_t>(i)], i % 2 ? 1.0 : 0.0);
}

TEST(PositionCode, BoundedAndFirstCoordinateStep) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> pos(0, 10000);
  for (int k = 0; k < 50; ++k) {
    for (double v : position_encode(pos(rng), 128)) {
      EXPECT_LE(v, 1.0);
      EXPECT_GE(v, -1.0);
    }
  }
  EXPECT_NEAR(position_encode(1, 128)[0] - position_encode(0, 128)[0], 0.8414709848078965, 1e-15);
}

TEST(PositionCode, OddDimensionRejected) { EXPECT_THROW(position_encode(3, 7), std::invalid_argument); }

TEST(PositionCode, TableMatchesRows) {
  auto t = position_table(5, 6);
  for (int p = 0; p < 5; ++p) {
    auto c = position_encode(p, 6);
    for (int i = 0; i < 6; ++i) EXPECT_EQ(t[static_cast<std::size_t>(p * 6 + i)], c[static_cast<std::size_t>(i)]);
  }
}

TEST(Dataset, SampleCropsFramesAndAudio) {
  avf::m3so::M3soConfig c;
  c.box_size = 32;
  c.frames_per_clip = 10;
  c.block_frame = 3;
  c.block_size = 6;
  c.sprite_size = 12;
  auto clip = avf::m3so::generate_clip(c, 8);
  auto s = make_sample(clip, 6, c.audio_rate, c.fps, {});
  EXPECT_EQ(s.frames.shape(), (avf::diff::Shape{6, 32, 32}));
  EXPECT_EQ(s.audio.shape(), (avf::diff::Shape{6, 128, 9}));
  for (std::size_t i = 0; i < s.frames.numel(); ++i) EXPECT_EQ(s.frames[i], clip.video.pixels[i]);
  auto full = stack(frame_spectrograms(clip.audio, 10, c.audio_rate, c.fps, {}));
  for (std::size_t i = 0; i < s.audio.numel(); ++i) EXPECT_EQ(s.audio[i], full[i]);
  EXPECT_EQ(s.block_box, clip.block_box);
  EXPECT_THROW(make_sample(clip, 11, c.audio_rate, c.fps, {}), std::invalid_argument);
}

TEST(Dataset, GatherStacksInIndexOrder) {
  avf::m3so::M3soConfig c;
  c.box_size = 32;
  c.frames_per_clip = 4;
  c.block_enabled = false;
  c.sprite_size = 12;
  std::vector<avf::m3so::Clip> clips;
  for (int i = 0; i < 3; ++i) clips.push_back(avf::m3so::generate_clip(c, static_cast<std::uint64_t>(i)));
  auto d = make_dataset(clips, 4, c.audio_rate, c.fps, {});
  const int idx[] = {2, 0};
  auto b = gather(d, idx);
  EXPECT_EQ(b.frames.shape(), (avf::diff::Shape{2, 4, 32, 32}));
  const std::size_t n = d.samples[0].frames.numel(), m = d.samples[0].audio.numel();
  for (std::size_t i = 0; i < n; ++i) {
    EXPECT_EQ(b.frames[i], d.samples[2].frames[i]);
    EXPECT_EQ(b.frames[n + i], d.samples[0].frames[i]);
  }
  for (std::size_t i = 0; i < m; ++i) EXPECT_EQ(b.audio[m + i], d.samples[0].audio[i]);
}

TEST(Dataset, LoadsGeneratedSplitWithItsConfig) {
  avf::m3so::M3soConfig c;
  c.box_size = 32;
  c.frames_per_clip = 5;
  c.block_frame = 2;
  c.block_size = 6;
  c.sprite_size = 12;
  c.audio_rate = 4000;
  c.seed = 77;
  const auto root = std::filesystem::temp_directory_path() / "avf_dataset_test";
  std::filesystem::remove_all(root);
  avf::m3so::generate_dataset(c, {2, 0, 1}, root);
  auto d = load_dataset(root, "train", 5, {});
  ASSERT_EQ(d.count(), 2);
  auto direct = make_sample(avf::m3so::generate_clip(c, 77), 5, 4000, 10, {});
  EXPECT_EQ(d.cols, direct.audio.dim(2));
  EXPECT_LT(avf::testing::max_abs_diff_vec(d.samples[0].audio.values(), direct.audio.values()), 1e-3);
  EXPECT_EQ(d.samples[0].block_box, direct.block_box);
  std::filesystem::remove_all(root);
}
