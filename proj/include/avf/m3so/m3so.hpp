#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "avf/common/json_fields.hpp"

// Synthetic moving-digit clips with a position-modulated tone and an
// optional obstacle that appears mid-sequence.
namespace avf::m3so {

enum class SpriteSource { Procedural, Idx };

NLOHMANN_JSON_SERIALIZE_ENUM(SpriteSource, {{SpriteSource::Procedural, "procedural"}, {SpriteSource::Idx, "idx"}})

struct M3soConfig {
  int box_size = 48;
  int frames_per_clip = 70;
  int fps = 10;
  int digit_class = -1;  // -1 draws a class per clip
  SpriteSource sprite_source = SpriteSource::Procedural;
  std::string idx_images;
  std::string idx_labels;
  int sprite_size = 16;
  bool block_enabled = true;
  int block_frame = 42;  // 1-based frame number at which the block appears
  int block_size = 8;
  int audio_rate = 8000;
  double speed = 2.0;  // pixels per frame
  double a_max = 0.9;
  double f_wall = 880.0;
  double f_block = 1320.0;
  double max_turn_deg = 30.0;
  double min_exit_deg = 15.0;
  std::uint64_t seed = 0;

  int samples_per_frame() const { return audio_rate / fps; }
  double carrier_hz(int digit) const;
  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

AVF_JSON_FIELDS(M3soConfig, box_size, frames_per_clip, fps, digit_class, sprite_source,
                                                idx_images, idx_labels, sprite_size, block_enabled, block_frame,
                                                block_size, audio_rate, speed, a_max, f_wall, f_block, max_turn_deg,
                                                min_exit_deg, seed)

struct Vec2 {
  double x = 0.0, y = 0.0;
};

enum class EventKind { Wall, Block };

struct Event {
  int frame = 0;  // zero-based video index
  EventKind kind = EventKind::Wall;
  bool operator==(const Event&) const = default;
};

struct Box {
  int x = 0, y = 0, w = 0, h = 0;
  bool operator==(const Box&) const = default;
};

/// Sprite top-left positions in pixel units, y pointing down.
struct Trajectory {
  std::vector<Vec2> positions;
  std::vector<Vec2> velocities;
  std::vector<Event> events;
  std::optional<Box> block_box;
  int sprite_size = 0;

  int length() const { return static_cast<int>(positions.size()); }
  bool has_event(int frame) const;
  std::optional<EventKind> event_at(int frame) const;  // block wins over wall
};

struct Sprite {
  int size = 0;
  std::vector<double> alpha;  // row-major, values in [0, 1]
  double mass() const;
};

/// Row-major T x H x W intensities in [0, 1].
struct Video {
  int frames = 0, height = 0, width = 0;
  std::vector<double> pixels;

  std::span<double> frame(int t);
  std::span<const double> frame(int t) const;
  bool operator==(const Video&) const = default;
};

struct Clip {
  Video video;
  std::vector<double> audio;
  std::vector<Event> events;
  std::optional<Box> block_box;
  int digit = 0;
  std::uint64_t seed = 0;
};

Sprite procedural_sprite(int digit, int size);
/// Picks a random image of the requested digit from MNIST-style IDX files and resamples it to size x size.
Sprite idx_sprite(const std::filesystem::path& images, const std::filesystem::path& labels, int digit, int size,
                  std::mt19937_64& rng);

/// Random start position and heading, then simulate().
Trajectory synth_trajectory(const M3soConfig& cfg, std::mt19937_64& rng);
/// Constant-speed motion from a given state. Contacts clamp the sprite to the
/// contact face, reflect the normal component and perturb the heading.
Trajectory simulate(const M3soConfig& cfg, Vec2 start, Vec2 velocity, std::mt19937_64& rng);
/// Block pixels are drawn from video index block_start onward.
Video render_frames(const Trajectory& traj, const Sprite& sprite, int box_size, int block_start);
/// Distance of the sprite center from the lower-left corner of the box.
double corner_distance(const Vec2& top_left, int sprite_size, int box_size);
double tone_amplitude(double distance, const M3soConfig& cfg);
std::vector<double> synth_audio(const Trajectory& traj, const M3soConfig& cfg, int digit);

Clip generate_clip(const M3soConfig& cfg, std::uint64_t seed);

// Container I/O.
void write_video(const std::filesystem::path& path, const Video& video);
Video read_video(const std::filesystem::path& path);
void write_wav(const std::filesystem::path& path, std::span<const double> samples, int rate);
std::vector<double> read_wav(const std::filesystem::path& path, int* rate = nullptr);
/// Values quantized as stored in the clip container.
Video quantize(const Video& video);

struct SplitCounts {
  int train = 0, val = 0, test = 0;
};

std::uint64_t split_offset(const std::string& split);
/// Writes <out>/<split>/clip_NNNNN.{m3so,wav} and <out>/<split>/manifest.json. Returns all manifests keyed by split.
nlohmann::json generate_dataset(const M3soConfig& cfg, SplitCounts counts, const std::filesystem::path& out_dir);
/// Loads every clip of a split (video from the container, audio from the WAV).
std::vector<Clip> load_split(const std::filesystem::path& root, const std::string& split, int limit = -1);
/// Generator configuration recorded in a split manifest.
M3soConfig load_split_config(const std::filesystem::path& root, const std::string& split);

std::string to_string(EventKind kind);

}  // namespace avf::m3so
