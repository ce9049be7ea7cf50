#include "avf/m3so/m3so.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numbers>
#include <stdexcept>

namespace avf::m3so {
namespace {

// 5x7 glyphs, one string per row, '#' = ink.
constexpr std::array<std::array<const char*, 7>, 10> kGlyphs = {{
    {" ### ", "#   #", "#  ##", "# # #", "##  #", "#   #", " ### "},
    {"  #  ", " ##  ", "  #  ", "  #  ", "  #  ", "  #  ", " ### "},
    {" ### ", "#   #", "    #", "   # ", "  #  ", " #   ", "#####"},
    {"#####", "   # ", "  #  ", "   # ", "    #", "#   #", " ### "},
    {"   # ", "  ## ", " # # ", "#  # ", "#####", "   # ", "   # "},
    {"#####", "#    ", "#### ", "    #", "    #", "#   #", " ### "},
    {"  ## ", " #   ", "#    ", "#### ", "#   #", "#   #", " ### "},
    {"#####", "    #", "   # ", "  #  ", " #   ", " #   ", " #   "},
    {" ### ", "#   #", "#   #", " ### ", "#   #", "#   #", " ### "},
    {" ### ", "#   #", "#   #", " ####", "    #", "   # ", " ##  "},
}};

Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }

Vec2 rotate(Vec2 v, double rad) {
  const double c = std::cos(rad), s = std::sin(rad);
  return {c * v.x - s * v.y, s * v.x + c * v.y};
}

double deg(double d) { return d * std::numbers::pi / 180.0; }

// Reflects the incoming normal components, turns by a random angle and keeps
// at least speed*sin(min_exit) along every inward normal.
Vec2 bounce(Vec2 v, const std::vector<Vec2>& normals, const M3soConfig& cfg, std::mt19937_64& rng) {
  for (const Vec2& n : normals) {
    const double vn = dot(v, n);
    if (vn < 0.0) v = v - (2.0 * vn) * n;
  }
  std::uniform_real_distribution<double> turn(-cfg.max_turn_deg, cfg.max_turn_deg);
  const Vec2 r = rotate(v, deg(turn(rng)));
  const double min_in = cfg.speed * std::sin(deg(cfg.min_exit_deg));
  const bool ok = std::all_of(normals.begin(), normals.end(),
                              [&](const Vec2& n) { return dot(r, n) >= min_in; });
  if (ok) return r;
  if (normals.size() == 1) {
    const Vec2 n = normals[0];
    const Vec2 t{-n.y, n.x};
    const double side = dot(r, t) >= 0.0 ? 1.0 : -1.0;
    const double tang = std::sqrt(cfg.speed * cfg.speed - min_in * min_in);
    return min_in * n + (side * tang) * t;
  }
  Vec2 d{};
  for (const Vec2& n : normals) d = d + n;
  const double len = std::hypot(d.x, d.y);
  return (cfg.speed / len) * d;
}

bool overlaps(Vec2 p, int s, const Box& b) {
  return p.x < b.x + b.w && p.x + s > b.x && p.y < b.y + b.h && p.y + s > b.y;
}

Box place_block(Vec2 p, const M3soConfig& cfg, std::mt19937_64& rng) {
  std::vector<Box> candidates;
  const int bs = cfg.block_size;
  for (int by = 0; by + bs <= cfg.box_size; ++by) {
    for (int bx = 0; bx + bs <= cfg.box_size; ++bx) {
      Box b{bx, by, bs, bs};
      if (!overlaps(p, cfg.sprite_size, b)) candidates.push_back(b);
    }
  }
  if (candidates.empty()) throw std::invalid_argument("block_size: no block placement avoids the sprite");
  std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
  return candidates[pick(rng)];
}

// Pushes p back to the block face crossed between prev and p. Returns the outward face normal.
Vec2 resolve_block(Vec2 prev, Vec2& p, Vec2 v, int s, const Box& b) {
  const bool sep_x = prev.x + s <= b.x || prev.x >= b.x + b.w;
  const bool sep_y = prev.y + s <= b.y || prev.y >= b.y + b.h;
  auto entry = [&](double q, double vq, int lo, int len) {
    if (vq > 0.0) return (lo - (q + s)) / vq;
    if (vq < 0.0) return (q - (lo + len)) / -vq;
    return -1e300;
  };
  bool use_x;
  if (sep_x && sep_y) {
    use_x = entry(prev.x, v.x, b.x, b.w) >= entry(prev.y, v.y, b.y, b.h);
  } else if (sep_x || sep_y) {
    use_x = sep_x;
  } else {
    throw std::logic_error("trajectory: sprite already overlapped the block");
  }
  if (use_x) {
    if (v.x > 0.0) {
      p.x = b.x - s;
      return {-1.0, 0.0};
    }
    p.x = b.x + b.w;
    return {1.0, 0.0};
  }
  if (v.y > 0.0) {
    p.y = b.y - s;
    return {0.0, -1.0};
  }
  p.y = b.y + b.h;
  return {0.0, 1.0};
}

void put_u32(std::ostream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                     static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(b, 4);
}

void put_u16(std::ostream& out, std::uint16_t v) {
  const char b[2] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff)};
  out.write(b, 2);
}

std::uint32_t le_u32(const std::string& s, std::size_t at) {
  if (at + 4 > s.size()) throw std::runtime_error("truncated file");
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[at + static_cast<std::size_t>(i)]);
  return v;
}

std::uint32_t be_u32(const std::string& s, std::size_t at) {
  if (at + 4 > s.size()) throw std::runtime_error("truncated file");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(s[at + static_cast<std::size_t>(i)]);
  return v;
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

nlohmann::json box_json(const std::optional<Box>& b) {
  if (!b) return nullptr;
  return nlohmann::json::array({b->x, b->y, b->w, b->h});
}

}  // namespace

double M3soConfig::carrier_hz(int digit) const { return 440.0 * std::pow(2.0, digit / 12.0); }

void M3soConfig::validate() const {
  auto need = [](bool ok, const char* field, const std::string& why) {
    if (!ok) throw std::invalid_argument(std::string(field) + ": " + why);
  };
  need(sprite_size > 0, "sprite_size", "must be positive");
  need(box_size > sprite_size + 2, "box_size", "must exceed sprite_size + 2");
  need(frames_per_clip >= 0, "frames_per_clip", "must be non-negative");
  need(fps > 0, "fps", "must be positive");
  need(audio_rate > 0 && audio_rate % fps == 0, "audio_rate", "must be a positive multiple of fps");
  need(digit_class >= -1 && digit_class <= 9, "digit_class", "must be -1 or 0..9");
  need(speed > 0.0 && speed < sprite_size, "speed", "must be in (0, sprite_size)");
  need(a_max > 0.0 && a_max < 1.0, "a_max", "must be in (0, 1)");
  need(f_wall > 0.0 && f_wall < audio_rate / 2.0, "f_wall", "must be below Nyquist");
  need(f_block > 0.0 && f_block < audio_rate / 2.0, "f_block", "must be below Nyquist");
  need(max_turn_deg >= 0.0 && max_turn_deg < 90.0, "max_turn_deg", "must be in [0, 90)");
  need(min_exit_deg > 0.0 && min_exit_deg < 45.0, "min_exit_deg", "must be in (0, 45)");
  if (sprite_source == SpriteSource::Idx) {
    need(!idx_images.empty(), "idx_images", "required for idx sprites");
    need(!idx_labels.empty(), "idx_labels", "required for idx sprites");
  }
  if (block_enabled) {
    need(block_size > 0 && block_size < box_size, "block_size", "must be in (0, box_size)");
    need(block_frame >= 1 && block_frame <= frames_per_clip, "block_frame", "must be within the clip");
  }
}

bool Trajectory::has_event(int frame) const {
  return std::any_of(events.begin(), events.end(), [&](const Event& e) { return e.frame == frame; });
}

std::optional<EventKind> Trajectory::event_at(int frame) const {
  std::optional<EventKind> k;
  for (const Event& e : events) {
    if (e.frame != frame) continue;
    if (e.kind == EventKind::Block) return e.kind;
    k = e.kind;
  }
  return k;
}

double Sprite::mass() const {
  double m = 0.0;
  for (double a : alpha) m += a;
  return m;
}

std::span<double> Video::frame(int t) {
  const std::size_t n = static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
  return {pixels.data() + n * static_cast<std::size_t>(t), n};
}

std::span<const double> Video::frame(int t) const {
  const std::size_t n = static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
  return {pixels.data() + n * static_cast<std::size_t>(t), n};
}

Sprite procedural_sprite(int digit, int size) {
  if (digit < 0 || digit > 9) throw std::invalid_argument("digit: must be 0..9");
  if (size < 7) throw std::invalid_argument("sprite size: must be at least 7");
  constexpr int kSuper = 4;
  const double gh = size - 2.0;        // glyph height in pixels
  const double gw = gh * 5.0 / 7.0;
  const double ox = (size - gw) / 2.0, oy = 1.0;
  const auto& g = kGlyphs[static_cast<std::size_t>(digit)];
  Sprite sp{size, std::vector<double>(static_cast<std::size_t>(size * size), 0.0)};
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSuper; ++sy) {
        for (int sx = 0; sx < kSuper; ++sx) {
          const double px = x + (sx + 0.5) / kSuper - ox;
          const double py = y + (sy + 0.5) / kSuper - oy;
          const int col = static_cast<int>(std::floor(px / gw * 5.0));
          const int row = static_cast<int>(std::floor(py / gh * 7.0));
          if (col >= 0 && col < 5 && row >= 0 && row < 7 && g[static_cast<std::size_t>(row)][col] == '#') ++hits;
        }
      }
      sp.alpha[static_cast<std::size_t>(y * size + x)] = static_cast<double>(hits) / (kSuper * kSuper);
    }
  }
  return sp;
}

Sprite idx_sprite(const std::filesystem::path& images, const std::filesystem::path& labels, int digit, int size,
                  std::mt19937_64& rng) {
  const std::string img = slurp(images);
  const std::string lab = slurp(labels);
  if (be_u32(img, 0) != 0x803) throw std::runtime_error("idx images: bad magic in " + images.string());
  if (be_u32(lab, 0) != 0x801) throw std::runtime_error("idx labels: bad magic in " + labels.string());
  const std::uint32_t n = be_u32(img, 4), rows = be_u32(img, 8), cols = be_u32(img, 12);
  if (be_u32(lab, 4) != n) throw std::runtime_error("idx: image and label counts differ");
  if (img.size() < 16 + std::size_t{n} * rows * cols || lab.size() < 8 + std::size_t{n}) {
    throw std::runtime_error("idx: truncated file");
  }
  std::vector<std::uint32_t> matches;
  for (std::uint32_t i = 0; i < n; ++i) {
    if (static_cast<unsigned char>(lab[8 + i]) == digit) matches.push_back(i);
  }
  if (matches.empty()) throw std::runtime_error("idx: no image with label " + std::to_string(digit));
  std::uniform_int_distribution<std::size_t> pick(0, matches.size() - 1);
  const std::size_t base = 16 + std::size_t{matches[pick(rng)]} * rows * cols;
  // Area resampling to size x size.
  Sprite sp{size, std::vector<double>(static_cast<std::size_t>(size * size), 0.0)};
  const double fy = static_cast<double>(rows) / size, fx = static_cast<double>(cols) / size;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      double acc = 0.0, wsum = 0.0;
      for (std::uint32_t r = 0; r < rows; ++r) {
        const double oy = std::min(r + 1.0, (y + 1) * fy) - std::max<double>(r, y * fy);
        if (oy <= 0.0) continue;
        for (std::uint32_t c = 0; c < cols; ++c) {
          const double ox = std::min(c + 1.0, (x + 1) * fx) - std::max<double>(c, x * fx);
          if (ox <= 0.0) continue;
          acc += oy * ox * static_cast<unsigned char>(img[base + r * cols + c]) / 255.0;
          wsum += oy * ox;
        }
      }
      sp.alpha[static_cast<std::size_t>(y * size + x)] = acc / wsum;
    }
  }
  return sp;
}

Trajectory simulate(const M3soConfig& cfg, Vec2 start, Vec2 velocity, std::mt19937_64& rng) {
  cfg.validate();
  const int s = cfg.sprite_size;
  const double hi = cfg.box_size - s;
  if (start.x < 0.0 || start.x > hi || start.y < 0.0 || start.y > hi) {
    throw std::invalid_argument("start: sprite must lie inside the box");
  }
  const int block_start = cfg.block_enabled ? cfg.block_frame - 1 : -1;
  Trajectory tr;
  tr.sprite_size = s;
  Vec2 p = start, v = velocity;
  for (int t = 0; t < cfg.frames_per_clip; ++t) {
    if (t > 0) {
      const Vec2 prev = p;
      p = p + v;
      std::vector<Vec2> normals;
      bool wall = false;
      if (p.x <= 0.0) { p.x = 0.0; normals.push_back({1.0, 0.0}); }
      if (p.x >= hi) { p.x = hi; normals.push_back({-1.0, 0.0}); }
      if (p.y <= 0.0) { p.y = 0.0; normals.push_back({0.0, 1.0}); }
      if (p.y >= hi) { p.y = hi; normals.push_back({0.0, -1.0}); }
      wall = !normals.empty();
      bool block = false;
      if (tr.block_box && t > block_start && overlaps(p, s, *tr.block_box)) {
        normals.push_back(resolve_block(prev, p, v, s, *tr.block_box));
        if (overlaps(p, s, *tr.block_box)) throw std::logic_error("trajectory: block contact left an overlap");
        block = true;
      }
      if (block) tr.events.push_back({t, EventKind::Block});
      if (wall) tr.events.push_back({t, EventKind::Wall});
      if (!normals.empty()) v = bounce(v, normals, cfg, rng);
    }
    if (t == block_start) tr.block_box = place_block(p, cfg, rng);
    tr.positions.push_back(p);
    tr.velocities.push_back(v);
  }
  return tr;
}

Trajectory synth_trajectory(const M3soConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  const double hi = cfg.box_size - cfg.sprite_size;
  std::uniform_real_distribution<double> pos(0.0, hi);
  std::uniform_real_distribution<double> heading(0.0, 2.0 * std::numbers::pi);
  const Vec2 start{pos(rng), pos(rng)};
  const double a = heading(rng);
  return simulate(cfg, start, {cfg.speed * std::cos(a), cfg.speed * std::sin(a)}, rng);
}

Video render_frames(const Trajectory& traj, const Sprite& sprite, int box_size, int block_start) {
  if (sprite.size <= 0 || sprite.size > box_size) throw std::invalid_argument("sprite: does not fit the box");
  Video v{traj.length(), box_size, box_size, {}};
  v.pixels.assign(static_cast<std::size_t>(v.frames) * box_size * box_size, 0.0);
  for (int t = 0; t < v.frames; ++t) {
    auto f = v.frame(t);
    if (traj.block_box && t >= block_start) {
      const Box& b = *traj.block_box;
      if (b.x < 0 || b.y < 0 || b.x + b.w > box_size || b.y + b.h > box_size) {
        throw std::invalid_argument("block_box: outside the frame");
      }
      for (int y = b.y; y < b.y + b.h; ++y) {
        for (int x = b.x; x < b.x + b.w; ++x) f[static_cast<std::size_t>(y * box_size + x)] = 1.0;
      }
    }
    const long rx = std::lround(traj.positions[static_cast<std::size_t>(t)].x);
    const long ry = std::lround(traj.positions[static_cast<std::size_t>(t)].y);
    if (rx < 0 || ry < 0 || rx + sprite.size > box_size || ry + sprite.size > box_size) {
      throw std::invalid_argument("position: sprite out of bounds at frame " + std::to_string(t));
    }
    for (int y = 0; y < sprite.size; ++y) {
      for (int x = 0; x < sprite.size; ++x) {
        const double a = sprite.alpha[static_cast<std::size_t>(y * sprite.size + x)];
        double& px = f[static_cast<std::size_t>((ry + y) * box_size + rx + x)];
        px = a + (1.0 - a) * px;
      }
    }
  }
  return v;
}

double corner_distance(const Vec2& top_left, int sprite_size, int box_size) {
  const double cx = top_left.x + sprite_size / 2.0;
  const double cy = top_left.y + sprite_size / 2.0;
  return std::hypot(cx, box_size - cy);
}

double tone_amplitude(double distance, const M3soConfig& cfg) {
  const double d0 = cfg.box_size / 2.0;
  return cfg.a_max * d0 / (d0 + distance);
}

std::vector<double> synth_audio(const Trajectory& traj, const M3soConfig& cfg, int digit) {
  const int S = cfg.samples_per_frame();
  std::vector<double> out(static_cast<std::size_t>(traj.length()) * static_cast<std::size_t>(S));
  double phase = 0.0;
  const double two_pi = 2.0 * std::numbers::pi;
  for (int t = 0; t < traj.length(); ++t) {
    double f = cfg.carrier_hz(digit);
    if (auto k = traj.event_at(t)) f = *k == EventKind::Block ? cfg.f_block : cfg.f_wall;
    const double amp = tone_amplitude(corner_distance(traj.positions[static_cast<std::size_t>(t)], traj.sprite_size,
                                                      cfg.box_size), cfg);
    double* seg = out.data() + static_cast<std::size_t>(t) * static_cast<std::size_t>(S);
    double ss = 0.0;
    for (int n = 0; n < S; ++n) {
      seg[n] = std::sin(phase);
      ss += seg[n] * seg[n];
      phase = std::fmod(phase + two_pi * f / cfg.audio_rate, two_pi);
    }
    // Constant envelope per frame, normalized so the segment RMS is exactly amp / sqrt(2).
    const double gain = amp / std::sqrt(2.0) / std::sqrt(ss / S);
    for (int n = 0; n < S; ++n) seg[n] = std::clamp(seg[n] * gain, -1.0, 1.0);
  }
  return out;
}

Clip generate_clip(const M3soConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  int digit = cfg.digit_class;
  if (digit < 0) digit = std::uniform_int_distribution<int>(0, 9)(rng);
  const Sprite sprite = cfg.sprite_source == SpriteSource::Idx
                            ? idx_sprite(cfg.idx_images, cfg.idx_labels, digit, cfg.sprite_size, rng)
                            : procedural_sprite(digit, cfg.sprite_size);
  Trajectory tr = synth_trajectory(cfg, rng);
  Clip c;
  c.video = render_frames(tr, sprite, cfg.box_size, cfg.block_enabled ? cfg.block_frame - 1 : 0);
  c.audio = synth_audio(tr, cfg, digit);
  c.events = tr.events;
  c.block_box = tr.block_box;
  c.digit = digit;
  c.seed = seed;
  return c;
}

Video quantize(const Video& video) {
  Video q = video;
  for (double& p : q.pixels) p = std::round(255.0 * std::clamp(p, 0.0, 1.0)) / 255.0;
  return q;
}

void write_video(const std::filesystem::path& path, const Video& video) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  f.write("M3SO", 4);
  f.put(1);
  put_u32(f, static_cast<std::uint32_t>(video.frames));
  put_u32(f, static_cast<std::uint32_t>(video.height));
  put_u32(f, static_cast<std::uint32_t>(video.width));
  std::string payload(video.pixels.size(), '\0');
  for (std::size_t i = 0; i < payload.size(); ++i) {
    payload[i] = static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * std::clamp(video.pixels[i], 0.0, 1.0))));
  }
  f.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!f) throw std::runtime_error("write failed for " + path.string());
}

Video read_video(const std::filesystem::path& path) {
  const std::string s = slurp(path);
  if (s.size() < 17 || s.compare(0, 4, "M3SO") != 0) throw std::runtime_error("clip: bad magic in " + path.string());
  if (s[4] != 1) throw std::runtime_error("clip: unsupported version in " + path.string());
  Video v{static_cast<int>(le_u32(s, 5)), static_cast<int>(le_u32(s, 9)), static_cast<int>(le_u32(s, 13)), {}};
  const std::size_t n = static_cast<std::size_t>(v.frames) * v.height * v.width;
  if (s.size() != 17 + n) throw std::runtime_error("clip: payload size mismatch in " + path.string());
  v.pixels.resize(n);
  for (std::size_t i = 0; i < n; ++i) v.pixels[i] = static_cast<unsigned char>(s[17 + i]) / 255.0;
  return v;
}

void write_wav(const std::filesystem::path& path, std::span<const double> samples, int rate) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  const auto data_bytes = static_cast<std::uint32_t>(samples.size() * 2);
  f.write("RIFF", 4);
  put_u32(f, 36 + data_bytes);
  f.write("WAVEfmt ", 8);
  put_u32(f, 16);
  put_u16(f, 1);  // PCM
  put_u16(f, 1);  // mono
  put_u32(f, static_cast<std::uint32_t>(rate));
  put_u32(f, static_cast<std::uint32_t>(rate) * 2);
  put_u16(f, 2);
  put_u16(f, 16);
  f.write("data", 4);
  put_u32(f, data_bytes);
  for (double x : samples) {
    const auto q = static_cast<std::int16_t>(std::lround(std::clamp(x, -1.0, 1.0) * 32767.0));
    put_u16(f, static_cast<std::uint16_t>(q));
  }
  if (!f) throw std::runtime_error("write failed for " + path.string());
}

std::vector<double> read_wav(const std::filesystem::path& path, int* rate) {
  const std::string s = slurp(path);
  if (s.size() < 12 || s.compare(0, 4, "RIFF") != 0 || s.compare(8, 4, "WAVE") != 0) {
    throw std::runtime_error("wav: not a RIFF/WAVE file: " + path.string());
  }
  std::size_t at = 12;
  bool fmt_ok = false;
  while (at + 8 <= s.size()) {
    const std::string id = s.substr(at, 4);
    const std::uint32_t len = le_u32(s, at + 4);
    const std::size_t body = at + 8;
    if (body + len > s.size()) throw std::runtime_error("wav: truncated chunk in " + path.string());
    if (id == "fmt ") {
      const auto fmt = static_cast<std::uint16_t>(le_u32(s, body) & 0xffff);
      const auto channels = static_cast<std::uint16_t>(le_u32(s, body) >> 16);
      const auto bits = static_cast<std::uint16_t>(le_u32(s, body + 12) >> 16);
      if (fmt != 1 || channels != 1 || bits != 16) throw std::runtime_error("wav: only mono 16-bit PCM is supported");
      if (rate) *rate = static_cast<int>(le_u32(s, body + 4));
      fmt_ok = true;
    } else if (id == "data") {
      if (!fmt_ok) throw std::runtime_error("wav: data before fmt chunk");
      std::vector<double> out(len / 2);
      for (std::size_t i = 0; i < out.size(); ++i) {
        const auto lo = static_cast<unsigned char>(s[body + 2 * i]);
        const auto hi = static_cast<unsigned char>(s[body + 2 * i + 1]);
        out[i] = static_cast<std::int16_t>(static_cast<std::uint16_t>(lo | (hi << 8))) / 32767.0;
      }
      return out;
    }
    at = body + len + (len & 1u);
  }
  throw std::runtime_error("wav: no data chunk in " + path.string());
}

std::string to_string(EventKind kind) { return kind == EventKind::Block ? "block" : "wall"; }

std::uint64_t split_offset(const std::string& split) {
  if (split == "train") return 0;
  if (split == "val") return 1'000'000;
  if (split == "test") return 2'000'000;
  throw std::invalid_argument("split: unknown split '" + split + "'");
}

nlohmann::json generate_dataset(const M3soConfig& cfg, SplitCounts counts, const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  cfg.validate();
  if (counts.train < 0 || counts.val < 0 || counts.test < 0) throw std::invalid_argument("counts: must be non-negative");
  fs::create_directories(out_dir);
  const fs::path marker = out_dir / ".incomplete";
  std::ofstream(marker) << "generation in progress\n";
  std::vector<fs::path> created;
  nlohmann::json all = nlohmann::json::object();
  try {
    for (const auto& [split, n] : {std::pair<std::string, int>{"train", counts.train}, {"val", counts.val},
                                   {"test", counts.test}}) {
      const fs::path dir = out_dir / split;
      if (!fs::exists(dir)) created.push_back(dir);
      fs::create_directories(dir);
      nlohmann::json m;
      m["split"] = split;
      m["master_seed"] = cfg.seed;
      m["split_offset"] = split_offset(split);
      m["origin"] = "lower-left";
      m["config"] = cfg;
      m["clips"] = nlohmann::json::array();
      for (int i = 0; i < n; ++i) {
        const std::uint64_t seed = cfg.seed + split_offset(split) + static_cast<std::uint64_t>(i);
        const Clip c = generate_clip(cfg, seed);
        char stem[32];
        std::snprintf(stem, sizeof stem, "clip_%05d", i);
        write_video(dir / (std::string(stem) + ".m3so"), c.video);
        write_wav(dir / (std::string(stem) + ".wav"), c.audio, cfg.audio_rate);
        nlohmann::json events = nlohmann::json::array();
        for (const Event& e : c.events) events.push_back({e.frame, to_string(e.kind)});
        m["clips"].push_back({{"index", i},
                              {"seed", seed},
                              {"digit", c.digit},
                              {"video", std::string(stem) + ".m3so"},
                              {"audio", std::string(stem) + ".wav"},
                              {"block_box", box_json(c.block_box)},
                              {"events", events}});
      }
      std::ofstream mf(dir / "manifest.json");
      mf << m.dump(2) << '\n';
      if (!mf) throw std::runtime_error("write failed for " + (dir / "manifest.json").string());
      all[split] = std::move(m);
    }
  } catch (...) {
    std::error_code ec;
    for (const auto& d : created) fs::remove_all(d, ec);
    fs::remove(marker, ec);
    throw;
  }
  fs::remove(marker);
  return all;
}

namespace {

nlohmann::json read_manifest(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw std::runtime_error("dataset: missing manifest " + (dir / "manifest.json").string());
  try {
    return nlohmann::json::parse(mf);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("dataset: malformed manifest: ") + e.what());
  }
}

}  // namespace

M3soConfig load_split_config(const std::filesystem::path& root, const std::string& split) {
  const nlohmann::json m = read_manifest(root / split);
  M3soConfig cfg;
  from_json(m.at("config"), cfg);
  return cfg;
}

std::vector<Clip> load_split(const std::filesystem::path& root, const std::string& split, int limit) {
  const auto dir = root / split;
  const nlohmann::json m = read_manifest(dir);
  std::vector<Clip> clips;
  for (const auto& e : m.at("clips")) {
    if (limit >= 0 && static_cast<int>(clips.size()) >= limit) break;
    Clip c;
    c.video = read_video(dir / e.at("video").get<std::string>());
    c.audio = read_wav(dir / e.at("audio").get<std::string>());
    c.digit = e.at("digit").get<int>();
    c.seed = e.at("seed").get<std::uint64_t>();
    if (!e.at("block_box").is_null()) {
      const auto b = e.at("block_box").get<std::vector<int>>();
      c.block_box = Box{b.at(0), b.at(1), b.at(2), b.at(3)};
    }
    for (const auto& ev : e.at("events")) {
      c.events.push_back({ev.at(0).get<int>(), ev.at(1).get<std::string>() == "block" ? EventKind::Block : EventKind::Wall});
    }
    clips.push_back(std::move(c));
  }
  return clips;
}

}  // namespace avf::m3so
