// Acceptance suite: one PASS/FAIL line per criterion.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <iterator>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "../support/kl_oracle.hpp"
#include "../support/net_fixtures.hpp"
#include "../support/op_grad_cases.hpp"
#include "../support/ssim_oracle.hpp"
#include "avf/avfeat/avfeat.hpp"
#include "avf/avfeat/dataset.hpp"
#include "avf/diffcore/checkpoint.hpp"
#include "avf/diffcore/grad_check.hpp"
#include "avf/evalkit/evalkit.hpp"
#include "avf/m3so/m3so.hpp"
#include "avf/objective/objective.hpp"
#include "avf/trainer/trainer.hpp"

namespace fs = std::filesystem;
using avf::diff::ParamStore;
using avf::diff::Tape;
using avf::diff::Tensor;
using avf::diff::Var;
using Clock = std::chrono::steady_clock;

namespace {

// Pinned tolerances and budgets.
constexpr double kGradTolerance = 1e-4;
constexpr double kGradEps = 1e-5;
constexpr double kGradBudgetSeconds = 120.0;
constexpr int kKlPairs = 20;
constexpr int kKlDim = 10;
constexpr int kKlSamples = 1000000;
constexpr double kKlRelTolerance = 0.01;
constexpr int kSyncClips = 100;
constexpr double kAmplitudeSlack = 1e-12;
constexpr int kCausalTrials = 20;
constexpr double kTrendMargin = 0.02;
constexpr double kToyBudgetSeconds = 7200.0;
constexpr int kToyBestOf = 10;
constexpr int kToyTestClips = 100;
constexpr int kDiversityClips = 20;
constexpr int kBlockClips = 100;
constexpr double kMetricTolerance = 1e-10;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

avf::diff::GradCheckOptions grad_opts(int samples, std::uint64_t seed) {
  avf::diff::GradCheckOptions o;
  o.eps = kGradEps;
  o.samples = samples;
  o.seed = seed;
  return o;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

// ---------------------------------------------------------------- 1

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string worst_name;
  int checked = 0;
  auto note = [&](const std::string& name, const avf::diff::GradCheckReport& r) {
    checked += r.checked;
    if (r.checked == 0 || r.max_rel_error > worst || !std::isfinite(r.max_rel_error)) {
      worst = r.checked == 0 ? INFINITY : std::max(worst, r.max_rel_error);
      worst_name = name;
    }
  };
  for (avf::diff::OpKind k : avf::diff::op_catalog()) {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      auto c = avf::testing::make_op_case(k, seed);
      c.options.eps = kGradEps;
      note(std::string(avf::diff::op_name(k)), avf::diff::grad_check(avf::testing::op_case_loss(c), c.inputs, c.options));
    }
  }

  const auto n = avf::testing::tiny_net();
  avf::train::TrainConfig tc;
  tc.seen = 3;
  tc.frames = 6;
  tc.seed = 17;
  avf::train::TrainState s = avf::train::init_state(n, tc);
  const avf::feat::Batch batch{avf::testing::uniform({3, 6, 16, 16}, 4), avf::testing::uniform({3, 6, 4, 3}, 5, 0, 3)};
  const auto draws = avf::train::draw_step(n, tc, 3, 0, 2);
  for (double gamma : {0.0, 0.7}) {
    auto fn = [&](Tape& tape, ParamStore& p) {
      avf::net::Pass gp{n, p, tape, true};
      avf::net::Pass dp{n, s.disc, tape, false, true};
      return avf::train::generator_objective(gp, dp, batch, tc, draws, gamma).total;
    };
    note(gamma == 0.0 ? "elbo" : "generator total", avf::diff::grad_check(fn, s.gen, grad_opts(160, 7)));
  }
  const Tensor fake = avf::testing::uniform({3, 1, 16, 16}, 6);
  auto dfn = [&](Tape& tape, ParamStore& p) {
    avf::net::Pass dp{n, p, tape, true};
    return avf::train::discriminator_objective(dp, batch, fake, tc, draws);
  };
  note("discriminator", avf::diff::grad_check(dfn, s.disc, grad_opts(160, 8)));

  const double elapsed = seconds_since(t0);
  const bool ok = worst < kGradTolerance && elapsed < kGradBudgetSeconds;
  return {ok, std::to_string(avf::diff::op_catalog().size()) + " ops + 3 losses, " + std::to_string(checked) +
                  " coordinates, max rel err " + fmt(worst, 3) + " (" + worst_name + "), " + fmt(elapsed, 3) + " s"};
}

// ---------------------------------------------------------------- 2

Outcome kl_oracle() {
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> g;
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  double worst = 0.0;
  for (int pair = 0; pair < kKlPairs; ++pair) {
    std::vector<double> mq(kKlDim), lq(kKlDim), mp(kKlDim), lp(kKlDim);
    for (int i = 0; i < kKlDim; ++i) {
      mq[static_cast<std::size_t>(i)] = g(rng);
      mp[static_cast<std::size_t>(i)] = g(rng);
      lq[static_cast<std::size_t>(i)] = u(rng);
      lp[static_cast<std::size_t>(i)] = u(rng);
    }
    Tape tape;
    auto row = [&](const std::vector<double>& v) { return tape.constant(Tensor({1, kKlDim}, v)); };
    const double closed = avf::objective::kl_diag_gauss({row(mq), row(lq)}, {row(mp), row(lp)}).value().item();
    const double mc = avf::testing::monte_carlo_kl(mq, lq, mp, lp, kKlSamples, 100 + static_cast<std::uint64_t>(pair));
    worst = std::max(worst, std::abs(closed - mc) / std::abs(mc));
  }
  Tape tape;
  const double half = avf::objective::kl_diag_gauss({tape.constant(Tensor({1, 1}, 1.0)), tape.constant(Tensor({1, 1}, 0.0))},
                                                    {tape.constant(Tensor({1, 1}, 0.0)), tape.constant(Tensor({1, 1}, 0.0))})
                          .value()
                          .item();
  return {worst < kKlRelTolerance && half == 0.5,
          "max rel deviation " + fmt(worst, 3) + " over " + std::to_string(kKlPairs) + " pairs; KL(N(1,1)||N(0,1)) = " +
              fmt(half, 17)};
}

// ---------------------------------------------------------------- 3

Outcome synchrony_suite() {
  avf::m3so::M3soConfig c;
  const avf::feat::StftParams sp;
  const int S = c.samples_per_frame();
  auto bin_of = [&](double hz) { return static_cast<int>(std::lround(hz * sp.nfft / c.audio_rate)); };
  auto peak = [&](const std::vector<double>& audio, int frame) {
    const Tensor col = avf::feat::stft(std::span<const double>(audio).subspan(static_cast<std::size_t>(frame * S), sp.window), sp);
    int best = 0;
    for (int b = 1; b < col.dim(0); ++b) {
      if (col[static_cast<std::size_t>(b * col.dim(1))] > col[static_cast<std::size_t>(best * col.dim(1))]) best = b;
    }
    return best;
  };
  int events = 0, recovered = 0, quiet = 0, false_events = 0;
  long pairs = 0, violations = 0;
  for (int i = 0; i < kSyncClips; ++i) {
    const avf::m3so::Clip clip = avf::m3so::generate_clip(c, static_cast<std::uint64_t>(i));
    // Replays the clip's draws (digit class, then trajectory) to recover sprite positions.
    std::mt19937_64 again(static_cast<std::uint64_t>(i));
    std::uniform_int_distribution<int>(0, 9)(again);
    const avf::m3so::Trajectory traj = avf::m3so::synth_trajectory(c, again);
    const int carrier = bin_of(c.carrier_hz(clip.digit));
    std::vector<std::pair<double, double>> free;  // (distance, rms)
    for (int f = 0; f < clip.video.frames; ++f) {
      const int p = peak(clip.audio, f);
      const auto kind = traj.event_at(f);
      if (kind) {
        ++events;
        const int expected = bin_of(*kind == avf::m3so::EventKind::Block ? c.f_block : c.f_wall);
        if (p != carrier && p == expected) ++recovered;
      } else {
        ++quiet;
        if (p != carrier) ++false_events;
        double ss = 0.0;
        for (int k = 0; k < S; ++k) ss += clip.audio[static_cast<std::size_t>(f * S + k)] * clip.audio[static_cast<std::size_t>(f * S + k)];
        free.emplace_back(avf::m3so::corner_distance(traj.positions[static_cast<std::size_t>(f)], c.sprite_size, c.box_size),
                          std::sqrt(ss / S));
      }
    }
    for (const auto& a : free) {
      for (const auto& b : free) {
        if (a.first < b.first) {
          ++pairs;
          if (a.second + kAmplitudeSlack < b.second) ++violations;
        }
      }
    }
    if (clip.events != traj.events) return {false, "clip " + std::to_string(i) + " events differ from its trajectory"};
  }
  return {events > 0 && recovered == events && false_events == 0 && violations == 0,
          std::to_string(recovered) + "/" + std::to_string(events) + " events recovered, " +
              std::to_string(false_events) + "/" + std::to_string(quiet) + " false events, " +
              std::to_string(violations) + "/" + std::to_string(pairs) + " amplitude order violations"};
}

// ---------------------------------------------------------------- 4

Outcome causality_suite() {
  auto n = avf::testing::tiny_net();
  n.lookahead = 1;
  const int N = 2, T = 8, F = 3;
  int checks = 0, leaks = 0, downstream_changes = 0;
  for (int trial = 0; trial < kCausalTrials; ++trial) {
    const std::uint64_t seed = 300 + static_cast<std::uint64_t>(trial);
    ParamStore gen = avf::net::init_generator(n, seed);
    const Tensor frames = avf::testing::uniform({N, T, 16, 16}, seed + 1);
    const Tensor audio = avf::testing::uniform({N, T, 4, 3}, seed + 2, 0, 3);
    const Tensor noise = avf::testing::normal({T, N, n.z_dim}, seed + 3);
    std::mt19937_64 rng(seed);
    const int t = std::uniform_int_distribution<int>(F + 1, T - 1)(rng);  // 1-based frame to perturb

    auto run = [&](const Tensor& fr, const Tensor& au, const avf::net::RolloutOptions& o) {
      Tape tape;
      avf::net::Pass ps{n, gen, tape, false};
      const avf::net::RolloutInputs in{tape.constant(fr), tape.constant(au), F, tape.constant(noise)};
      std::vector<Tensor> out;
      for (const Var& v : avf::net::rollout(ps, in, o).frames) out.push_back(v.value());
      return out;
    };
    auto perturb = [&](Tensor x, int frame) {
      const std::size_t block = x.numel() / static_cast<std::size_t>(N * T);
      for (int i = 0; i < N; ++i) {
        for (std::size_t k = 0; k < block; ++k) x[(static_cast<std::size_t>(i * T + frame - 1)) * block + k] += 0.37;
      }
      return x;
    };
    // outputs[j] is the prediction of frame F + 1 + j
    auto compare = [&](const std::vector<Tensor>& a, const std::vector<Tensor>& b, int up_to) {
      for (int s = F + 1; s <= T; ++s) {
        const double d = avf::testing::max_abs_diff(a[static_cast<std::size_t>(s - F - 1)], b[static_cast<std::size_t>(s - F - 1)]);
        if (s <= up_to) {
          ++checks;
          if (d != 0.0) ++leaks;
        } else if (d != 0.0) {
          ++downstream_changes;
        }
      }
    };
    for (const auto& mode : {avf::net::RolloutOptions::infer(), avf::net::RolloutOptions::infer_real_feed()}) {
      const auto base = run(frames, audio, mode);
      compare(base, run(perturb(frames, t), audio, mode), t);
      compare(base, run(frames, perturb(audio, t + 1), mode), t);
    }
  }
  return {leaks == 0 && downstream_changes > 0,
          std::to_string(leaks) + " nonzero diffs in " + std::to_string(checks) + " guarded outputs over " +
              std::to_string(kCausalTrials) + " trials (" + std::to_string(downstream_changes) +
              " later outputs changed)"};
}

// ---------------------------------------------------------------- 5, 6, 7

struct ToySpec {
  std::string name;
  bool block = false;
  int train_clips = 500;
  int val_clips = 32;
  int epochs = 0;
};

avf::m3so::M3soConfig toy_data_config(bool block) {
  avf::m3so::M3soConfig c;
  c.box_size = 32;
  c.sprite_size = 12;
  c.frames_per_clip = 20;
  c.block_enabled = block;
  c.block_frame = 3;
  c.block_size = 6;
  c.seed = block ? 7 : 5;
  return c;
}

avf::net::NetConfig toy_net() {
  avf::net::NetConfig c;
  c.frame_size = 32;
  c.enc_channels = {8, 16};
  c.code_dim = 32;
  c.z_dim = 4;
  c.hidden = 48;
  c.latent_hidden = 32;
  c.heads = 2;
  c.ff_dim = 32;
  c.max_len = 32;
  c.disc_channels = {4, 8};
  c.disc_feat = 16;
  c.disc_audio = 8;
  c.disc_hidden = 16;
  return c;
}

avf::train::TrainConfig toy_train(int epochs) {
  avf::train::TrainConfig t;
  t.seen = 5;
  t.frames = 20;
  t.epochs = epochs;
  t.batch_size = 16;
  t.teacher_forcing = {true, 0.5, 5};
  t.val_every = 10;
  t.val_k = 5;
  t.val_clips = 16;
  t.seed = 1;
  return t;
}

avf::feat::Dataset toy_split(const avf::m3so::M3soConfig& c, const std::string& split, int count) {
  std::vector<avf::m3so::Clip> clips;
  const std::uint64_t base = c.seed * 10000000ULL + avf::m3so::split_offset(split);
  for (int i = 0; i < count; ++i) clips.push_back(avf::m3so::generate_clip(c, base + static_cast<std::uint64_t>(i)));
  avf::feat::Dataset d = avf::feat::make_dataset(clips, c.frames_per_clip, c.audio_rate, c.fps, {});
  return d;
}

struct ToyModel {
  avf::net::NetConfig net;
  avf::train::TrainConfig train;
  ParamStore gen;
  double seconds = 0.0;
  int epochs = 0;
};

// Trains (or resumes) a toy model under dir and returns its best-validation generator.
ToyModel train_toy(const ToySpec& spec, const fs::path& dir) {
  const auto t0 = Clock::now();
  const auto data_cfg = toy_data_config(spec.block);
  ToyModel m{toy_net(), toy_train(spec.epochs), ParamStore(0), 0.0, 0};
  const auto train = toy_split(data_cfg, "train", spec.train_clips);
  const auto val = toy_split(data_cfg, "val", spec.val_clips);
  m.net.audio_bins = train.bins;
  m.net.audio_cols = train.cols;
  const avf::train::RunPaths paths{dir};
  avf::train::TrainState state = avf::train::init_state(m.net, m.train);
  std::cout << "  [" << spec.name << "] training " << spec.epochs << " epochs on " << train.count() << " clips"
            << std::endl;
  avf::train::fit(state, m.net, m.train, train, &val, paths, [&](const avf::train::EpochReport& r) {
    if ((r.epoch + 1) % 10 == 0 || r.val_ssim) {
      std::cout << "  [" << spec.name << "] epoch " << r.epoch + 1 << " recon " << fmt(r.mean.recon) << " kl "
                << fmt(r.mean.kl);
      if (r.val_ssim) std::cout << " val_ssim " << fmt(*r.val_ssim);
      std::cout << " (" << fmt(seconds_since(t0), 4) << " s)" << std::endl;
    }
  });
  const fs::path best = paths.best() / "generator.ckpt";
  m.gen = avf::diff::load_checkpoint(fs::exists(best) ? best : paths.generator()).params;
  m.seconds = seconds_since(t0);
  m.epochs = state.epoch;
  return m;
}

struct ToyContext {
  fs::path workdir;
  int nb_epochs = 0;
  int block_epochs = 0;
  std::optional<ToyModel> nb, block;

  ToyModel& nb_model() {
    if (!nb) nb = train_toy({"nb", false, 500, 32, nb_epochs}, workdir / "toy_nb");
    return *nb;
  }
  ToyModel& block_model() {
    if (!block) block = train_toy({"block", true, 300, 32, block_epochs}, workdir / "toy_block");
    return *block;
  }
};

Outcome learning_trend(ToyContext& ctx) {
  ToyModel& m = ctx.nb_model();
  const auto t0 = Clock::now();
  const auto test = toy_split(toy_data_config(false), "test", kToyTestClips);
  avf::eval::EvalOptions o;
  o.sample = {m.train.seen, kToyBestOf, 99, 32};
  const auto rep = avf::eval::evaluate(m.net, m.gen, test, o);
  double blank = 0.0;
  for (const auto& s : test.samples) {
    const Tensor zero({test.size, test.size}, 0.0);
    for (const Tensor& f : avf::eval::frames_of(s.frames, m.train.seen + 1, m.train.frames)) blank += avf::eval::ssim(zero, f);
  }
  blank /= static_cast<double>(test.count() * (m.train.frames - m.train.seen));
  const double total = m.seconds + seconds_since(t0);
  const double first = rep.ssim.front(), first_copy = rep.copy_last_ssim.front();
  const double avg = avf::eval::mean(rep.ssim), avg_copy = avf::eval::mean(rep.copy_last_ssim);
  const bool ok = first > first_copy && avg - avg_copy >= kTrendMargin && total <= kToyBudgetSeconds;
  return {ok, "best-of-" + std::to_string(kToyBestOf) + " SSIM F+1 " + fmt(first) + " vs copy-last " + fmt(first_copy) +
                  ", mean " + fmt(avg) + " vs " + fmt(avg_copy) + " (margin " + fmt(avg - avg_copy, 3) +
                  "; all-black frames score " + fmt(blank) + "), " + std::to_string(m.epochs) + " epochs, " +
                  fmt(total, 4) + " s"};
}

Outcome diversity_trend(ToyContext& ctx) {
  ToyModel& m = ctx.nb_model();
  const std::vector<int> ks = {1, 2, 5, 10, 20, 50, 100};
  const auto test = toy_split(toy_data_config(false), "test", kDiversityClips);
  avf::eval::EvalOptions o;
  o.sample = {m.train.seen, 1, 123, 50};
  o.diversity_ks = ks;
  const auto rep = avf::eval::evaluate(m.net, m.gen, test, o);
  const auto& d = rep.diversity;
  bool monotone = true;
  for (std::size_t i = 1; i < d.inter.size(); ++i) monotone = monotone && d.inter[i] >= d.inter[i - 1];
  const std::optional<double> intra2 = d.intra[1], intra100 = d.intra.back();
  std::string inter;
  for (std::size_t i = 0; i < d.inter.size(); ++i) inter += (i ? " " : "") + fmt(d.inter[i]);
  const bool ok = monotone && intra2 && intra100 && *intra100 < *intra2;
  return {ok, "inter(K) for K = 1 2 5 10 20 50 100: [" + inter + "], intra(2) " + (intra2 ? fmt(*intra2, 7) : "n/a") +
                  ", intra(100) " + (intra100 ? fmt(*intra100, 7) : "n/a")};
}

// Mean IoU of a uniformly placed size x size box against truth, over all placements.
double random_box_iou(const avf::eval::BoxRegion& truth, int box, int size) {
  double total = 0.0;
  int count = 0;
  for (int y = 0; y + size <= box; ++y) {
    for (int x = 0; x + size <= box; ++x, ++count) total += avf::eval::iou({x, y, size, size}, truth);
  }
  return total / count;
}

Outcome block_localization(ToyContext& ctx) {
  const auto cfg = toy_data_config(true);
  const auto clips = toy_split(cfg, "test", kBlockClips);
  double truth_iou = 0.0;
  int with_block = 0;
  for (const auto& s : clips.samples) {
    if (!s.block_box) continue;
    ++with_block;
    const avf::m3so::Box& b = *s.block_box;
    const auto det = avf::eval::locate_block(avf::eval::frames_of(s.frames, clips.frames, clips.frames).front(), cfg.block_size);
    truth_iou += avf::eval::detection_iou(det, {b.x, b.y, b.w, b.h});
  }
  truth_iou /= std::max(1, with_block);

  ToyModel& m = ctx.block_model();
  avf::eval::EvalOptions o;
  o.sample = {m.train.seen, kToyBestOf, 77, 32};
  o.block_size = cfg.block_size;
  const auto rep = avf::eval::evaluate(m.net, m.gen, clips, o);
  double baseline = 0.0;
  for (const auto& s : clips.samples) {
    if (s.block_box) baseline += random_box_iou({s.block_box->x, s.block_box->y, s.block_box->w, s.block_box->h}, cfg.box_size, cfg.block_size);
  }
  baseline /= std::max(1, with_block);
  const double model = rep.block_iou ? *rep.block_iou : NAN;
  const bool ok = with_block == kBlockClips && truth_iou == 1.0 && std::isfinite(model) && model > baseline;
  return {ok, "ground truth IoU " + fmt(truth_iou, 6) + " on " + std::to_string(with_block) + " clips; model IoU " +
                  fmt(model) + " vs random placement " + fmt(baseline)};
}

// ---------------------------------------------------------------- 8

Outcome determinism_and_resume(const fs::path& workdir) {
  const auto cfg = [] {
    auto c = toy_data_config(false);
    c.frames_per_clip = 8;
    return c;
  }();
  const auto data = toy_split(cfg, "train", 12);
  const auto val = toy_split(cfg, "val", 4);
  auto net = toy_net();
  net.audio_bins = data.bins;
  net.audio_cols = data.cols;
  avf::train::TrainConfig tc;
  tc.seen = 3;
  tc.frames = 8;
  tc.batch_size = 4;
  tc.epochs = 3;
  tc.val_every = 2;
  tc.val_k = 2;
  tc.val_clips = 4;
  tc.teacher_forcing = {true, 0.5, 1};
  tc.seed = 42;

  auto full_run = [&](const std::string& name, int stop_after) {
    const avf::train::RunPaths p{workdir / name};
    fs::remove_all(p.dir);
    if (stop_after > 0) {
      auto first = tc;
      first.epochs = stop_after;
      avf::train::TrainState s = avf::train::init_state(net, tc);
      avf::train::fit(s, net, first, data, &val, p);
    }
    avf::train::TrainState s = avf::train::init_state(net, tc);
    avf::train::fit(s, net, tc, data, &val, p);
    return p;
  };
  const auto a = full_run("det_a", 0), b = full_run("det_b", 0), r = full_run("det_resume", 1);
  auto same = [](const avf::train::RunPaths& x, const avf::train::RunPaths& y) {
    return slurp(x.generator()) == slurp(y.generator()) && slurp(x.discriminator()) == slurp(y.discriminator()) &&
           slurp(x.best() / "generator.ckpt") == slurp(y.best() / "generator.ckpt");
  };
  const bool identical = same(a, b);
  const bool resumed = same(a, r) && slurp(a.log()) == slurp(r.log());
  // Save/load round trip of the final state.
  const auto loaded = avf::train::load_state(a);
  const avf::train::RunPaths copy{workdir / "det_copy"};
  fs::remove_all(copy.dir);
  avf::train::save_state(copy, loaded, net, tc);
  const bool roundtrip = slurp(copy.generator()) == slurp(a.generator()) && slurp(copy.discriminator()) == slurp(a.discriminator());
  for (const auto& p : {a.dir, b.dir, r.dir, copy.dir}) fs::remove_all(p);
  return {identical && resumed && roundtrip,
          std::string("repeat run ") + (identical ? "bit-identical" : "differs") + ", resumed run " +
              (resumed ? "matches step-for-step" : "diverges") + ", save/load " + (roundtrip ? "exact" : "inexact")};
}

// ---------------------------------------------------------------- 9

Outcome metric_oracles() {
  using namespace avf::eval;
  int failures = 0;
  std::vector<std::string> failed;
  auto check = [&](bool ok, const std::string& what) {
    if (!ok) {
      ++failures;
      failed.push_back(what);
    }
  };
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Tensor a = avf::testing::uniform({24, 24}, 500 + s), b = avf::testing::uniform({24, 24}, 600 + s);
    check(std::abs(ssim(a, a) - 1.0) < kMetricTolerance, "ssim(x,x)");
    check(std::abs(ssim(a, b) - avf::testing::ssim_direct(a, b)) < kMetricTolerance, "ssim direct");
    double se = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) se += (a[i] - b[i]) * (a[i] - b[i]);
    const double m = se / static_cast<double>(a.numel());
    check(std::abs(mse(a, b) - m) < kMetricTolerance, "mse");
    check(std::abs(psnr(a, b) - 10.0 * std::log10(1.0 / m)) < kMetricTolerance, "psnr");
  }
  const Tensor x = avf::testing::uniform({16, 16}, 1);
  check(psnr(x, x) == kPsnrCap, "psnr cap");
  Tensor y = x;
  for (double& v : y.values()) v += 0.1;
  check(std::abs(psnr(x, y) - 20.0) < 1e-9, "psnr 20 dB");

  check(iou({2, 3, 6, 6}, {2, 3, 6, 6}) == 1.0, "iou identical");
  check(iou({0, 0, 4, 4}, {10, 10, 4, 4}) == 0.0, "iou disjoint");
  check(std::abs(iou({0, 0, 4, 4}, {2, 0, 4, 4}) - 1.0 / 3.0) < 1e-15, "iou half");

  {
    Tape tape;
    const Tensor p = avf::testing::uniform({3, 4, 8, 8}, 7), t = avf::testing::uniform({3, 4, 8, 8}, 8);
    double se = 0.0;
    for (std::size_t i = 0; i < p.numel(); ++i) se += (p[i] - t[i]) * (p[i] - t[i]);
    const double got = avf::objective::recon_loss(tape.constant(p), tape.constant(t)).value().item();
    check(std::abs(got - se / 3.0) < kMetricTolerance * se, "recon loss");
  }
  {
    std::vector<Sequence> rollouts;
    for (std::uint64_t r = 0; r < 5; ++r) {
      rollouts.push_back({avf::testing::uniform({16, 16}, 40 + r), avf::testing::uniform({16, 16}, 50 + r)});
    }
    double total = 0.0;
    int pairs = 0;
    for (std::size_t i = 0; i < rollouts.size(); ++i) {
      for (std::size_t j = i + 1; j < rollouts.size(); ++j, ++pairs) {
        total += 0.5 * (avf::testing::ssim_direct(rollouts[i][0], rollouts[j][0]) + avf::testing::ssim_direct(rollouts[i][1], rollouts[j][1]));
      }
    }
    check(std::abs(intra_ssim(rollouts) - total / pairs) < kMetricTolerance, "intra-ssim");
  }
  std::string detail = failures == 0 ? "all oracles agree" : "failed:";
  for (const auto& f : failed) detail += " " + f;
  return {failures == 0, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance suite"};
  std::vector<int> only;
  std::string workdir = (fs::temp_directory_path() / "avf_acceptance").string();
  bool keep = false;
  ToyContext toy;
  toy.nb_epochs = 60;
  toy.block_epochs = 30;
  app.add_option("--only", only, "Criteria to run (default: all)")->delimiter(',');
  app.add_option("--workdir", workdir, "Scratch directory for toy training runs");
  app.add_flag("--keep", keep, "Reuse completed toy runs found in the work directory");
  app.add_option("--nb-epochs", toy.nb_epochs, "Epochs for the no-block toy model");
  app.add_option("--block-epochs", toy.block_epochs, "Epochs for the block toy model");
  CLI11_PARSE(app, argc, argv);

  if (!keep) fs::remove_all(workdir);
  fs::create_directories(workdir);
  toy.workdir = workdir;

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient suite", gradient_suite},
      {"KL oracle", kl_oracle},
      {"M3SO synchrony", synchrony_suite},
      {"causality", causality_suite},
      {"desk-scale learning trend", [&] { return learning_trend(toy); }},
      {"diversity trend", [&] { return diversity_trend(toy); }},
      {"block localization", [&] { return block_localization(toy); }},
      {"determinism and persistence", [&] { return determinism_and_resume(workdir); }},
      {"metric oracles", metric_oracles},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    if (!o.pass) ++failed;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << id << "] " << criteria[i].first << ": " << o.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
