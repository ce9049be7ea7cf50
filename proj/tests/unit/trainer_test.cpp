#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "../support/net_fixtures.hpp"
#include "../support/toy_data.hpp"
#include "avf/diffcore/checkpoint.hpp"
#include "avf/diffcore/grad_check.hpp"
#include "avf/diffcore/ops.hpp"
#include "avf/trainer/trainer.hpp"

using namespace avf::train;
using avf::diff::ParamStore;
using avf::diff::Tape;
using avf::diff::Tensor;
using avf::testing::uniform;
namespace fs = std::filesystem;

namespace {

TrainConfig tiny_train() {
  TrainConfig c;
  c.seen = 3;
  c.frames = 6;
  c.batch_size = 2;
  c.epochs = 2;
  c.val_every = 0;
  c.seed = 5;
  return c;
}

avf::feat::Dataset noise_dataset(int clips, int T, std::uint64_t seed) {
  avf::feat::Dataset d;
  d.frames = T;
  d.size = 16;
  d.bins = 4;
  d.cols = 3;
  for (int i = 0; i < clips; ++i) {
    d.samples.push_back({uniform({T, 16, 16}, seed + static_cast<std::uint64_t>(i)),
                         uniform({T, 4, 3}, seed + 100 + static_cast<std::uint64_t>(i), 0, 3), {}, 0});
  }
  return d;
}

avf::feat::Batch random_batch(int n, int T, std::uint64_t seed) {
  return {uniform({n, T, 16, 16}, seed), uniform({n, T, 4, 3}, seed + 1, 0, 3)};
}

fs::path fresh_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  return d;
}

bool same_params(const ParamStore& a, const ParamStore& b) {
  for (std::size_t i = 0; i < a.entries().size(); ++i) {
    if (a.entries()[i].trainable && !(a.entries()[i].value == b.entries()[i].value)) return false;
  }
  return true;
}

avf::diff::GradCheckOptions checks(int samples, std::uint64_t seed) {
  avf::diff::GradCheckOptions o;
  o.eps = 1e-5;
  o.samples = samples;
  o.seed = seed;
  return o;
}

}  // namespace

TEST(Schedule, GammaSteps) {
  TrainConfig c;
  EXPECT_EQ(gamma_schedule(0, c), 1e-4);
  EXPECT_EQ(gamma_schedule(299, c), 1e-4);
  EXPECT_NEAR(gamma_schedule(300, c), 1e-3, 1e-18);
  EXPECT_NEAR(gamma_schedule(600, c), 1e-2, 1e-17);
  for (int e = 1; e < 1000; e += 7) EXPECT_GE(gamma_schedule(e, c), gamma_schedule(e - 1, c));
}

TEST(Schedule, TeacherGate) {
  TrainConfig c;
  c.teacher_forcing = {true, 0.0, 100};
  std::mt19937_64 rng(1);
  EXPECT_TRUE(teacher_gate(50, rng, c));
  for (int i = 0; i < 50; ++i) EXPECT_FALSE(teacher_gate(150, rng, c));
  c.teacher_forcing.p = 1.0;
  for (int i = 0; i < 50; ++i) EXPECT_TRUE(teacher_gate(150, rng, c));
}

TEST(Config, RejectsBadSplits) {
  const auto n = avf::testing::tiny_net();
  TrainConfig c = tiny_train();
  c.seen = 6;
  EXPECT_THROW(c.validate(n), std::invalid_argument);
  c = tiny_train();
  c.seen = 1;
  EXPECT_THROW(c.validate(n), std::invalid_argument);
  c = tiny_train();
  c.teacher_forcing.p = 1.5;
  EXPECT_THROW(c.validate(n), std::invalid_argument);
  EXPECT_NO_THROW(tiny_train().validate(n));
}

TEST(Draws, CentreAndMismatchAreValid) {
  const auto n = avf::testing::tiny_net();
  const TrainConfig c = tiny_train();
  for (int s = 0; s < 200; ++s) {
    const auto d = draw_step(n, c, 2, 0, s);
    EXPECT_GE(d.t, c.seen + 1);
    EXPECT_LE(d.t, c.frames);
    EXPECT_NE(d.t, d.t_mismatch);
    EXPECT_GE(d.t_mismatch - n.history, 1);
    EXPECT_LE(d.t_mismatch, c.frames);
    EXPECT_EQ(d.noise.shape(), (avf::diff::Shape{6, 2, n.z_dim}));
  }
  EXPECT_EQ(draw_step(n, c, 2, 0, 7).noise, draw_step(n, c, 2, 0, 7).noise);
}

TEST(Context, CentreFrameReplaced) {
  const auto n = avf::testing::tiny_net();
  const Tensor frames = uniform({2, 6, 16, 16}, 3);
  Tape tape;
  const avf::diff::Var fake = tape.constant(Tensor({2, 1, 16, 16}, 0.25));
  const Tensor ctx = context_frames(tape, frames, 5, n, &fake).value();
  ASSERT_EQ(ctx.shape(), (avf::diff::Shape{2, 3, 16, 16}));
  for (int i = 0; i < 2; ++i) {
    for (int k = 0; k < 256; ++k) {
      EXPECT_EQ(ctx[static_cast<std::size_t>((i * 3 + 0) * 256 + k)], frames[static_cast<std::size_t>((i * 6 + 2) * 256 + k)]);
      EXPECT_EQ(ctx[static_cast<std::size_t>((i * 3 + 2) * 256 + k)], 0.25);
    }
  }
  EXPECT_THROW(context_frames(tape, frames, 2, n), std::invalid_argument);
}

TEST(Step, ZeroLearningRateKeepsParameters) {
  const auto n = avf::testing::tiny_net();
  TrainConfig c = tiny_train();
  c.lr = 0.0;
  TrainState s = init_state(n, c);
  const TrainState before = init_state(n, c);
  train_step(s, n, c, random_batch(2, 6, 9));
  EXPECT_TRUE(same_params(s.gen, before.gen));
  EXPECT_TRUE(same_params(s.disc, before.disc));
  EXPECT_EQ(s.step, 1);
}

TEST(Step, DeterministicForFixedSeed) {
  const auto n = avf::testing::tiny_net();
  const TrainConfig c = tiny_train();
  TrainState a = init_state(n, c), b = init_state(n, c);
  const auto batch = random_batch(2, 6, 10);
  for (int i = 0; i < 3; ++i) {
    const auto la = train_step(a, n, c, batch), lb = train_step(b, n, c, batch);
    EXPECT_EQ(la.recon, lb.recon);
    EXPECT_EQ(la.kl, lb.kl);
    EXPECT_EQ(la.adv_g, lb.adv_g);
    EXPECT_EQ(la.total_d, lb.total_d);
    EXPECT_EQ(la.total_g, lb.total_g);
  }
  EXPECT_TRUE(a.gen == b.gen);
}

TEST(Step, SeparateOptimizerStates) {
  const auto n = avf::testing::tiny_net();
  const TrainConfig c = tiny_train();
  TrainState s = init_state(n, c);
  train_step(s, n, c, random_batch(2, 6, 11));
  EXPECT_EQ(s.gen_adam.step, 1);
  EXPECT_EQ(s.disc_adam.step, 1);
  for (const auto& [name, m] : s.gen_adam.m) EXPECT_EQ(s.disc_adam.m.count(name), 0u) << name;
  EXPECT_TRUE(s.gen_adam.m.count("enc.c0.w"));
  EXPECT_TRUE(s.disc_adam.m.count("dseq.lstm.w"));
}

TEST(Step, GeneratedFeedPathRuns) {
  const auto n = avf::testing::tiny_net();
  TrainConfig c = tiny_train();
  c.teacher_forcing = {true, 0.0, 0};
  TrainState s = init_state(n, c);
  const auto r = train_step(s, n, c, random_batch(2, 6, 12));
  EXPECT_TRUE(std::isfinite(r.total_g));
  EXPECT_FALSE(draw_step(n, c, 2, 0, 0).ground_truth);
}

TEST(Step, NonFiniteLossAborts) {
  const auto n = avf::testing::tiny_net();
  const TrainConfig c = tiny_train();
  TrainState s = init_state(n, c);
  s.gen.at("dec.in.b")[0] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(train_step(s, n, c, random_batch(2, 6, 13)), std::exception);
  EXPECT_EQ(s.step, 0);
  EXPECT_EQ(s.disc_adam.step, 0);
}

TEST(Losses, GeneratorObjectiveGradient) {
  const auto n = avf::testing::tiny_net();
  const TrainConfig c = tiny_train();
  TrainState s = init_state(n, c);
  const auto batch = random_batch(2, 6, 14);
  const auto draws = draw_step(n, c, 2, 0, 3);
  auto fn = [&](Tape& tape, ParamStore& p) {
    avf::net::Pass gp{n, p, tape, true};
    avf::net::Pass dp{n, s.disc, tape, false, true};
    return generator_objective(gp, dp, batch, c, draws, 0.5).total;
  };
  const auto r = avf::diff::grad_check(fn, s.gen, checks(96, 1));
  EXPECT_GT(r.checked, 80);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(Losses, DiscriminatorObjectiveGradient) {
  const auto n = avf::testing::tiny_net();
  const TrainConfig c = tiny_train();
  TrainState s = init_state(n, c);
  const auto batch = random_batch(3, 6, 15);
  const auto draws = draw_step(n, c, 3, 0, 4);
  const Tensor fake = uniform({3, 1, 16, 16}, 16);
  auto fn = [&](Tape& tape, ParamStore& p) {
    avf::net::Pass dp{n, p, tape, true};
    return discriminator_objective(dp, batch, fake, c, draws);
  };
  const auto r = avf::diff::grad_check(fn, s.disc, checks(96, 2));
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(Losses, AdversarialTermReachesGenerator) {
  const auto n = avf::testing::tiny_net();
  const TrainConfig c = tiny_train();
  TrainState s = init_state(n, c);
  const auto batch = random_batch(2, 6, 17);
  const auto draws = draw_step(n, c, 2, 0, 5);
  auto grads = [&](double gamma) {
    ParamStore g = s.gen;
    Tape tape;
    avf::net::Pass gp{n, g, tape, true};
    avf::net::Pass dp{n, s.disc, tape, false, true};
    tape.backward(generator_objective(gp, dp, batch, c, draws, gamma).total);
    return tape.gradients(g);
  };
  const auto a = grads(0.0), b = grads(1.0);
  EXPECT_GT(avf::testing::max_abs_diff(a.at("dec.d0.w"), b.at("dec.d0.w")), 0.0);
  EXPECT_EQ(a.count("dstd.out.w"), 0u);
}

TEST(Fit, CheckpointsLogsAndResumesIdentically) {
  const auto n = avf::testing::tiny_net();
  TrainConfig c = tiny_train();
  c.epochs = 3;
  c.dump_every = 3;
  c.val_every = 3;
  c.val_k = 2;
  c.val_clips = 2;
  const auto data = noise_dataset(5, 6, 20);
  const auto val = noise_dataset(2, 6, 40);

  const RunPaths full{fresh_dir("avf_fit_full")};
  TrainState a = init_state(n, c);
  fit(a, n, c, data, &val, full);
  EXPECT_EQ(a.epoch, 3);
  EXPECT_EQ(a.step, 6);
  EXPECT_TRUE(fs::exists(full.generator()));
  EXPECT_TRUE(fs::exists(full.best() / "generator.ckpt"));
  EXPECT_TRUE(fs::exists(full.dir / "samples" / "epoch_0003" / "frame_004.pgm"));

  const RunPaths part{fresh_dir("avf_fit_part")};
  TrainConfig first = c;
  first.epochs = 1;
  TrainState b = init_state(n, c);
  fit(b, n, first, data, &val, part);
  TrainState resumed = init_state(n, c);
  fit(resumed, n, c, data, &val, part);
  EXPECT_EQ(resumed.step, 6);
  EXPECT_TRUE(resumed.gen == a.gen);
  EXPECT_TRUE(resumed.disc == a.disc);
  EXPECT_TRUE(resumed.gen_adam == a.gen_adam);

  auto read = [](const fs::path& p) {
    std::ifstream f(p);
    return std::string(std::istreambuf_iterator<char>(f), {});
  };
  EXPECT_EQ(read(full.log()), read(part.log()));
  EXPECT_EQ(read(full.generator()), read(part.generator()));
  fs::remove_all(full.dir);
  fs::remove_all(part.dir);
}

TEST(Fit, StateRoundTripsBitExactly) {
  const auto n = avf::testing::tiny_net();
  const TrainConfig c = tiny_train();
  TrainState s = init_state(n, c);
  train_step(s, n, c, random_batch(2, 6, 21));
  const RunPaths p{fresh_dir("avf_state_rt")};
  save_state(p, s, n, c);
  const TrainState r = load_state(p);
  EXPECT_TRUE(r.gen == s.gen);
  EXPECT_TRUE(r.disc_adam == s.disc_adam);
  EXPECT_EQ(r.step, 1);
  const auto meta = avf::diff::load_checkpoint(p.generator()).meta;
  EXPECT_EQ(meta.at("net").at("code_dim").get<int>(), n.code_dim);
  fs::resize_file(p.discriminator(), fs::file_size(p.discriminator()) / 2);
  EXPECT_THROW(load_state(p), std::runtime_error);
  fs::remove_all(p.dir);
}

TEST(Fit, ReconstructionImprovesOnToyClips) {
  const auto m = avf::testing::toy_m3so(8, false);
  const auto data = avf::testing::toy_dataset(m, 20, 500);
  const auto n = avf::testing::small_net();
  TrainConfig c;
  c.seen = 3;
  c.frames = 8;
  c.batch_size = 4;
  c.seed = 3;
  TrainState s = init_state(n, c);
  std::vector<double> recon;
  for (int step = 0; step < 200; ++step) {
    const auto order = epoch_order(data.count(), step / 5, c.seed);
    const std::span<const int> idx(order.data() + (step % 5) * 4, 4);
    s.epoch = step / 5;
    recon.push_back(train_step(s, n, c, avf::feat::gather(data, idx)).recon);
  }
  double start = 0, end = 0;
  for (int i = 0; i < 10; ++i) {
    start += recon[static_cast<std::size_t>(i)] / 10;
    end += recon[recon.size() - 10 + static_cast<std::size_t>(i)] / 10;
  }
  EXPECT_LE(end, 0.7 * start) << start << " -> " << end;
}
