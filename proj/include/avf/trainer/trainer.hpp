#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>

#include "avf/avfeat/dataset.hpp"
#include "avf/common/json_fields.hpp"
#include "avf/diffcore/adam.hpp"
#include "avf/net/net.hpp"
#include "avf/objective/objective.hpp"

namespace avf::train {

using objective::LossBreakdown;

struct TeacherForcing {
  bool enabled = false;
  double p = 0.5;
  int warmup = 100;
};

AVF_JSON_FIELDS(TeacherForcing, enabled, p, warmup)

struct TrainConfig {
  double lr = 2e-3;
  double beta = 1e-4;
  double gamma0 = 1e-4;
  int gamma_step_epochs = 300;
  double gamma_factor = 10.0;
  int epochs = 600;
  int batch_size = 16;
  int seen = 5;    // F
  int frames = 20; // T
  TeacherForcing teacher_forcing;
  double grad_clip = 5.0;
  std::uint64_t seed = 0;
  int val_every = 10;    // epochs between validation passes, 0 disables
  int val_k = 10;
  int val_clips = 16;
  int dump_every = 0;    // epochs between sample dumps, 0 disables
  int checkpoint_every = 1;

  void validate(const net::NetConfig& net) const;
};

AVF_JSON_FIELDS(TrainConfig, lr, beta, gamma0, gamma_step_epochs, gamma_factor, epochs, batch_size, seen, frames,
                teacher_forcing, grad_clip, seed, val_every, val_k, val_clips, dump_every, checkpoint_every)

double gamma_schedule(int epoch, const TrainConfig& cfg);
/// True when the step feeds ground-truth frames to the prediction network.
bool teacher_gate(int epoch, std::mt19937_64& rng, const TrainConfig& cfg);

struct TrainState {
  diff::ParamStore gen;
  diff::ParamStore disc;
  diff::AdamState gen_adam;
  diff::AdamState disc_adam;
  int epoch = 0;          // completed epochs
  std::int64_t step = 0;  // completed steps
  double best_val = -1.0;
  int best_epoch = -1;
};

TrainState init_state(const net::NetConfig& net, const TrainConfig& cfg);

/// Random draws for one step, derived from (seed, step) only.
struct StepDraws {
  diff::Tensor noise;   // [T, N, z]
  int t = 0;            // discriminated frame, 1-based in [F+1, T]
  int t_mismatch = 0;   // audio window centre, != t
  bool ground_truth = true;
};

StepDraws draw_step(const net::NetConfig& net, const TrainConfig& cfg, int batch, int epoch, std::int64_t step);

/// Context window of frames t-R .. t+k-1 with frame t optionally replaced.
diff::Var context_frames(diff::Tape& tape, const diff::Tensor& frames, int t, const net::NetConfig& net,
                         const diff::Var* center = nullptr, bool roll = false);
diff::Var context_audio(diff::Tape& tape, const diff::Tensor& audio, int t, const net::NetConfig& net, bool roll = false);

struct GeneratorPass {
  net::RolloutResult rollout;
  diff::Var recon, kl;
};

/// Posterior-driven rollout with the training losses.
GeneratorPass generator_forward(net::Pass& ps, const feat::Batch& batch, const TrainConfig& cfg, const StepDraws& draws);

/// The six discriminator scores for frame t. Real terms come from the batch
/// rolled by one clip; the fake frame is scored in its own clip's context.
objective::DiscScores disc_scores(net::Pass& ps, const feat::Batch& batch, const diff::Var& fake, const StepDraws& draws);

struct GeneratorLoss {
  GeneratorPass pass;
  diff::Var adv_g, total;
};

/// recon + beta * kl - gamma * adv_g, with the adversarial term summed over
/// the T - F generated steps. disc must share the generator's tape and is
/// normally frozen.
GeneratorLoss generator_objective(net::Pass& gen, net::Pass& disc, const feat::Batch& batch, const TrainConfig& cfg,
                                  const StepDraws& draws, double gamma);
/// Discriminator loss on a detached fake frame [N, 1, H, W], summed over the T - F steps.
diff::Var discriminator_objective(net::Pass& disc, const feat::Batch& batch, const diff::Tensor& fake,
                                  const TrainConfig& cfg, const StepDraws& draws);

/// One discriminator update then one generator update.
LossBreakdown train_step(TrainState& state, const net::NetConfig& net, const TrainConfig& cfg, const feat::Batch& batch);

/// Per-epoch shuffled clip order, derived from (seed, epoch).
std::vector<int> epoch_order(int clips, int epoch, std::uint64_t seed);

struct RunPaths {
  std::filesystem::path dir;
  std::filesystem::path generator() const { return dir / "generator.ckpt"; }
  std::filesystem::path discriminator() const { return dir / "discriminator.ckpt"; }
  std::filesystem::path state() const { return dir / "state.json"; }
  std::filesystem::path log() const { return dir / "train_log.csv"; }
  std::filesystem::path best() const { return dir / "best"; }
};

void save_state(const RunPaths& paths, const TrainState& state, const net::NetConfig& net, const TrainConfig& cfg);
TrainState load_state(const RunPaths& paths);
bool has_state(const RunPaths& paths);

struct EpochReport {
  int epoch = 0;
  LossBreakdown mean;
  std::optional<double> val_ssim;
};

using EpochCallback = std::function<void(const EpochReport&)>;

/// Trains until cfg.epochs epochs are complete, checkpointing into paths.dir.
/// Resumes from an existing state in paths.dir.
void fit(TrainState& state, const net::NetConfig& net, const TrainConfig& cfg, const feat::Dataset& train,
         const feat::Dataset* val, const RunPaths& paths, const EpochCallback& on_epoch = {});

/// Binary PGM of a [H, W] frame in [0, 1]; parent directories are created.
void write_pgm(const std::filesystem::path& path, const diff::Tensor& frame);

}  // namespace avf::train
