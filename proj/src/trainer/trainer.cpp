#include "avf/trainer/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "avf/diffcore/checkpoint.hpp"
#include "avf/diffcore/ops.hpp"
#include "avf/evalkit/evalkit.hpp"

namespace avf::train {
namespace {

using namespace diff;
namespace fs = std::filesystem;

std::mt19937_64 derived_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t tag) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(tag)};
  return std::mt19937_64(seq);
}

// Clip i takes the contents of clip (i + 1) mod N.
Tensor roll_batch(const Tensor& t) {
  const int n = t.dim(0);
  const std::size_t stride = t.numel() / static_cast<std::size_t>(n);
  Tensor out(t.shape());
  for (int i = 0; i < n; ++i) {
    std::copy_n(t.data() + static_cast<std::size_t>((i + 1) % n) * stride, stride, out.data() + static_cast<std::size_t>(i) * stride);
  }
  return out;
}

Var window(Tape& tape, const Tensor& src, int t, const net::NetConfig& net, bool roll) {
  const int start = t - net.history;
  const int len = net.history + net.lookahead;
  if (start < 1 || start + len - 1 > src.dim(1)) throw std::invalid_argument("context: window outside 1..T");
  return slice(tape.constant(roll ? roll_batch(src) : src), 1, start - 1, len);
}

struct FakeScores {
  Var std_score, md, mismatch;
};

FakeScores fake_scores(net::Pass& ps, const feat::Batch& batch, const Var& fake, const StepDraws& d) {
  const Var ctx = context_frames(ps.tape, batch.frames, d.t, ps.cfg, &fake);
  return {net::discriminate_std(ps, fake), net::discriminate_seq(ps, ctx, context_audio(ps.tape, batch.audio, d.t, ps.cfg)),
          net::discriminate_seq(ps, ctx, context_audio(ps.tape, batch.audio, d.t_mismatch, ps.cfg))};
}

void require_finite(double v, const char* term, std::int64_t step) {
  if (!std::isfinite(v)) {
    throw std::runtime_error("non-finite " + std::string(term) + " loss at step " + std::to_string(step) + "; step aborted");
  }
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    f << text;
    if (!f) throw std::runtime_error("cannot write " + tmp.string());
  }
  fs::rename(tmp, path);
}

void check_params(const ParamStore& s, const char* which, int epoch) {
  for (const auto& e : s.entries()) {
    if (!e.value.all_finite()) {
      throw std::runtime_error(std::string(which) + " parameter " + e.name + " became non-finite in epoch " + std::to_string(epoch));
    }
  }
}

// Keeps the header and rows whose step is at most last_step.
void trim_log(const fs::path& path, std::int64_t last_step) {
  std::ifstream in(path);
  if (!in) return;
  std::ostringstream kept;
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      kept << line << '\n';
      header = false;
      continue;
    }
    const auto a = line.find(','), b = line.find(',', a + 1);
    if (a == std::string::npos || b == std::string::npos) continue;
    if (std::stoll(line.substr(a + 1, b - a - 1)) <= last_step) kept << line << '\n';
  }
  in.close();
  write_text_atomic(path, kept.str());
}

void add_into(LossBreakdown& acc, const LossBreakdown& b) {
  acc.recon += b.recon;
  acc.kl += b.kl;
  acc.adv_g += b.adv_g;
  acc.total_g += b.total_g;
  acc.total_d += b.total_d;
  acc.beta = b.beta;
  acc.gamma = b.gamma;
}

}  // namespace

void TrainConfig::validate(const net::NetConfig& net) const {
  auto need = [](bool ok, const char* field, const std::string& why) {
    if (!ok) throw std::invalid_argument(std::string(field) + ": " + why);
  };
  need(lr >= 0.0 && std::isfinite(lr), "lr", "must be finite and non-negative");
  need(beta >= 0.0, "beta", "must be non-negative");
  need(gamma0 >= 0.0, "gamma0", "must be non-negative");
  need(gamma_step_epochs > 0, "gamma_step_epochs", "must be positive");
  need(gamma_factor >= 1.0, "gamma_factor", "must be at least 1");
  need(epochs >= 0, "epochs", "must be non-negative");
  need(batch_size >= 1, "batch_size", "must be positive");
  need(seen > 0 && seen < frames, "seen", "must satisfy 0 < F < T");
  need(frames <= net.max_len, "frames", "exceeds the network max_len");
  need(seen >= net.history, "seen", "must be at least the discriminator history R");
  need(frames - net.lookahead + 1 - net.history >= 2, "frames", "too short for a mismatched audio window");
  need(teacher_forcing.p >= 0.0 && teacher_forcing.p <= 1.0, "teacher_forcing.p", "must lie in [0, 1]");
  need(teacher_forcing.warmup >= 0, "teacher_forcing.warmup", "must be non-negative");
  need(grad_clip > 0.0, "grad_clip", "must be positive");
  need(val_every >= 0 && dump_every >= 0 && checkpoint_every >= 0, "val_every", "intervals must be non-negative");
  need(val_k >= 1, "val_k", "must be positive");
}

double gamma_schedule(int epoch, const TrainConfig& cfg) {
  if (epoch < 0) throw std::invalid_argument("epoch: must be non-negative");
  return cfg.gamma0 * std::pow(cfg.gamma_factor, epoch / cfg.gamma_step_epochs);
}

bool teacher_gate(int epoch, std::mt19937_64& rng, const TrainConfig& cfg) {
  if (epoch < cfg.teacher_forcing.warmup) return true;
  return std::bernoulli_distribution(cfg.teacher_forcing.p)(rng);
}

TrainState init_state(const net::NetConfig& net, const TrainConfig& cfg) {
  cfg.validate(net);
  TrainState s{net::init_generator(net, cfg.seed), net::init_discriminator(net, cfg.seed + 1), {}, {}, 0, 0, -1.0, -1};
  return s;
}

StepDraws draw_step(const net::NetConfig& net, const TrainConfig& cfg, int batch, int epoch, std::int64_t step) {
  auto rng = derived_rng(cfg.seed, static_cast<std::uint64_t>(step), 0x57e9);
  StepDraws d;
  d.noise = Tensor({cfg.frames, batch, net.z_dim});
  std::normal_distribution<double> g;
  for (double& v : d.noise.values()) v = g(rng);
  const int lo = std::max(cfg.seen + 1, net.history + 1), hi = cfg.frames - net.lookahead + 1;
  if (lo > hi) throw std::invalid_argument("frames: no valid discriminator centre");
  d.t = std::uniform_int_distribution<int>(lo, hi)(rng);
  const int mlo = net.history + 1;
  int m = std::uniform_int_distribution<int>(mlo, hi - 1)(rng);
  d.t_mismatch = m >= d.t ? m + 1 : m;
  d.ground_truth = cfg.teacher_forcing.enabled ? teacher_gate(epoch, rng, cfg) : true;
  return d;
}

Var context_frames(Tape& tape, const Tensor& frames, int t, const net::NetConfig& net, const Var* center, bool roll) {
  const Var w = window(tape, frames, t, net, roll);
  if (!center) return w;
  const int h = net.history, len = net.history + net.lookahead;
  std::vector<Var> parts;
  parts.push_back(slice(w, 1, 0, h));
  parts.push_back(*center);
  if (len - h - 1 > 0) parts.push_back(slice(w, 1, h + 1, len - h - 1));
  return concat(parts, 1);
}

Var context_audio(Tape& tape, const Tensor& audio, int t, const net::NetConfig& net, bool roll) {
  return window(tape, audio, t, net, roll);
}

GeneratorPass generator_forward(net::Pass& ps, const feat::Batch& batch, const TrainConfig& cfg, const StepDraws& draws) {
  const int F = cfg.seen, T = cfg.frames;
  if (batch.frames.dim(1) != T) throw std::invalid_argument("batch: clips have " + std::to_string(batch.frames.dim(1)) + " frames, expected " + std::to_string(T));
  Tape& tape = ps.tape;
  const Var frames = tape.constant(batch.frames);
  net::RolloutInputs in{frames, tape.constant(batch.audio), F, tape.constant(draws.noise)};
  net::RolloutOptions opts = net::RolloutOptions::train();
  opts.feed_generated = !draws.ground_truth;
  GeneratorPass g{net::rollout(ps, in, opts), {}, {}};
  g.recon = objective::recon_loss(g.rollout.stacked(), slice(frames, 1, F, T - F));
  g.kl = objective::kl_sequence(g.rollout.posteriors, g.rollout.priors);
  return g;
}

objective::DiscScores disc_scores(net::Pass& ps, const feat::Batch& batch, const Var& fake, const StepDraws& draws) {
  Tape& tape = ps.tape;
  const int t = draws.t;
  const Var real_ctx = context_frames(tape, batch.frames, t, ps.cfg, nullptr, true);
  const Var real_frame = slice(real_ctx, 1, ps.cfg.history, 1);
  const FakeScores f = fake_scores(ps, batch, fake, draws);
  return {net::discriminate_std(ps, real_frame),
          f.std_score,
          net::discriminate_seq(ps, real_ctx, context_audio(tape, batch.audio, t, ps.cfg, true)),
          net::discriminate_seq(ps, real_ctx, context_audio(tape, batch.audio, draws.t_mismatch, ps.cfg, true)),
          f.md,
          f.mismatch};
}

GeneratorLoss generator_objective(net::Pass& gen, net::Pass& disc, const feat::Batch& batch, const TrainConfig& cfg,
                                  const StepDraws& draws, double gamma) {
  GeneratorLoss out{generator_forward(gen, batch, cfg, draws), {}, {}};
  const Var& fake = out.pass.rollout.frames.at(static_cast<std::size_t>(draws.t - cfg.seen - 1));
  const FakeScores f = fake_scores(disc, batch, fake, draws);
  out.adv_g = scale(objective::generator_adv_term(f.std_score, f.md, f.mismatch), cfg.frames - cfg.seen);
  out.total = objective::generator_total(out.pass.recon, out.pass.kl, out.adv_g, cfg.beta, gamma);
  return out;
}

Var discriminator_objective(net::Pass& disc, const feat::Batch& batch, const Tensor& fake, const TrainConfig& cfg,
                            const StepDraws& draws) {
  const Var f = disc.tape.constant(fake);
  return scale(objective::discriminator_loss(disc_scores(disc, batch, f, draws)), cfg.frames - cfg.seen);
}

LossBreakdown train_step(TrainState& state, const net::NetConfig& net, const TrainConfig& cfg, const feat::Batch& batch) {
  const int n = batch.frames.dim(0);
  const StepDraws draws = draw_step(net, cfg, n, state.epoch, state.step);
  const double gamma = gamma_schedule(state.epoch, cfg);

  Tape gt;
  net::Pass gp{net, state.gen, gt, true};
  GeneratorPass g = generator_forward(gp, batch, cfg, draws);
  require_finite(g.recon.value().item(), "recon", state.step);
  require_finite(g.kl.value().item(), "kl", state.step);
  const Var& fake = g.rollout.frames.at(static_cast<std::size_t>(draws.t - cfg.seen - 1));

  double total_d = 0.0;
  {
    Tape dt;
    net::Pass dp{net, state.disc, dt, true};
    const Var ld = discriminator_objective(dp, batch, fake.value(), cfg, draws);
    total_d = ld.value().item();
    require_finite(total_d, "discriminator", state.step);
    dt.backward(ld);
    GradMap grads = dt.gradients(state.disc);
    clip_global_norm(grads, cfg.grad_clip);
    adam_update(state.disc, grads, state.disc_adam, cfg.lr);
  }

  net::Pass frozen{net, state.disc, gt, false, true};
  const FakeScores f = fake_scores(frozen, batch, fake, draws);
  const Var adv = scale(objective::generator_adv_term(f.std_score, f.md, f.mismatch), cfg.frames - cfg.seen);
  const Var total = objective::generator_total(g.recon, g.kl, adv, cfg.beta, gamma);
  require_finite(total.value().item(), "generator", state.step);
  gt.backward(total);
  GradMap grads = gt.gradients(state.gen);
  clip_global_norm(grads, cfg.grad_clip);
  adam_update(state.gen, grads, state.gen_adam, cfg.lr);
  ++state.step;

  return objective::total_losses({g.recon.value().item(), g.kl.value().item(), adv.value().item(), total_d}, cfg.beta, gamma);
}

std::vector<int> epoch_order(int clips, int epoch, std::uint64_t seed) {
  std::vector<int> order(static_cast<std::size_t>(clips));
  std::iota(order.begin(), order.end(), 0);
  auto rng = derived_rng(seed, static_cast<std::uint64_t>(epoch), 0xe90c);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

void save_state(const RunPaths& paths, const TrainState& state, const net::NetConfig& net, const TrainConfig& cfg) {
  fs::create_directories(paths.dir);
  const nlohmann::json meta = {{"net", net}, {"train", cfg}, {"epoch", state.epoch}, {"step", state.step}};
  nlohmann::json gm = meta, dm = meta;
  gm["kind"] = "generator";
  dm["kind"] = "discriminator";
  save_checkpoint(paths.generator(), state.gen, &state.gen_adam, gm);
  save_checkpoint(paths.discriminator(), state.disc, &state.disc_adam, dm);
  const nlohmann::json st = {{"epoch", state.epoch}, {"step", state.step}, {"best_val", state.best_val}, {"best_epoch", state.best_epoch}};
  write_text_atomic(paths.state(), st.dump(2) + "\n");
}

bool has_state(const RunPaths& paths) {
  return fs::exists(paths.state()) && fs::exists(paths.generator()) && fs::exists(paths.discriminator());
}

TrainState load_state(const RunPaths& paths) {
  std::ifstream f(paths.state());
  if (!f) throw std::runtime_error("missing training state " + paths.state().string());
  nlohmann::json st;
  try {
    st = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed training state: " + std::string(e.what()));
  }
  Checkpoint g = load_checkpoint(paths.generator());
  Checkpoint d = load_checkpoint(paths.discriminator());
  if (!g.adam || !d.adam) throw std::runtime_error("checkpoint lacks optimizer state");
  TrainState s{std::move(g.params), std::move(d.params), std::move(*g.adam), std::move(*d.adam),
               st.at("epoch").get<int>(), st.at("step").get<std::int64_t>(), st.at("best_val").get<double>(),
               st.at("best_epoch").get<int>()};
  return s;
}

void write_pgm(const fs::path& path, const Tensor& frame) {
  const int h = frame.dim(frame.rank() - 2), w = frame.dim(frame.rank() - 1);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  f << "P5\n" << w << ' ' << h << "\n255\n";
  for (std::size_t i = 0; i < static_cast<std::size_t>(h * w); ++i) {
    f.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(frame[i], 0.0, 1.0) * 255.0))));
  }
  if (!f) throw std::runtime_error("cannot write " + path.string());
}

void fit(TrainState& state, const net::NetConfig& net, const TrainConfig& cfg, const feat::Dataset& train,
         const feat::Dataset* val, const RunPaths& paths, const EpochCallback& on_epoch) {
  cfg.validate(net);
  if (train.count() == 0) throw std::invalid_argument("train: empty dataset");
  if (train.frames != cfg.frames) throw std::invalid_argument("frames: dataset has T = " + std::to_string(train.frames));
  if (train.size != net.frame_size || train.bins != net.audio_bins || train.cols != net.audio_cols) {
    throw std::invalid_argument("net: frame or audio shape does not match the dataset");
  }
  fs::create_directories(paths.dir);
  if (has_state(paths)) {
    state = load_state(paths);
    trim_log(paths.log(), state.step);
  }
  const bool fresh_log = !fs::exists(paths.log());
  std::ofstream log(paths.log(), std::ios::app);
  log.precision(10);
  if (fresh_log) log << "epoch,step,recon,kl,adv_g,total_g,total_d\n";

  const int n = train.count();
  const int batch = std::min(cfg.batch_size, n);
  const int batches = n / batch;
  for (int epoch = state.epoch; epoch < cfg.epochs; ++epoch) {
    const auto order = epoch_order(n, epoch, cfg.seed);
    LossBreakdown acc;
    for (int b = 0; b < batches; ++b) {
      const std::span<const int> idx(order.data() + static_cast<std::size_t>(b * batch), static_cast<std::size_t>(batch));
      const LossBreakdown r = train_step(state, net, cfg, feat::gather(train, idx));
      log << epoch << ',' << state.step << ',' << r.recon << ',' << r.kl << ',' << r.adv_g << ',' << r.total_g << ','
          << r.total_d << '\n';
      add_into(acc, r);
    }
    log.flush();
    state.epoch = epoch + 1;
    check_params(state.gen, "generator", epoch);
    check_params(state.disc, "discriminator", epoch);
    EpochReport rep{epoch, acc, std::nullopt};
    for (double* v : {&rep.mean.recon, &rep.mean.kl, &rep.mean.adv_g, &rep.mean.total_g, &rep.mean.total_d}) *v /= batches;

    const bool last = state.epoch == cfg.epochs;
    if (val && cfg.val_every > 0 && (state.epoch % cfg.val_every == 0 || last)) {
      eval::EvalOptions eo;
      eo.sample = {cfg.seen, cfg.val_k, cfg.seed, 32};
      const auto er = eval::evaluate(net, state.gen, *val, eo, cfg.val_clips);
      rep.val_ssim = eval::mean(er.ssim);
      if (*rep.val_ssim > state.best_val) {
        state.best_val = *rep.val_ssim;
        state.best_epoch = epoch;
        fs::create_directories(paths.best());
        save_checkpoint(paths.best() / "generator.ckpt", state.gen, nullptr,
                        {{"net", net}, {"train", cfg}, {"epoch", state.epoch}, {"val_ssim", state.best_val}, {"kind", "generator"}});
      }
    }
    if (cfg.dump_every > 0 && (state.epoch % cfg.dump_every == 0 || last)) {
      const feat::Dataset& src = val ? *val : train;
      const feat::Sample& s = src.samples.front();
      const auto futures = eval::sample_futures(net, state.gen, s.frames, s.audio, {cfg.seen, 1, cfg.seed, 1});
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%04d", state.epoch);
      const fs::path dir = paths.dir / "samples" / name;
      fs::create_directories(dir);
      for (std::size_t i = 0; i < futures[0].size(); ++i) {
        std::snprintf(name, sizeof name, "frame_%03d.pgm", cfg.seen + 1 + static_cast<int>(i));
        write_pgm(dir / name, futures[0][i]);
      }
    }
    if ((cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0) || last) save_state(paths, state, net, cfg);
    if (on_epoch) on_epoch(rep);
  }
}

}  // namespace avf::train
