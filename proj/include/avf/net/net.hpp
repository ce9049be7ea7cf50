#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "avf/common/json_fields.hpp"
#include "avf/diffcore/ops.hpp"

// Generator (frame encoder/decoder, prediction LSTM, audio-visual
// transformers, prior/posterior networks) and the two-part discriminator.
namespace avf::net {

using diff::ParamStore;
using diff::Shape;
using diff::Tape;
using diff::Tensor;
using diff::Var;

struct NetConfig {
  int frame_size = 48;
  std::vector<int> enc_channels = {32, 64, 128};
  int code_dim = 128;
  int z_dim = 10;
  int hidden = 256;
  int pn_layers = 2;
  int latent_hidden = 256;
  int heads = 4;
  int tf_layers = 1;
  int ff_dim = 128;
  bool ff_enabled = true;
  int audio_bins = 128;
  int audio_cols = 9;
  double audio_input_scale = 0.02;
  int max_len = 128;
  int history = 2;    // R
  int lookahead = 1;  // k
  std::vector<int> disc_channels = {16, 32};
  int disc_feat = 128;
  int disc_audio = 64;
  int disc_hidden = 256;
  double leaky_slope = 0.2;
  double bn_momentum = 0.1;

  int stages() const { return static_cast<int>(enc_channels.size()); }
  int bottom_size() const { return frame_size >> stages(); }
  int head_dim() const { return code_dim / heads; }
  int audio_size() const { return audio_bins * audio_cols; }
  void validate() const;
};

AVF_JSON_FIELDS(NetConfig, frame_size, enc_channels, code_dim, z_dim, hidden, pn_layers, latent_hidden, heads,
                tf_layers, ff_dim, ff_enabled, audio_bins, audio_cols, audio_input_scale, max_len, history, lookahead,
                disc_channels, disc_feat, disc_audio, disc_hidden, leaky_slope, bn_momentum)

ParamStore init_generator(const NetConfig& cfg, std::uint64_t seed);
ParamStore init_discriminator(const NetConfig& cfg, std::uint64_t seed);

/// Binds a configuration, parameter set and tape for one forward pass.
/// training selects batch statistics (and running-stat updates) for batch
/// norm; frozen reads parameters without tracking their gradients.
struct Pass {
  const NetConfig& cfg;
  ParamStore& params;
  Tape& tape;
  bool training = false;
  bool frozen = false;

  Var p(const std::string& name) const;
};

struct Embedding {
  Var code;                // [N, code_dim]
  std::vector<Var> skips;  // one per encoder stage, finest first
};

struct Gaussian {
  Var mu;       // [N, z]
  Var log_var;  // [N, z]
};

struct LstmStack {
  std::vector<Var> h, c;
};

/// frames [N, 1, H, W].
Embedding encode_frames(Pass& ps, const Var& frames);
/// eta [N, hidden] with skips from the paired encoder pass; returns [N, 1, H, W] in (0, 1).
Var decode_frame(Pass& ps, const Var& eta, const std::vector<Var>& skips);

LstmStack zero_lstm(Pass& ps, int layers, int batch, int width);
/// Two-layer prediction LSTM step on concat(code, z); returns the top hidden state.
Var pn_step(Pass& ps, const Var& input, LstmStack& state);
/// net is "prior" or "post". Input is concat(o_a, visual code).
Gaussian latent_step(Pass& ps, const std::string& net, const Var& audio_code, const Var& visual_code,
                     LstmStack& state);
/// z = mu + exp(log_var / 2) * noise.
Var sample_latent(const Gaussian& g, const Var& noise);

/// Self-attention encoder over seq [N, L, d] (positions already added).
/// Returns [N, L, d], or [N, 1, d] for the last position when last_only.
/// Attention matrices [N * heads, Lq, L] are appended to attention when given.
Var transformer_encode(Pass& ps, const std::string& stream, const Var& seq, bool last_only,
                       std::vector<Tensor>* attention = nullptr);
void add_transformer_params(ParamStore& store, const std::string& stream, const NetConfig& cfg);

/// blocks [N, T, bins, cols] -> codes [N, T, d].
Var audio_codes(Pass& ps, const Var& blocks);
/// Adds position codes 0..L-1 to seq [N, L, d].
Var add_positions(Pass& ps, const Var& seq);

/// frames [N, 1, H, W] -> probability [N, 1].
Var discriminate_std(Pass& ps, const Var& frames);
/// frames [N, R + k, H, W] ordered past..center..future with their audio blocks [N, R + k, bins, cols].
Var discriminate_seq(Pass& ps, const Var& frames, const Var& audio);

enum class LatentSource { Posterior, Prior, Given };

struct RolloutOptions {
  LatentSource latent = LatentSource::Prior;
  bool feed_generated = true;    // prediction input X_{t-1} is the generated frame once t-1 > F
  bool stream_generated = true;  // visual transformer streams see generated frames once past F

  static RolloutOptions train() { return {LatentSource::Posterior, false, false}; }
  static RolloutOptions infer() { return {LatentSource::Prior, true, true}; }
  /// Prior sampling while every input stays the real frame; used to probe causality.
  static RolloutOptions infer_real_feed() { return {LatentSource::Prior, false, false}; }
};

struct RolloutInputs {
  Var frames;    // [N, T, H, W]; only the first F are read when every feed is generated
  Var audio;     // [N, T, bins, cols]
  int seen = 0;  // F
  Var noise;     // [T, N, z] standard normal draws, row t-1 used at step t
};

struct RolloutResult {
  std::vector<Var> frames;  // X^_{F+1..T}, each [N, 1, H, W]
  std::vector<Gaussian> priors;
  std::vector<Gaussian> posteriors;  // empty unless the posterior drove z
  Var stacked() const;               // [N, T - F, H, W]
};

/// Autoregressive generation for t = 2..T. Steps t <= F warm the recurrent
/// state with posterior samples of the seen frames.
RolloutResult rollout(Pass& ps, const RolloutInputs& in, const RolloutOptions& opts);

}  // namespace avf::net
