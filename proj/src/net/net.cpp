#include "avf/net/net.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "avf/avfeat/avfeat.hpp"

namespace avf::net {
namespace {

using namespace diff;

std::string idx(const std::string& prefix, const char* part, int i) { return prefix + "." + part + std::to_string(i); }

void require_dim(const Var& x, int axis, int expected, const char* what) {
  if (x.shape().size() <= static_cast<std::size_t>(axis) || x.shape()[static_cast<std::size_t>(axis)] != expected) {
    throw std::invalid_argument(std::string(what) + ": dimension " + std::to_string(axis) + " of " +
                                shape_str(x.shape()) + " must be " + std::to_string(expected));
  }
}

void require_rank(const Var& x, int rank, const char* what) {
  if (static_cast<int>(x.shape().size()) != rank) {
    throw std::invalid_argument(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                                shape_str(x.shape()));
  }
}

void add_linear(ParamStore& s, const std::string& name, int in, int out) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  s.add_uniform(name + ".w", {in, out}, bound);
  s.add_uniform(name + ".b", {out}, bound);
}

void add_conv(ParamStore& s, const std::string& name, int in, int out) {
  const double bound = 1.0 / std::sqrt(in * 16.0);
  s.add_uniform(name + ".w", {out, in, 4, 4}, bound);
  s.add_uniform(name + ".b", {out}, bound);
}

void add_deconv(ParamStore& s, const std::string& name, int in, int out) {
  const double bound = 1.0 / std::sqrt(in * 4.0);
  s.add_uniform(name + ".w", {in, out, 4, 4}, bound);
  s.add_uniform(name + ".b", {out}, bound);
}

void add_bn(ParamStore& s, const std::string& name, int channels) {
  s.add(name + ".gamma", Tensor({channels}, 1.0));
  s.add(name + ".beta", Tensor({channels}, 0.0));
  s.add(name + ".mean", Tensor({channels}, 0.0), false);
  s.add(name + ".var", Tensor({channels}, 1.0), false);
}

void add_lstm(ParamStore& s, const std::string& name, int in, int hidden) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
  s.add_uniform(name + ".w", {in + hidden, 4 * hidden}, bound);
  Tensor& b = s.add_uniform(name + ".b", {4 * hidden}, bound);
  for (int i = hidden; i < 2 * hidden; ++i) b[static_cast<std::size_t>(i)] += 1.0;  // forget gate
}

Var dense(Pass& ps, const std::string& name, const Var& x) { return linear(x, ps.p(name + ".w"), ps.p(name + ".b")); }

Var leaky(Pass& ps, const Var& x) { return leaky_relu(x, ps.cfg.leaky_slope); }

Var batch_norm(Pass& ps, const std::string& name, const Var& x) {
  if (!ps.training) {
    return batch_norm2d_infer(x, ps.p(name + ".gamma"), ps.p(name + ".beta"), ps.params.at(name + ".mean"),
                              ps.params.at(name + ".var"));
  }
  BatchNormResult r = batch_norm2d_train(x, ps.p(name + ".gamma"), ps.p(name + ".beta"));
  const double m = ps.cfg.bn_momentum;
  Tensor& rm = ps.params.at(name + ".mean");
  Tensor& rv = ps.params.at(name + ".var");
  for (std::size_t i = 0; i < rm.numel(); ++i) {
    rm[i] = (1.0 - m) * rm[i] + m * r.batch_mean[i];
    rv[i] = (1.0 - m) * rv[i] + m * r.batch_var[i];
  }
  return r.out;
}

Var lstm_layer(Pass& ps, const std::string& name, const Var& x, Var& h, Var& c) {
  LstmOutput o = lstm_cell(x, h, c, ps.p(name + ".w"), ps.p(name + ".b"));
  h = o.h;
  c = o.c;
  return o.h;
}

// [N, L, heads * dk] -> [N * heads, L, dk]
Var split_heads(const Var& x, int heads) {
  const int n = x.shape()[0], l = x.shape()[1], dk = x.shape()[2] / heads;
  return reshape(permute(reshape(x, {n, l, heads, dk}), {0, 2, 1, 3}), {n * heads, l, dk});
}

// [N * heads, L, dk] -> [N, L, heads * dk]
Var merge_heads(const Var& x, int n, int heads) {
  const int l = x.shape()[1], dk = x.shape()[2];
  return reshape(permute(reshape(x, {n, heads, l, dk}), {0, 2, 1, 3}), {n, l, heads * dk});
}

Var attention(Pass& ps, const std::string& pre, const Var& x, bool last_only, std::vector<Tensor>* trace) {
  const int n = x.shape()[0], l = x.shape()[1], d = x.shape()[2];
  const int h = ps.cfg.heads;
  const Var flat = reshape(x, {n * l, d});
  const Var k = reshape(matmul(flat, ps.p(pre + ".wk")), {n, l, d});
  const Var v = reshape(matmul(flat, ps.p(pre + ".wv")), {n, l, d});
  const int lq = last_only ? 1 : l;
  const Var qsrc = last_only ? reshape(slice(x, 1, l - 1, 1), {n, d}) : flat;
  const Var q = reshape(matmul(qsrc, ps.p(pre + ".wq")), {n, lq, d});
  const double inv = 1.0 / std::sqrt(static_cast<double>(d / h));
  const Var scores = scale(bmm(split_heads(q, h), split_heads(k, h), false, true), inv);
  const Var weights = softmax(scores);
  if (trace) trace->push_back(weights.value());
  const Var heads_out = merge_heads(bmm(weights, split_heads(v, h)), n, h);
  return reshape(matmul(reshape(heads_out, {n * lq, d}), ps.p(pre + ".wh")), {n, lq, d});
}

Var feed_forward(Pass& ps, const std::string& pre, const Var& x) {
  const Var inner = leaky_relu(dense(ps, pre + ".ff1", x), 0.0);
  return add(x, dense(ps, pre + ".ff2", inner));
}

Var conv_trunk(Pass& ps, const std::string& pre, const std::vector<int>& channels, Var h) {
  for (std::size_t i = 0; i < channels.size(); ++i) {
    h = leaky(ps, conv2d(h, ps.p(idx(pre, "c", static_cast<int>(i)) + ".w"), ps.p(idx(pre, "c", static_cast<int>(i)) + ".b")));
  }
  const int n = h.shape()[0];
  return reshape(h, {n, static_cast<int>(h.value().numel()) / n});
}

int trunk_width(const NetConfig& cfg, const std::vector<int>& channels) {
  const int s = cfg.frame_size >> channels.size();
  return channels.back() * s * s;
}

}  // namespace

void NetConfig::validate() const {
  auto need = [](bool ok, const char* field, const std::string& why) {
    if (!ok) throw std::invalid_argument(std::string(field) + ": " + why);
  };
  need(!enc_channels.empty(), "enc_channels", "needs at least one stage");
  need(frame_size > 0 && frame_size % (1 << stages()) == 0, "frame_size", "must be divisible by 2^stages");
  need(!disc_channels.empty() && frame_size % (1 << disc_channels.size()) == 0, "disc_channels",
       "frame_size must be divisible by 2^stages");
  need(code_dim > 0 && heads > 0 && code_dim % heads == 0, "heads", "must divide code_dim");
  need(code_dim % 2 == 0, "code_dim", "must be even for position codes");
  need(z_dim > 0, "z_dim", "must be positive");
  need(hidden > 0 && latent_hidden > 0 && disc_hidden > 0, "hidden", "widths must be positive");
  need(pn_layers >= 1, "pn_layers", "must be at least 1");
  need(tf_layers >= 1, "tf_layers", "must be at least 1");
  need(ff_dim > 0, "ff_dim", "must be positive");
  need(audio_bins > 0 && audio_cols > 0, "audio_bins", "must be positive");
  need(history >= 1, "history", "must be at least 1");
  need(lookahead >= 1, "lookahead", "must be at least 1");
  need(max_len >= 1, "max_len", "must be positive");
}

Var Pass::p(const std::string& name) const {
  return frozen ? tape.frozen(params, name) : tape.param(params, name);
}

ParamStore init_generator(const NetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParamStore s(seed);
  const int n = cfg.stages();
  int in = 1;
  for (int i = 0; i < n; ++i) {
    add_conv(s, idx("enc", "c", i), in, cfg.enc_channels[static_cast<std::size_t>(i)]);
    add_bn(s, idx("enc", "bn", i), cfg.enc_channels[static_cast<std::size_t>(i)]);
    in = cfg.enc_channels[static_cast<std::size_t>(i)];
  }
  const int bottom = cfg.enc_channels.back() * cfg.bottom_size() * cfg.bottom_size();
  add_linear(s, "enc.out", bottom, cfg.code_dim);
  add_linear(s, "dec.in", cfg.hidden, bottom);
  for (int i = n - 1; i >= 0; --i) {
    const int ch = cfg.enc_channels[static_cast<std::size_t>(i)];
    const int out = i > 0 ? cfg.enc_channels[static_cast<std::size_t>(i - 1)] : 1;
    add_deconv(s, idx("dec", "d", i), 2 * ch, out);
    if (i > 0) add_bn(s, idx("dec", "bn", i), out);
  }
  for (int j = 0; j < cfg.pn_layers; ++j) {
    add_lstm(s, idx("pn", "l", j), j == 0 ? cfg.code_dim + cfg.z_dim : cfg.hidden, cfg.hidden);
  }
  for (const char* net : {"prior", "post"}) {
    add_lstm(s, std::string(net) + ".l0", 2 * cfg.code_dim, cfg.latent_hidden);
    add_linear(s, std::string(net) + ".mu", cfg.latent_hidden, cfg.z_dim);
    add_linear(s, std::string(net) + ".lv", cfg.latent_hidden, cfg.z_dim);
  }
  add_linear(s, "aud.in", cfg.audio_size(), cfg.code_dim);
  for (const char* stream : {"vis_prior", "vis_post", "aud_tf"}) add_transformer_params(s, stream, cfg);
  return s;
}

void add_transformer_params(ParamStore& s, const std::string& stream, const NetConfig& cfg) {
  const int d = cfg.code_dim;
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  for (int l = 0; l < cfg.tf_layers; ++l) {
    const std::string pre = idx(stream, "l", l);
    for (const char* w : {".wq", ".wk", ".wv", ".wh"}) s.add_uniform(pre + w, {d, d}, bound);
    add_linear(s, pre + ".ff1", d, cfg.ff_dim);
    add_linear(s, pre + ".ff2", cfg.ff_dim, d);
  }
}

ParamStore init_discriminator(const NetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParamStore s(seed);
  for (const char* pre : {"dstd", "dseq"}) {
    int in = 1;
    for (std::size_t i = 0; i < cfg.disc_channels.size(); ++i) {
      add_conv(s, idx(pre, "c", static_cast<int>(i)), in, cfg.disc_channels[i]);
      in = cfg.disc_channels[i];
    }
  }
  const int width = trunk_width(cfg, cfg.disc_channels);
  add_linear(s, "dstd.out", width, 1);
  add_linear(s, "dseq.feat", width, cfg.disc_feat);
  add_linear(s, "dseq.aud", cfg.audio_size(), cfg.disc_audio);
  add_lstm(s, "dseq.lstm", cfg.disc_feat + cfg.disc_audio, cfg.disc_hidden);
  add_linear(s, "dseq.out", cfg.disc_hidden, 1);
  return s;
}

Embedding encode_frames(Pass& ps, const Var& frames) {
  require_rank(frames, 4, "frames");
  require_dim(frames, 1, 1, "frames");
  require_dim(frames, 2, ps.cfg.frame_size, "frames");
  require_dim(frames, 3, ps.cfg.frame_size, "frames");
  Embedding e;
  Var h = frames;
  for (int i = 0; i < ps.cfg.stages(); ++i) {
    h = conv2d(h, ps.p(idx("enc", "c", i) + ".w"), ps.p(idx("enc", "c", i) + ".b"));
    h = leaky(ps, batch_norm(ps, idx("enc", "bn", i), h));
    e.skips.push_back(h);
  }
  const int n = frames.shape()[0];
  e.code = tanh(dense(ps, "enc.out", reshape(h, {n, static_cast<int>(h.value().numel()) / n})));
  return e;
}

Var decode_frame(Pass& ps, const Var& eta, const std::vector<Var>& skips) {
  const NetConfig& c = ps.cfg;
  require_rank(eta, 2, "eta");
  require_dim(eta, 1, c.hidden, "eta");
  if (static_cast<int>(skips.size()) != c.stages()) {
    throw std::invalid_argument("skips: expected " + std::to_string(c.stages()) + ", got " +
                                std::to_string(skips.size()));
  }
  const int n = eta.shape()[0];
  const int s = c.bottom_size();
  Var h = reshape(leaky(ps, dense(ps, "dec.in", eta)), {n, c.enc_channels.back(), s, s});
  for (int i = c.stages() - 1; i >= 0; --i) {
    const Var parts[] = {h, skips[static_cast<std::size_t>(i)]};
    h = deconv2d(concat(parts, 1), ps.p(idx("dec", "d", i) + ".w"), ps.p(idx("dec", "d", i) + ".b"));
    h = i > 0 ? leaky(ps, batch_norm(ps, idx("dec", "bn", i), h)) : sigmoid(h);
  }
  return h;
}

LstmStack zero_lstm(Pass& ps, int layers, int batch, int width) {
  LstmStack st;
  for (int j = 0; j < layers; ++j) {
    st.h.push_back(ps.tape.constant(Tensor({batch, width})));
    st.c.push_back(ps.tape.constant(Tensor({batch, width})));
  }
  return st;
}

Var pn_step(Pass& ps, const Var& input, LstmStack& state) {
  require_rank(input, 2, "pn input");
  require_dim(input, 1, ps.cfg.code_dim + ps.cfg.z_dim, "pn input");
  Var x = input;
  for (int j = 0; j < ps.cfg.pn_layers; ++j) {
    x = lstm_layer(ps, idx("pn", "l", j), x, state.h[static_cast<std::size_t>(j)], state.c[static_cast<std::size_t>(j)]);
  }
  return x;
}

Gaussian latent_step(Pass& ps, const std::string& net, const Var& audio_code, const Var& visual_code,
                     LstmStack& state) {
  require_dim(audio_code, 1, ps.cfg.code_dim, "audio code");
  require_dim(visual_code, 1, ps.cfg.code_dim, "visual code");
  const Var parts[] = {audio_code, visual_code};
  const Var h = lstm_layer(ps, net + ".l0", concat(parts, 1), state.h[0], state.c[0]);
  return {dense(ps, net + ".mu", h), dense(ps, net + ".lv", h)};
}

Var sample_latent(const Gaussian& g, const Var& noise) {
  return add(g.mu, mul(exp(scale(g.log_var, 0.5)), noise));
}

Var transformer_encode(Pass& ps, const std::string& stream, const Var& seq, bool last_only,
                       std::vector<Tensor>* trace) {
  require_rank(seq, 3, "sequence");
  require_dim(seq, 2, ps.cfg.code_dim, "sequence");
  Var x = seq;
  for (int l = 0; l < ps.cfg.tf_layers; ++l) {
    const std::string pre = idx(stream, "l", l);
    x = attention(ps, pre, x, last_only && l == ps.cfg.tf_layers - 1, trace);
    if (ps.cfg.ff_enabled) x = feed_forward(ps, pre, x);
  }
  return x;
}

Var audio_codes(Pass& ps, const Var& blocks) {
  const NetConfig& c = ps.cfg;
  require_rank(blocks, 4, "audio blocks");
  require_dim(blocks, 2, c.audio_bins, "audio blocks");
  require_dim(blocks, 3, c.audio_cols, "audio blocks");
  const int n = blocks.shape()[0], t = blocks.shape()[1];
  const Var flat = scale(reshape(blocks, {n * t, c.audio_size()}), c.audio_input_scale);
  return reshape(leaky(ps, dense(ps, "aud.in", flat)), {n, t, c.code_dim});
}

Var add_positions(Pass& ps, const Var& seq) {
  const int n = seq.shape()[0], l = seq.shape()[1], d = seq.shape()[2];
  if (l > ps.cfg.max_len) throw std::invalid_argument("sequence: length exceeds max_len");
  const Tensor table = feat::position_table(l, d);
  Tensor tiled({n, l, d});
  for (int i = 0; i < n; ++i) std::copy(table.data(), table.data() + table.numel(), tiled.data() + static_cast<std::size_t>(i) * table.numel());
  return add(seq, ps.tape.constant(std::move(tiled)));
}

Var discriminate_std(Pass& ps, const Var& frames) {
  require_rank(frames, 4, "frames");
  require_dim(frames, 1, 1, "frames");
  require_dim(frames, 2, ps.cfg.frame_size, "frames");
  require_dim(frames, 3, ps.cfg.frame_size, "frames");
  return sigmoid(dense(ps, "dstd.out", conv_trunk(ps, "dstd", ps.cfg.disc_channels, frames)));
}

Var discriminate_seq(Pass& ps, const Var& frames, const Var& audio) {
  const NetConfig& c = ps.cfg;
  const int len = c.history + c.lookahead;
  require_rank(frames, 4, "context frames");
  require_dim(frames, 1, len, "context frames");
  require_dim(frames, 2, c.frame_size, "context frames");
  require_dim(frames, 3, c.frame_size, "context frames");
  require_rank(audio, 4, "context audio");
  require_dim(audio, 1, len, "context audio");
  require_dim(audio, 2, c.audio_bins, "context audio");
  require_dim(audio, 3, c.audio_cols, "context audio");
  const int n = frames.shape()[0];
  if (audio.shape()[0] != n) throw std::invalid_argument("context audio: dimension 0 must match frames");
  const Var vis = leaky(ps, dense(ps, "dseq.feat",
                                  conv_trunk(ps, "dseq", c.disc_channels,
                                             reshape(frames, {n * len, 1, c.frame_size, c.frame_size}))));
  const Var aud = leaky(ps, dense(ps, "dseq.aud", scale(reshape(audio, {n * len, c.audio_size()}), c.audio_input_scale)));
  const Var parts[] = {vis, aud};
  const int width = c.disc_feat + c.disc_audio;
  const Var steps = reshape(concat(parts, 1), {n, len, width});
  LstmStack st = zero_lstm(ps, 1, n, c.disc_hidden);
  Var h;
  for (int j = 0; j < len; ++j) h = lstm_layer(ps, "dseq.lstm", reshape(slice(steps, 1, j, 1), {n, width}), st.h[0], st.c[0]);
  return sigmoid(dense(ps, "dseq.out", h));
}

Var RolloutResult::stacked() const {
  if (frames.empty()) throw std::invalid_argument("rollout: no generated frames to stack");
  return concat(frames, 1);
}

RolloutResult rollout(Pass& ps, const RolloutInputs& in, const RolloutOptions& opts) {
  const NetConfig& c = ps.cfg;
  require_rank(in.frames, 4, "frames");
  const int n = in.frames.shape()[0], T = in.frames.shape()[1], F = in.seen;
  const int hw = c.frame_size;
  require_dim(in.frames, 2, hw, "frames");
  require_dim(in.frames, 3, hw, "frames");
  if (F < 1 || F > T) throw std::invalid_argument("seen: F must satisfy 1 <= F <= T");
  RolloutResult out;
  if (F == T) return out;
  require_rank(in.audio, 4, "audio");
  require_dim(in.audio, 0, n, "audio");
  require_dim(in.audio, 1, T, "audio");
  require_rank(in.noise, 3, "noise");
  require_dim(in.noise, 0, T, "noise");
  require_dim(in.noise, 1, n, "noise");
  require_dim(in.noise, 2, c.z_dim, "noise");
  if (T > c.max_len) throw std::invalid_argument("frames: T exceeds max_len");

  const bool all_real = !opts.feed_generated || !opts.stream_generated;
  const int real_count = all_real ? T : F;
  Embedding real = encode_frames(ps, reshape(slice(in.frames, 1, 0, real_count), {n * real_count, 1, hw, hw}));
  const Var real_codes = reshape(real.code, {n, real_count, c.code_dim});
  std::vector<Var> real_skips;
  std::vector<Shape> skip_shapes;
  for (const Var& s : real.skips) {
    const Shape& sh = s.shape();
    skip_shapes.push_back({n, sh[1], sh[2], sh[3]});
    real_skips.push_back(reshape(s, {n, real_count, sh[1] * sh[2] * sh[3]}));
  }
  auto real_embedding = [&](int j) {
    Embedding e{reshape(slice(real_codes, 1, j, 1), {n, c.code_dim}), {}};
    for (std::size_t i = 0; i < real_skips.size(); ++i) e.skips.push_back(reshape(slice(real_skips[i], 1, j, 1), skip_shapes[i]));
    return e;
  };

  std::vector<Embedding> generated(static_cast<std::size_t>(T));
  // Visual stream over frames 0..len-1 with position codes.
  auto stream = [&](int len) {
    if (!opts.stream_generated || len <= F) return add_positions(ps, slice(real_codes, 1, 0, len));
    std::vector<Var> parts{slice(real_codes, 1, 0, F)};
    for (int j = F; j < len; ++j) parts.push_back(reshape(generated[static_cast<std::size_t>(j)].code, {n, 1, c.code_dim}));
    return add_positions(ps, concat(parts, 1));
  };
  auto last = [&](const std::string& name, const Var& seq) {
    return reshape(transformer_encode(ps, name, seq, true), {n, c.code_dim});
  };

  const Var audio_seq = audio_codes(ps, in.audio);
  LstmStack pn = zero_lstm(ps, c.pn_layers, n, c.hidden);
  LstmStack prior_state = zero_lstm(ps, 1, n, c.latent_hidden);
  LstmStack post_state = zero_lstm(ps, 1, n, c.latent_hidden);

  for (int t = 2; t <= T; ++t) {
    const int audio_len = std::min(t + c.lookahead - 1, T);
    const Var o_a = last("aud_tf", add_positions(ps, slice(audio_seq, 1, 0, audio_len)));
    const Var m_v = last("vis_prior", stream(t - 1));
    const Gaussian prior = latent_step(ps, "prior", o_a, m_v, prior_state);
    const bool warm = t <= F;
    const bool use_post = warm || opts.latent == LatentSource::Posterior;
    const Var noise = reshape(slice(in.noise, 0, t - 1, 1), {n, c.z_dim});
    Gaussian post;
    Var z;
    if (use_post) {
      if (!warm && opts.stream_generated) throw std::invalid_argument("rollout: posterior needs real frames in the stream");
      post = latent_step(ps, "post", o_a, last("vis_post", stream(t)), post_state);
      z = sample_latent(post, noise);
    } else if (opts.latent == LatentSource::Prior) {
      z = sample_latent(prior, noise);
    } else {
      z = noise;
    }

    const int prev = t - 2;
    const bool gen_prev = opts.feed_generated && prev >= F;
    const Embedding e_prev = gen_prev ? generated[static_cast<std::size_t>(prev)] : real_embedding(prev);
    const Var parts[] = {e_prev.code, z};
    const Var eta = pn_step(ps, concat(parts, 1), pn);
    if (t > F) {
      const Var frame = decode_frame(ps, eta, e_prev.skips);
      out.frames.push_back(frame);
      out.priors.push_back(prior);
      if (use_post) out.posteriors.push_back(post);
      if (t < T && (opts.feed_generated || opts.stream_generated)) generated[static_cast<std::size_t>(t - 1)] = encode_frames(ps, frame);
    }
  }
  return out;
}

}  // namespace avf::net
