#include "avf/evalkit/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <stdexcept>

#include "avf/diffcore/ops.hpp"

namespace avf::eval {
namespace {

void same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(what) + ": shapes " + diff::shape_str(a.shape()) + " and " +
                                diff::shape_str(b.shape()) + " differ");
  }
}

int height(const Tensor& t) { return t.dim(t.rank() - 2); }
int width(const Tensor& t) { return t.dim(t.rank() - 1); }

std::vector<double> gaussian_taps(int n, double sigma) {
  std::vector<double> w(static_cast<std::size_t>(n));
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const double d = i - (n - 1) / 2.0;
    w[static_cast<std::size_t>(i)] = std::exp(-d * d / (2.0 * sigma * sigma));
    total += w[static_cast<std::size_t>(i)];
  }
  for (double& v : w) v /= total;
  return w;
}

// Separable 'valid' filtering of an h x w image.
std::vector<double> filter_valid(const std::vector<double>& img, int h, int w, const std::vector<double>& taps) {
  const int n = static_cast<int>(taps.size());
  const int oh = h - n + 1, ow = w - n + 1;
  std::vector<double> rows(static_cast<std::size_t>(h * ow));
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int k = 0; k < n; ++k) s += taps[static_cast<std::size_t>(k)] * img[static_cast<std::size_t>(y * w + x + k)];
      rows[static_cast<std::size_t>(y * ow + x)] = s;
    }
  }
  std::vector<double> out(static_cast<std::size_t>(oh * ow));
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int k = 0; k < n; ++k) s += taps[static_cast<std::size_t>(k)] * rows[static_cast<std::size_t>((y + k) * ow + x)];
      out[static_cast<std::size_t>(y * ow + x)] = s;
    }
  }
  return out;
}

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

Tensor repeat(const Tensor& t, int n) {
  diff::Shape shape{n};
  shape.insert(shape.end(), t.shape().begin(), t.shape().end());
  Tensor out(shape);
  for (int i = 0; i < n; ++i) std::copy_n(t.data(), t.numel(), out.data() + static_cast<std::size_t>(i) * t.numel());
  return out;
}

void accumulate(std::vector<double>& acc, const std::vector<double>& v) {
  if (acc.empty()) acc.assign(v.size(), 0.0);
  for (std::size_t i = 0; i < v.size(); ++i) acc[i] += v[i];
}

void divide(std::vector<double>& v, double d) {
  for (double& x : v) x /= d;
}

}  // namespace

double ssim(const Tensor& a, const Tensor& b, const SsimParams& p) {
  same_shape(a, b, "ssim");
  const int h = height(a), w = width(a);
  if (a.numel() != static_cast<std::size_t>(h * w)) throw std::invalid_argument("ssim: expected a single [H, W] frame");
  if (h < p.window || w < p.window) throw std::invalid_argument("ssim: frame smaller than the window");
  const auto taps = gaussian_taps(p.window, p.sigma);
  const std::vector<double> x(a.values().begin(), a.values().end()), y(b.values().begin(), b.values().end());
  std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto mx = filter_valid(x, h, w, taps), my = filter_valid(y, h, w, taps);
  const auto sxx = filter_valid(xx, h, w, taps), syy = filter_valid(yy, h, w, taps), sxy = filter_valid(xy, h, w, taps);
  const double c1 = (p.k1 * p.range) * (p.k1 * p.range), c2 = (p.k2 * p.range) * (p.k2 * p.range);
  double total = 0.0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cov = sxy[i] - mx[i] * my[i];
    total += ((2 * mx[i] * my[i] + c1) * (2 * cov + c2)) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
  }
  return total / static_cast<double>(mx.size());
}

double mse(const Tensor& a, const Tensor& b) {
  same_shape(a, b, "mse");
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(a.numel());
}

double psnr(const Tensor& a, const Tensor& b) {
  const double m = mse(a, b);
  if (m < 1e-10) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / m));
}

std::vector<double> ssim_curve(const Sequence& pred, const Sequence& truth) {
  if (pred.size() != truth.size()) throw std::invalid_argument("ssim: sequence lengths differ");
  std::vector<double> out;
  for (std::size_t i = 0; i < pred.size(); ++i) out.push_back(ssim(pred[i], truth[i]));
  return out;
}

std::vector<double> psnr_curve(const Sequence& pred, const Sequence& truth) {
  if (pred.size() != truth.size()) throw std::invalid_argument("psnr: sequence lengths differ");
  std::vector<double> out;
  for (std::size_t i = 0; i < pred.size(); ++i) out.push_back(psnr(pred[i], truth[i]));
  return out;
}

double mean(const std::vector<double>& v) {
  if (v.empty()) throw std::invalid_argument("mean: empty");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

BestOfK best_of_k(const std::vector<Sequence>& rollouts, const Sequence& truth) {
  if (rollouts.empty()) throw std::invalid_argument("best_of_k: no rollouts");
  BestOfK best;
  best.mean_ssim = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < rollouts.size(); ++j) {
    auto curve = ssim_curve(rollouts[j], truth);
    const double m = mean(curve);
    if (m > best.mean_ssim) {
      best.index = static_cast<int>(j);
      best.mean_ssim = m;
      best.ssim = std::move(curve);
    }
  }
  best.psnr = psnr_curve(rollouts[static_cast<std::size_t>(best.index)], truth);
  return best;
}

double intra_ssim(const std::vector<Sequence>& rollouts) {
  if (rollouts.size() < 2) throw std::invalid_argument("intra_ssim: need at least two rollouts");
  double total = 0.0;
  int pairs = 0;
  for (std::size_t i = 0; i < rollouts.size(); ++i) {
    for (std::size_t j = i + 1; j < rollouts.size(); ++j, ++pairs) total += mean(ssim_curve(rollouts[i], rollouts[j]));
  }
  return total / pairs;
}

DiversityCurves diversity_curves(const std::vector<Sequence>& rollouts, const Sequence& truth, const std::vector<int>& ks) {
  if (!std::is_sorted(ks.begin(), ks.end())) throw std::invalid_argument("diversity: K values must ascend");
  DiversityCurves c;
  for (int k : ks) {
    if (k < 1 || k > static_cast<int>(rollouts.size())) throw std::invalid_argument("diversity: K out of range");
    const std::vector<Sequence> prefix(rollouts.begin(), rollouts.begin() + k);
    c.k.push_back(k);
    c.inter.push_back(best_of_k(prefix, truth).mean_ssim);
    c.intra.push_back(k >= 2 ? std::optional<double>(intra_ssim(prefix)) : std::nullopt);
  }
  return c;
}

BlockDetection locate_block(const Tensor& frame, int block_size) {
  const int h = height(frame), w = width(frame), b = block_size;
  if (b <= 0 || b > h || b > w) throw std::invalid_argument("locate_block: frame smaller than the block");
  // Summed-area table with a zero border.
  std::vector<double> sat(static_cast<std::size_t>((h + 1) * (w + 1)), 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      sat[static_cast<std::size_t>((y + 1) * (w + 1) + x + 1)] = frame[static_cast<std::size_t>(y * w + x)] +
                                                                   sat[static_cast<std::size_t>(y * (w + 1) + x + 1)] +
                                                                   sat[static_cast<std::size_t>((y + 1) * (w + 1) + x)] -
                                                                   sat[static_cast<std::size_t>(y * (w + 1) + x)];
    }
  }
  auto area = [&](int x0, int y0, int x1, int y1) {
    x0 = std::clamp(x0, 0, w);
    x1 = std::clamp(x1, 0, w);
    y0 = std::clamp(y0, 0, h);
    y1 = std::clamp(y1, 0, h);
    return sat[static_cast<std::size_t>(y1 * (w + 1) + x1)] - sat[static_cast<std::size_t>(y0 * (w + 1) + x1)] -
           sat[static_cast<std::size_t>(y1 * (w + 1) + x0)] + sat[static_cast<std::size_t>(y0 * (w + 1) + x0)];
  };
  BlockDetection best;
  best.score = -std::numeric_limits<double>::infinity();
  for (int y = 0; y + b <= h; ++y) {
    for (int x = 0; x + b <= w; ++x) {
      const double inside = area(x, y, x + b, y + b);
      const double ring = area(x - 1, y - 1, x + b + 1, y + b + 1) - inside;
      const double score = inside - ring;
      if (score > best.score) best = {{x, y, b, b}, score, false};
    }
  }
  best.zero_score = !(best.score > 0.0);
  return best;
}

double iou(const BoxRegion& a, const BoxRegion& b) {
  const int ix = std::max(0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
  const int iy = std::max(0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
  const double inter = static_cast<double>(ix) * iy;
  const double uni = static_cast<double>(a.w) * a.h + static_cast<double>(b.w) * b.h - inter;
  return uni > 0 ? inter / uni : 0.0;
}

double detection_iou(const BlockDetection& d, const BoxRegion& truth) { return d.zero_score ? 0.0 : iou(d.box, truth); }

double fooling_rate(const std::vector<double>& scores) {
  if (scores.empty()) throw std::invalid_argument("fooling_rate: no scores");
  int fooled = 0;
  for (double s : scores) fooled += s > 0.5;
  return static_cast<double>(fooled) / static_cast<double>(scores.size());
}

Sequence frames_of(const Tensor& video, int first, int last, int n) {
  const int r = video.rank();
  if (r != 3 && r != 4) throw std::invalid_argument("frames_of: expected [T, H, W] or [N, T, H, W]");
  const int T = video.dim(r - 3), h = video.dim(r - 2), w = video.dim(r - 1);
  if (first < 1 || last > T || first > last + 1) throw std::invalid_argument("frames_of: range outside 1..T");
  const std::size_t frame = static_cast<std::size_t>(h * w);
  const std::size_t base = r == 4 ? static_cast<std::size_t>(n) * static_cast<std::size_t>(T) * frame : 0;
  Sequence out;
  for (int t = first; t <= last; ++t) {
    Tensor f({h, w});
    std::copy_n(video.data() + base + static_cast<std::size_t>(t - 1) * frame, frame, f.data());
    out.push_back(std::move(f));
  }
  return out;
}

std::vector<Sequence> sample_futures(const net::NetConfig& cfg, diff::ParamStore& gen, const Tensor& frames,
                                     const Tensor& audio, const SampleSpec& spec) {
  if (spec.k < 1) throw std::invalid_argument("sample: K must be positive");
  const int T = frames.dim(0);
  std::vector<Sequence> out;
  for (int start = 0; start < spec.k; start += spec.batch) {
    const int n = std::min(spec.batch, spec.k - start);
    Tensor noise({T, n, cfg.z_dim});
    for (int j = 0; j < n; ++j) {
      std::mt19937_64 rng(stream_seed(spec.seed, static_cast<std::uint64_t>(start + j)));
      std::normal_distribution<double> g;
      for (int t = 0; t < T; ++t) {
        for (int d = 0; d < cfg.z_dim; ++d) noise[static_cast<std::size_t>((t * n + j) * cfg.z_dim + d)] = g(rng);
      }
    }
    diff::Tape tape;
    net::Pass ps{cfg, gen, tape};
    net::RolloutInputs in{tape.constant(repeat(frames, n)), tape.constant(repeat(audio, n)), spec.seen,
                          tape.constant(std::move(noise))};
    const net::RolloutResult r = net::rollout(ps, in, net::RolloutOptions::infer());
    for (int j = 0; j < n; ++j) {
      Sequence seq;
      for (const auto& f : r.frames) {
        Tensor one({f.shape()[2], f.shape()[3]});
        std::copy_n(f.value().data() + static_cast<std::size_t>(j) * one.numel(), one.numel(), one.data());
        seq.push_back(std::move(one));
      }
      out.push_back(std::move(seq));
    }
  }
  return out;
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  j = {{"clips", r.clips},
       {"ssim", r.ssim},
       {"psnr", r.psnr},
       {"chosen", r.chosen},
       {"copy_last_ssim", r.copy_last_ssim},
       {"copy_last_psnr", r.copy_last_psnr}};
  nlohmann::json d = {{"k", r.diversity.k}, {"inter_ssim", r.diversity.inter}, {"intra_ssim", nlohmann::json::array()}};
  for (const auto& v : r.diversity.intra) d["intra_ssim"].push_back(v ? nlohmann::json(*v) : nlohmann::json());
  j["diversity"] = d;
  j["block_iou"] = r.block_iou ? nlohmann::json(*r.block_iou) : nlohmann::json();
  j["fooling_rate"] = r.fooling_rate ? nlohmann::json(*r.fooling_rate) : nlohmann::json();
}

void write_report(const std::filesystem::path& dir, const EvalReport& r) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream f(dir / "report.json");
    f << nlohmann::json(r).dump(2) << '\n';
    if (!f) throw std::runtime_error("cannot write " + (dir / "report.json").string());
  }
  std::ofstream c(dir / "curves.csv");
  c.precision(10);
  c << "offset,ssim,psnr,copy_last_ssim,copy_last_psnr\n";
  for (std::size_t i = 0; i < r.ssim.size(); ++i) {
    c << i + 1 << ',' << r.ssim[i] << ',' << r.psnr[i] << ',' << (i < r.copy_last_ssim.size() ? r.copy_last_ssim[i] : 0.0)
      << ',' << (i < r.copy_last_psnr.size() ? r.copy_last_psnr[i] : 0.0) << '\n';
  }
  std::ofstream d(dir / "diversity.csv");
  d.precision(10);
  d << "k,inter_ssim,intra_ssim\n";
  for (std::size_t i = 0; i < r.diversity.k.size(); ++i) {
    d << r.diversity.k[i] << ',' << r.diversity.inter[i] << ',';
    if (r.diversity.intra[i]) d << *r.diversity.intra[i];
    d << '\n';
  }
  if (!c || !d) throw std::runtime_error("cannot write curves under " + dir.string());
}

namespace {

EvalReport run_eval(const net::NetConfig& cfg, diff::ParamStore& gen, const feat::Dataset& data,
                    const std::vector<int>& visual, const std::vector<int>& sound, const EvalOptions& opts) {
  if (visual.empty()) throw std::invalid_argument("evaluate: no clips");
  const int F = opts.sample.seen, T = data.frames;
  if (F < 1 || F >= T) throw std::invalid_argument("evaluate: seen frames must lie in [1, T)");
  int needed = opts.sample.k;
  for (int k : opts.diversity_ks) needed = std::max(needed, k);
  EvalReport rep;
  std::vector<double> inter_acc, intra_acc;
  std::vector<int> intra_n;
  double iou_total = 0.0;
  int iou_count = 0;
  for (std::size_t c = 0; c < visual.size(); ++c) {
    const feat::Sample& vs = data.samples.at(static_cast<std::size_t>(visual[c]));
    const feat::Sample& as = data.samples.at(static_cast<std::size_t>(sound[c]));
    SampleSpec spec = opts.sample;
    spec.k = needed;
    spec.seed = opts.sample.seed + static_cast<std::uint64_t>(visual[c]) * 1000003ULL;
    const auto futures = sample_futures(cfg, gen, vs.frames, as.audio, spec);
    const Sequence truth = frames_of(vs.frames, F + 1, T);
    const BestOfK best = best_of_k({futures.begin(), futures.begin() + opts.sample.k}, truth);
    accumulate(rep.ssim, best.ssim);
    accumulate(rep.psnr, best.psnr);
    if (visual.size() == 1) rep.chosen = best.index;
    const Sequence copy(truth.size(), frames_of(vs.frames, F, F).front());
    accumulate(rep.copy_last_ssim, ssim_curve(copy, truth));
    accumulate(rep.copy_last_psnr, psnr_curve(copy, truth));
    if (!opts.diversity_ks.empty()) {
      const DiversityCurves d = diversity_curves(futures, truth, opts.diversity_ks);
      accumulate(inter_acc, d.inter);
      if (intra_acc.empty()) {
        intra_acc.assign(d.k.size(), 0.0);
        intra_n.assign(d.k.size(), 0);
      }
      for (std::size_t i = 0; i < d.k.size(); ++i) {
        if (d.intra[i]) {
          intra_acc[i] += *d.intra[i];
          ++intra_n[i];
        }
      }
      rep.diversity.k = d.k;
    }
    if (opts.block_size > 0 && vs.block_box) {
      const m3so::Box& b = *vs.block_box;
      const auto det = locate_block(futures[static_cast<std::size_t>(best.index)].back(), opts.block_size);
      iou_total += detection_iou(det, {b.x, b.y, b.w, b.h});
      ++iou_count;
    }
  }
  const double n = static_cast<double>(visual.size());
  divide(rep.ssim, n);
  divide(rep.psnr, n);
  divide(rep.copy_last_ssim, n);
  divide(rep.copy_last_psnr, n);
  if (!inter_acc.empty()) {
    divide(inter_acc, n);
    rep.diversity.inter = inter_acc;
    for (std::size_t i = 0; i < intra_acc.size(); ++i) {
      rep.diversity.intra.push_back(intra_n[i] ? std::optional<double>(intra_acc[i] / intra_n[i]) : std::nullopt);
    }
  }
  if (iou_count) rep.block_iou = iou_total / iou_count;
  rep.clips = static_cast<int>(visual.size());
  return rep;
}

}  // namespace

EvalReport evaluate(const net::NetConfig& cfg, diff::ParamStore& gen, const feat::Dataset& data, const EvalOptions& opts,
                    int limit) {
  const int n = limit < 0 ? data.count() : std::min(limit, data.count());
  std::vector<int> idx(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  return run_eval(cfg, gen, data, idx, idx, opts);
}

std::vector<int> shifted_pairing(int n) {
  if (n < 2) throw std::invalid_argument("pairing: need at least two clips");
  std::vector<int> p(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = (i + 1) % n;
  return p;
}

EvalReport av_mismatch_probe(const net::NetConfig& cfg, diff::ParamStore& gen, const feat::Dataset& data,
                             const std::vector<int>& pair, const EvalOptions& opts) {
  if (data.count() < 2) throw std::invalid_argument("av_mismatch: pool needs at least two clips");
  if (pair.empty() || static_cast<int>(pair.size()) > data.count()) throw std::invalid_argument("av_mismatch: bad pairing");
  std::vector<int> visual(pair.size());
  for (std::size_t i = 0; i < pair.size(); ++i) visual[i] = static_cast<int>(i);
  return run_eval(cfg, gen, data, visual, pair, opts);
}

std::vector<double> sequence_scores(const net::NetConfig& cfg, diff::ParamStore& disc, const Tensor& frames,
                                    const Tensor& audio, const Sequence& generated, int seen) {
  const int T = frames.dim(0), R = cfg.history, k = cfg.lookahead, len = R + k;
  if (static_cast<int>(generated.size()) != T - seen) throw std::invalid_argument("scores: generated length must be T - seen");
  const std::size_t frame = static_cast<std::size_t>(frames.dim(1) * frames.dim(2));
  const std::size_t block = static_cast<std::size_t>(audio.dim(1) * audio.dim(2));
  std::vector<double> out;
  for (int t = std::max(seen + 1, R + 1); t + k - 1 <= T; ++t) {
    Tensor ctx({1, len, frames.dim(1), frames.dim(2)});
    Tensor aud({1, len, audio.dim(1), audio.dim(2)});
    for (int j = 0; j < len; ++j) {
      const int src = t - R + j;
      const double* fp = src == t ? generated[static_cast<std::size_t>(t - seen - 1)].data()
                                  : frames.data() + static_cast<std::size_t>(src - 1) * frame;
      std::copy_n(fp, frame, ctx.data() + static_cast<std::size_t>(j) * frame);
      std::copy_n(audio.data() + static_cast<std::size_t>(src - 1) * block, block, aud.data() + static_cast<std::size_t>(j) * block);
    }
    diff::Tape tape;
    net::Pass ps{cfg, disc, tape};
    out.push_back(net::discriminate_seq(ps, tape.constant(std::move(ctx)), tape.constant(std::move(aud))).value().item());
  }
  return out;
}

}  // namespace avf::eval
