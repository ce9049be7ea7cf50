#pragma once

#include <filesystem>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "avf/avfeat/dataset.hpp"
#include "avf/net/net.hpp"

namespace avf::eval {

using diff::Tensor;

/// Frames are [H, W] tensors in [0, 1].
using Sequence = std::vector<Tensor>;

inline constexpr double kPsnrCap = 100.0;

struct SsimParams {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double range = 1.0;
};

/// Gaussian-windowed SSIM averaged over all valid window positions.
double ssim(const Tensor& a, const Tensor& b, const SsimParams& p = {});
/// 10 log10(1 / MSE), capped at kPsnrCap.
double psnr(const Tensor& a, const Tensor& b);
double mse(const Tensor& a, const Tensor& b);

std::vector<double> ssim_curve(const Sequence& pred, const Sequence& truth);
std::vector<double> psnr_curve(const Sequence& pred, const Sequence& truth);
double mean(const std::vector<double>& v);

struct BestOfK {
  int index = 0;
  double mean_ssim = 0.0;
  std::vector<double> ssim;
  std::vector<double> psnr;
};

/// Rollout with the highest mean per-frame SSIM; the lowest index wins ties.
BestOfK best_of_k(const std::vector<Sequence>& rollouts, const Sequence& truth);
/// Mean over rollout pairs of their mean frame-wise SSIM.
double intra_ssim(const std::vector<Sequence>& rollouts);

struct DiversityCurves {
  std::vector<int> k;
  std::vector<double> inter;
  std::vector<std::optional<double>> intra;  // empty for K < 2
};

/// Each point uses the first K rollouts, so sets are nested.
DiversityCurves diversity_curves(const std::vector<Sequence>& rollouts, const Sequence& truth, const std::vector<int>& ks);

struct BoxRegion {
  int x = 0, y = 0, w = 0, h = 0;
  bool operator==(const BoxRegion&) const = default;
};

struct BlockDetection {
  BoxRegion box;
  double score = 0.0;
  bool zero_score = false;
};

/// Matched filter for a solid block_size square: window sum minus the sum
/// over its one-pixel surround. Largest score wins, first in raster order.
BlockDetection locate_block(const Tensor& frame, int block_size);
double iou(const BoxRegion& a, const BoxRegion& b);
/// IoU against the truth, 0 for a zero-score detection.
double detection_iou(const BlockDetection& d, const BoxRegion& truth);

/// Fraction of scores above 0.5.
double fooling_rate(const std::vector<double>& scores);

/// Frames t = first..last (1-based, inclusive) of a [T, H, W] tensor, or of row n of [N, T, H, W].
Sequence frames_of(const Tensor& video, int first, int last, int n = -1);

struct SampleSpec {
  int seen = 5;
  int k = 10;
  std::uint64_t seed = 0;
  int batch = 32;  // rollouts per forward pass
};

/// K independent prior rollouts; rollout j draws its noise from (seed, j) so
/// the first K' of a larger set equal a smaller set.
std::vector<Sequence> sample_futures(const net::NetConfig& cfg, diff::ParamStore& gen, const Tensor& frames,
                                     const Tensor& audio, const SampleSpec& spec);

struct EvalReport {
  std::vector<double> ssim;
  std::vector<double> psnr;
  int chosen = 0;
  std::vector<double> copy_last_ssim;
  std::vector<double> copy_last_psnr;
  DiversityCurves diversity;
  std::optional<double> block_iou;
  std::optional<double> fooling_rate;
  int clips = 0;
};

void to_json(nlohmann::json& j, const EvalReport& r);
void write_report(const std::filesystem::path& dir, const EvalReport& r);

struct EvalOptions {
  SampleSpec sample;
  std::vector<int> diversity_ks;  // empty disables the curves
  int block_size = 0;             // > 0 enables block IoU on the final frame
};

/// Best-of-K evaluation averaged over clips: per-frame curves, copy-last
/// baseline, diversity curves and optional block IoU.
EvalReport evaluate(const net::NetConfig& cfg, diff::ParamStore& gen, const feat::Dataset& data, const EvalOptions& opts,
                    int limit = -1);

/// Visual context from clip i and audio from clip pair[i]; pair[i] == i is the matched control.
EvalReport av_mismatch_probe(const net::NetConfig& cfg, diff::ParamStore& gen, const feat::Dataset& data,
                             const std::vector<int>& pair, const EvalOptions& opts);
/// Pairing i -> (i + 1) mod n.
std::vector<int> shifted_pairing(int n);

/// Scores discriminate_seq on each clip's best generated frame t with its real
/// neighbourhood and aligned audio, for t = seen + 1 .. T.
std::vector<double> sequence_scores(const net::NetConfig& cfg, diff::ParamStore& disc, const Tensor& frames,
                                    const Tensor& audio, const Sequence& generated, int seen);

}  // namespace avf::eval
