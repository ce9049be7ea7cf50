#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "avf/avfeat/avfeat.hpp"
#include "avf/common/json_fields.hpp"
#include "avf/m3so/m3so.hpp"
#include "avf/net/net.hpp"
#include "avf/trainer/trainer.hpp"

// Configuration handling and verb dispatch for the avf command-line tool.
namespace avf::cli {

struct EvalSettings {
  std::string split = "test";
  int clips = 100;  // -1 uses the whole split
  int k = 10;
  std::uint64_t seed = 0;
  int batch = 32;
  std::vector<int> horizons = {6, 15, 20};  // 1-based frame numbers reported in tables
  std::vector<int> diversity_ks;
  bool block_iou = true;
  bool mismatch_probe = false;
};
AVF_JSON_FIELDS(EvalSettings, split, clips, k, seed, batch, horizons, diversity_ks, block_iou, mismatch_probe)

struct SplitSizes {
  int train = 500, val = 50, test = 100;
};
AVF_JSON_FIELDS(SplitSizes, train, val, test)

struct RunConfig {
  m3so::M3soConfig data;
  SplitSizes counts;
  feat::StftParams stft;
  net::NetConfig net;
  train::TrainConfig train;
  EvalSettings eval;
  std::string data_dir;    // dataset root for train / sample / eval
  std::string checkpoint;  // generator checkpoint for sample / eval
  std::vector<std::string> reports;  // eval run directories for report
};
AVF_JSON_FIELDS(RunConfig, data, counts, stft, net, train, eval, data_dir, checkpoint, reports)

/// Rejected configuration input; the message names the key path.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Overrides = std::vector<std::pair<std::string, std::string>>;

/// Merges a JSON file (optional when empty) and dotted-path overrides onto
/// the defaults. Unknown keys and type mismatches throw ConfigError.
RunConfig parse_config(const std::filesystem::path& file, const Overrides& overrides);
nlohmann::json merge_config(const nlohmann::json& defaults, const nlohmann::json& file, const Overrides& overrides);

/// Splits "--a.b value" and "--a.b=value" pairs. Throws ConfigError on a dangling flag.
Overrides split_overrides(const std::vector<std::string>& args);

/// Full command line (without the program name). Returns 0, 1 (usage) or 2 (runtime).
int run(const std::vector<std::string>& args);

}  // namespace avf::cli
