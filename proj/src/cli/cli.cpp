#include "avf/cli/cli.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include "avf/avfeat/dataset.hpp"
#include "avf/diffcore/checkpoint.hpp"
#include "avf/evalkit/evalkit.hpp"

namespace avf::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string kind_name(const json& v) {
  if (v.is_boolean()) return "boolean";
  if (v.is_number_integer()) return "integer";
  if (v.is_number()) return "number";
  if (v.is_string()) return "string";
  if (v.is_array()) return "array";
  if (v.is_object()) return "object";
  return "null";
}

bool compatible(const json& like, const json& v) {
  if (like.is_number_float()) return v.is_number();
  if (like.is_number_unsigned()) return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
  if (like.is_number_integer()) return v.is_number_integer();
  if (like.is_array()) {
    if (!v.is_array()) return false;
    if (like.empty()) return true;
    for (const auto& e : v) {
      if (!compatible(like.front(), e)) return false;
    }
    return true;
  }
  return like.type() == v.type();
}

void merge_into(json& target, const json& src, const std::string& path) {
  if (!src.is_object()) throw ConfigError("type mismatch at '" + (path.empty() ? "<root>" : path) + "': expected object");
  for (const auto& [key, value] : src.items()) {
    const std::string here = path.empty() ? key : path + "." + key;
    if (!target.contains(key)) throw ConfigError("unknown key '" + here + "'");
    json& slot = target[key];
    if (slot.is_object()) {
      merge_into(slot, value, here);
    } else if (compatible(slot, value)) {
      slot = value;
    } else {
      throw ConfigError("type mismatch at '" + here + "': expected " + kind_name(slot) + ", got " + kind_name(value));
    }
  }
}

json parse_value(const json& like, const std::string& text) {
  if (like.is_string()) return text;
  if (like.is_array() && (like.empty() || like.front().is_string()) && !text.starts_with("[")) {
    json out = json::array();
    std::stringstream ss(text);
    for (std::string item; std::getline(ss, item, ',');) out.push_back(item);
    return out;
  }
  json v = json::parse(text, nullptr, false);
  if (v.is_discarded() && like.is_array()) v = json::parse("[" + text + "]", nullptr, false);
  if (v.is_discarded()) return text;
  return v;
}

std::string timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  localtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y%m%d-%H%M%S");
  return os.str();
}

void write_json(const fs::path& path, const json& j) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp);
    f << j.dump(2) << '\n';
    if (!f) throw std::runtime_error("cannot write " + path.string());
  }
  fs::rename(tmp, path);
}

json read_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  json j = json::parse(f, nullptr, false);
  if (j.is_discarded()) throw std::runtime_error("malformed JSON in " + path.string());
  return j;
}

// Output directory for one verb invocation.
class RunDir {
 public:
  RunDir(const std::string& verb, std::uint64_t seed, const std::string& explicit_dir) {
    if (!explicit_dir.empty()) {
      path_ = explicit_dir;
    } else {
      const char* root = std::getenv("AVF_OUT_ROOT");
      const fs::path base = root && *root ? fs::path(root) : fs::path("runs");
      const std::string stem = verb + "-" + timestamp() + "-s" + std::to_string(seed);
      path_ = base / stem;
      for (int i = 1; fs::exists(path_); ++i) path_ = base / (stem + "-" + std::to_string(i));
    }
    created_ = !fs::exists(path_);
    fs::create_directories(path_);
  }
  ~RunDir() {
    if (!committed_ && created_) {
      std::error_code ec;
      fs::remove_all(path_, ec);
    }
  }
  RunDir(const RunDir&) = delete;
  RunDir& operator=(const RunDir&) = delete;

  const fs::path& path() const { return path_; }
  void commit() { committed_ = true; }

 private:
  fs::path path_;
  bool created_ = false;
  bool committed_ = false;
};

std::string require(const std::string& value, const std::string& key) {
  if (value.empty()) throw UsageError("missing required setting '" + key + "'");
  return value;
}

fs::path existing(const std::string& path, const std::string& what) {
  if (!fs::exists(path)) throw std::runtime_error(what + " not found: " + path);
  return path;
}

void check_audio(const net::NetConfig& net, const feat::Dataset& data) {
  if (net.frame_size != data.size || net.audio_bins != data.bins || net.audio_cols != data.cols) {
    throw std::runtime_error("dataset shape (frame " + std::to_string(data.size) + ", audio " + std::to_string(data.bins) +
                             "x" + std::to_string(data.cols) + ") does not match the network (frame " +
                             std::to_string(net.frame_size) + ", audio " + std::to_string(net.audio_bins) + "x" +
                             std::to_string(net.audio_cols) + ")");
  }
}

// Generator loaded from a checkpoint with the settings it was trained with.
struct LoadedModel {
  net::NetConfig net;
  train::TrainConfig train;
  diff::ParamStore params;
  fs::path dir;
};

LoadedModel load_model(const std::string& path) {
  const fs::path p = existing(require(path, "checkpoint"), "checkpoint");
  diff::Checkpoint ck = diff::load_checkpoint(p);
  LoadedModel m{ck.meta.at("net").get<net::NetConfig>(), ck.meta.at("train").get<train::TrainConfig>(),
                std::move(ck.params), p.parent_path()};
  return m;
}

std::optional<diff::ParamStore> find_discriminator(const fs::path& dir) {
  for (const fs::path& d : {dir, dir.parent_path()}) {
    const fs::path p = d / "discriminator.ckpt";
    if (fs::exists(p)) return diff::load_checkpoint(p).params;
  }
  return std::nullopt;
}

// Clip length used for sampling: the checkpoint's unless the config sets it.
int clip_frames(const json& merged, const LoadedModel& m) {
  const int requested = merged.at("train").at("frames").get<int>();
  return requested != train::TrainConfig{}.frames ? requested : m.train.frames;
}

int cmd_gen_data(RunConfig& cfg, RunDir& run) {
  const fs::path out = run.path() / "data";
  m3so::generate_dataset(cfg.data, {cfg.counts.train, cfg.counts.val, cfg.counts.test}, out);
  std::cout << "dataset written to " << out.string() << '\n';
  return 0;
}

int cmd_train(RunConfig& cfg, RunDir& run) {
  const fs::path root = existing(require(cfg.data_dir, "data_dir"), "dataset");
  const feat::Dataset data = feat::load_dataset(root, "train", cfg.train.frames, cfg.stft);
  std::optional<feat::Dataset> val;
  if (cfg.train.val_every > 0 && fs::exists(root / "val" / "manifest.json")) {
    val = feat::load_dataset(root, "val", cfg.train.frames, cfg.stft, cfg.train.val_clips);
    if (val->count() == 0) val.reset();
  }
  cfg.net.frame_size = data.size;
  cfg.net.audio_bins = data.bins;
  cfg.net.audio_cols = data.cols;
  cfg.train.validate(cfg.net);
  const fs::path frozen = run.path() / "run_config.json";
  if (!fs::exists(frozen)) write_json(frozen, json(cfg));

  const train::RunPaths paths{run.path()};
  train::TrainState state = train::init_state(cfg.net, cfg.train);
  run.commit();  // checkpoints from completed epochs are kept for resuming
  train::fit(state, cfg.net, cfg.train, data, val ? &*val : nullptr, paths, [](const train::EpochReport& r) {
    std::cout << "epoch " << r.epoch << " recon " << r.mean.recon << " kl " << r.mean.kl << " adv_g " << r.mean.adv_g
              << " d " << r.mean.total_d;
    if (r.val_ssim) std::cout << " val_ssim " << *r.val_ssim;
    std::cout << std::endl;
  });
  std::cout << "checkpoints in " << run.path().string() << '\n';
  return 0;
}

int cmd_sample(RunConfig& cfg, RunDir& run, const json& merged) {
  LoadedModel m = load_model(cfg.checkpoint);
  const fs::path root = existing(require(cfg.data_dir, "data_dir"), "dataset");
  cfg.net = m.net;
  cfg.train.seen = m.train.seen;
  cfg.train.frames = clip_frames(merged, m);
  const feat::Dataset data = feat::load_dataset(root, cfg.eval.split, cfg.train.frames, cfg.stft, cfg.eval.clips);
  check_audio(m.net, data);
  write_json(run.path() / "run_config.json", json(cfg));

  const int F = cfg.train.seen, T = cfg.train.frames;
  for (int c = 0; c < data.count(); ++c) {
    const feat::Sample& s = data.samples[static_cast<std::size_t>(c)];
    eval::SampleSpec spec{F, cfg.eval.k, cfg.eval.seed + static_cast<std::uint64_t>(c) * 1000003ULL, cfg.eval.batch};
    const auto futures = eval::sample_futures(m.net, m.params, s.frames, s.audio, spec);
    char name[32];
    std::snprintf(name, sizeof name, "clip_%05d", c);
    const fs::path dir = run.path() / "samples" / name;
    const eval::Sequence truth = eval::frames_of(s.frames, 1, T);
    for (int t = 0; t < T; ++t) {
      char f[32];
      std::snprintf(f, sizeof f, "frame_%03d.pgm", t + 1);
      train::write_pgm(dir / "truth" / f, truth[static_cast<std::size_t>(t)]);
    }
    for (int k = 0; k < cfg.eval.k; ++k) {
      char kd[16];
      std::snprintf(kd, sizeof kd, "k_%03d", k);
      for (int t = F + 1; t <= T; ++t) {
        char f[32];
        std::snprintf(f, sizeof f, "frame_%03d.pgm", t);
        train::write_pgm(dir / kd / f, futures[static_cast<std::size_t>(k)][static_cast<std::size_t>(t - F - 1)]);
      }
    }
    const fs::path wav = root / cfg.eval.split / (std::string(name) + ".wav");
    if (fs::exists(wav)) fs::copy_file(wav, dir / "audio.wav", fs::copy_options::overwrite_existing);
  }
  std::cout << data.count() << " clips x " << cfg.eval.k << " futures written to " << run.path().string() << '\n';
  return 0;
}

int cmd_eval(RunConfig& cfg, RunDir& run, const json& merged) {
  LoadedModel m = load_model(cfg.checkpoint);
  const fs::path root = existing(require(cfg.data_dir, "data_dir"), "dataset");
  cfg.net = m.net;
  cfg.train.seen = m.train.seen;
  cfg.train.frames = clip_frames(merged, m);
  const feat::Dataset data = feat::load_dataset(root, cfg.eval.split, cfg.train.frames, cfg.stft, cfg.eval.clips);
  check_audio(m.net, data);
  const m3so::M3soConfig source = m3so::load_split_config(root, cfg.eval.split);
  write_json(run.path() / "run_config.json", json(cfg));

  eval::EvalOptions opts;
  opts.sample = {cfg.train.seen, cfg.eval.k, cfg.eval.seed, cfg.eval.batch};
  opts.diversity_ks = cfg.eval.diversity_ks;
  if (cfg.eval.block_iou && source.block_enabled) opts.block_size = source.block_size;
  eval::EvalReport rep = eval::evaluate(m.net, m.params, data, opts);

  if (auto disc = find_discriminator(m.dir)) {
    std::vector<double> scores;
    for (int c = 0; c < data.count(); ++c) {
      const feat::Sample& s = data.samples[static_cast<std::size_t>(c)];
      eval::SampleSpec spec = opts.sample;
      spec.seed = opts.sample.seed + static_cast<std::uint64_t>(c) * 1000003ULL;
      const auto futures = eval::sample_futures(m.net, m.params, s.frames, s.audio, spec);
      const auto best = eval::best_of_k(futures, eval::frames_of(s.frames, spec.seen + 1, cfg.train.frames));
      const auto sc = eval::sequence_scores(m.net, *disc, s.frames, s.audio, futures[static_cast<std::size_t>(best.index)],
                                            spec.seen);
      scores.insert(scores.end(), sc.begin(), sc.end());
    }
    if (!scores.empty()) rep.fooling_rate = eval::fooling_rate(scores);
  }
  eval::write_report(run.path(), rep);
  if (cfg.eval.mismatch_probe && data.count() > 1) {
    eval::write_report(run.path() / "mismatch",
                       eval::av_mismatch_probe(m.net, m.params, data, eval::shifted_pairing(data.count()), opts));
  }
  std::cout << "mean ssim " << eval::mean(rep.ssim) << " (copy-last " << eval::mean(rep.copy_last_ssim) << ") over "
            << rep.clips << " clips; report in " << run.path().string() << '\n';
  return 0;
}

struct ReportRow {
  std::string method;
  std::vector<std::optional<double>> ssim, psnr;
  std::optional<double> iou, fooling;
};

std::string cell(const std::optional<double>& v, int precision) {
  if (!v) return "n/a";
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << *v;
  return os.str();
}

int cmd_report(RunConfig& cfg, RunDir& run) {
  if (cfg.reports.empty()) throw UsageError("missing required setting 'reports'");
  write_json(run.path() / "run_config.json", json(cfg));
  const std::vector<int>& hs = cfg.eval.horizons;
  auto pick = [&](const json& curve, int seen) {
    std::vector<std::optional<double>> out;
    for (int h : hs) {
      const int i = h - seen - 1;
      if (curve.is_array() && i >= 0 && i < static_cast<int>(curve.size())) {
        out.emplace_back(curve[static_cast<std::size_t>(i)].get<double>());
      } else {
        out.emplace_back();
      }
    }
    return out;
  };
  auto optional_of = [](const json& v) { return v.is_number() ? std::optional<double>(v.get<double>()) : std::nullopt; };

  std::vector<ReportRow> rows;
  for (const std::string& dir : cfg.reports) {
    const json rep = read_json(existing(dir, "report directory") / "report.json");
    const json rc = read_json(fs::path(dir) / "run_config.json");
    const int seen = rc.at("train").at("seen").get<int>();
    if (rows.empty()) rows.push_back({"Copy last frame", pick(rep.at("copy_last_ssim"), seen), pick(rep.at("copy_last_psnr"), seen), {}, {}});
    rows.push_back({fs::path(dir).filename().string(), pick(rep.at("ssim"), seen), pick(rep.at("psnr"), seen),
                    optional_of(rep.value("block_iou", json())), optional_of(rep.value("fooling_rate", json()))});
  }

  std::ostringstream md, csv;
  md << "| Method |";
  csv << "method";
  for (int h : hs) {
    md << " SSIM f" << h << " |";
    csv << ",ssim_f" << h;
  }
  for (int h : hs) {
    md << " PSNR f" << h << " |";
    csv << ",psnr_f" << h;
  }
  md << " IoU | Fooling rate |\n|---|";
  csv << ",iou,fooling_rate\n";
  for (std::size_t i = 0; i < 2 * hs.size() + 2; ++i) md << "---|";
  md << '\n';
  for (const ReportRow& r : rows) {
    md << "| " << r.method << " |";
    csv << r.method;
    for (const auto& v : r.ssim) {
      md << ' ' << cell(v, 4) << " |";
      csv << ',' << cell(v, 6);
    }
    for (const auto& v : r.psnr) {
      md << ' ' << cell(v, 2) << " |";
      csv << ',' << cell(v, 4);
    }
    md << ' ' << cell(r.iou, 4) << " | " << cell(r.fooling, 4) << " |\n";
    csv << ',' << cell(r.iou, 6) << ',' << cell(r.fooling, 6) << '\n';
  }
  std::ofstream(run.path() / "report.md") << md.str();
  std::ofstream(run.path() / "report.csv") << csv.str();
  std::cout << md.str();
  return 0;
}

}  // namespace

nlohmann::json merge_config(const json& defaults, const json& file, const Overrides& overrides) {
  json merged = defaults;
  if (!file.is_null()) merge_into(merged, file, "");
  for (const auto& [key, text] : overrides) {
    json* node = &merged;
    std::stringstream ss(key);
    std::string part, walked;
    while (std::getline(ss, part, '.')) {
      walked = walked.empty() ? part : walked + "." + part;
      if (!node->is_object() || !node->contains(part)) throw ConfigError("unknown key '" + key + "'");
      node = &(*node)[part];
    }
    if (node->is_object()) throw ConfigError("key '" + key + "' names a section, not a value");
    const json value = parse_value(*node, text);
    if (!compatible(*node, value)) {
      throw ConfigError("type mismatch at '" + key + "': expected " + kind_name(*node) + ", got '" + text + "'");
    }
    *node = value;
  }
  return merged;
}

RunConfig parse_config(const fs::path& file, const Overrides& overrides) {
  json from_file;
  if (!file.empty()) {
    std::ifstream f(file);
    if (!f) throw ConfigError("config file not found: " + file.string());
    from_file = json::parse(f, nullptr, false);
    if (from_file.is_discarded()) throw ConfigError("config file is not valid JSON: " + file.string());
  }
  const json merged = merge_config(json(RunConfig{}), from_file, overrides);
  RunConfig cfg;
  try {
    cfg = merged.get<RunConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid value: ") + e.what());
  }
  return cfg;
}

Overrides split_overrides(const std::vector<std::string>& args) {
  Overrides out;
  for (std::size_t i = 0; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (!a.starts_with("--") || a.size() == 2) throw ConfigError("unexpected argument '" + a + "'");
    const std::string body = a.substr(2);
    const auto eq = body.find('=');
    if (eq != std::string::npos) {
      out.emplace_back(body.substr(0, eq), body.substr(eq + 1));
    } else if (i + 1 < args.size()) {
      out.emplace_back(body, args[++i]);
    } else {
      throw ConfigError("missing value for '--" + body + "'");
    }
  }
  return out;
}

int run(const std::vector<std::string>& args) {
  CLI::App app{"Audio-conditioned video forecasting: data generation, training, sampling and evaluation", "avf"};
  app.require_subcommand(1, 1);
  app.footer("Any config value can be overridden with --<section>.<key> <value>, e.g. --train.lr 0.001.\n"
             "Runs are written under $AVF_OUT_ROOT (default ./runs) unless --run-dir is given.");
  std::string config_path, run_dir;
  const std::vector<std::pair<std::string, std::string>> verbs = {
      {"gen-data", "Generate train/val/test splits of synthetic clips"},
      {"train", "Train the generator and discriminator on a dataset"},
      {"sample", "Dump K sampled futures per clip as PGM frames"},
      {"eval", "Best-of-K SSIM/PSNR curves, diversity, block IoU and fooling rate"},
      {"report", "Markdown and CSV tables from eval run directories"}};
  for (const auto& [name, help] : verbs) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("-c,--config", config_path, "JSON configuration file");
    sub->add_option("--run-dir", run_dir, "Output directory (an existing training run is resumed)");
    sub->allow_extras();
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string verb = sub->get_name();
  RunConfig cfg;
  json merged;
  try {
    json file;
    if (!config_path.empty()) {
      if (!fs::exists(config_path)) throw ConfigError("config file not found: " + config_path);
      file = read_json(config_path);
    }
    merged = merge_config(json(RunConfig{}), file, split_overrides(sub->remaining()));
    cfg = merged.get<RunConfig>();
  } catch (const std::exception& e) {
    std::cerr << "avf " << verb << ": " << e.what() << '\n';
    return 1;
  }

  try {
    std::uint64_t seed = cfg.eval.seed;
    if (verb == "gen-data") seed = cfg.data.seed;
    if (verb == "train") seed = cfg.train.seed;
    if (verb == "train") {
      cfg.train.validate(cfg.net);
    } else if (verb == "gen-data") {
      cfg.data.validate();
    }
    RunDir dir(verb, seed, run_dir);
    if (verb == "gen-data") {
      write_json(dir.path() / "run_config.json", json(cfg));
      cmd_gen_data(cfg, dir);
    } else if (verb == "train") {
      cmd_train(cfg, dir);
    } else if (verb == "sample") {
      cmd_sample(cfg, dir, merged);
    } else if (verb == "eval") {
      cmd_eval(cfg, dir, merged);
    } else {
      cmd_report(cfg, dir);
    }
    dir.commit();
    return 0;
  } catch (const UsageError& e) {
    std::cerr << "avf " << verb << ": " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "avf " << verb << ": " << e.what() << '\n';
    return 2;
  }
}

}  // namespace avf::cli
