// pcsc command line: gen-data, pretrain, probe, export-assign, inspect-ckpt.
//
// Exit codes: 0 success, 2 configuration error, 3 numeric failure, 1 other.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "pcsc/export.hpp"
#include "pcsc/probe.hpp"

namespace fs = std::filesystem;
using namespace pcsc;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> set;
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string out;
  std::size_t threads = 1;
  std::string precision = "f32";
};

void add_common(CLI::App* app, Common& c, bool with_out = true) {
  app->add_option("--config", c.config, "key = value config file");
  app->add_option("--set", c.set, "config override key=value (repeatable)");
  app->add_option_function<std::uint64_t>(
      "--seed",
      [&c](const std::uint64_t& s) {
        c.seed = s;
        c.seed_given = true;
      },
      "seed for training and data generation");
  if (with_out) app->add_option("--out", c.out, "output directory");
  app->add_option("--threads", c.threads, "kernel threads (1 = strict single-threaded)")->check(CLI::PositiveNumber);
  app->add_option("--precision", c.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
}

TrainConfig load_config(const Common& c, const std::string& fallback = {}) {
  TrainConfig cfg;
  if (!c.config.empty()) cfg = parse_config(c.config);
  else if (!fallback.empty() && fs::exists(fallback)) cfg = parse_config(fallback);
  for (const auto& kv : c.set) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + kv + "' is not key=value", kv);
    set_config_value(cfg, detail::trim(std::string_view(kv).substr(0, eq)), detail::trim(std::string_view(kv).substr(eq + 1)));
  }
  if (c.seed_given) {
    cfg.train.seed = c.seed;
    cfg.data.synthetic.seed = c.seed;
  }
  if (!c.out.empty()) cfg.train.out = c.out;
  validate_config(cfg);
  kernel_threads() = c.threads;
  return cfg;
}

std::vector<PointCloudVideo> load_videos(const std::string& dir, const TrainConfig& cfg) {
  if (dir.empty()) return generate_dataset(cfg.data.synthetic, cfg.data.videos_per_class);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".pcv") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw ConfigError("no .pcv files in " + dir, "data");
  std::vector<PointCloudVideo> out;
  for (const auto& f : files) out.push_back(read_pcv(f.string()));
  return out;
}

// Config sidecar written next to every checkpoint.
std::string sidecar(const std::string& checkpoint) { return (fs::path(checkpoint).parent_path() / "config.txt").string(); }

int gen_data(const Common& c, std::size_t classes, std::size_t per_class, std::size_t points, std::size_t frames,
             double noise, const std::string& out_dir) {
  TrainConfig cfg = load_config(c);
  auto& syn = cfg.data.synthetic;
  if (classes) syn.num_classes = classes;
  if (points) syn.points = points;
  if (frames) syn.frames = frames;
  if (noise >= 0.0) syn.noise = noise;
  if (per_class) cfg.data.videos_per_class = per_class;
  syn.validate();
  fs::create_directories(out_dir);
  std::size_t written = 0;
  for (std::size_t k = 0; k < syn.num_classes; ++k)
    for (std::size_t v = 0; v < cfg.data.videos_per_class; ++v) {
      char name[64];
      std::snprintf(name, sizeof(name), "class%02zu_video%03zu.pcv", k, v);
      write_pcv(generate_synthetic_video(syn, k, v), (fs::path(out_dir) / name).string());
      ++written;
    }
  std::cout << nlohmann::json{{"videos", written}, {"out_dir", out_dir}}.dump() << '\n';
  return 0;
}

template <class Real>
int run_pretrain(const TrainConfig& cfg, const std::string& data_dir, bool quiet) {
  const auto videos = load_videos(data_dir, cfg);
  PretrainOptions opts;
  opts.out_dir = cfg.train.out;
  if (!quiet) opts.on_step = [](const StepRecord& r) { std::cout << metrics_line(r) << '\n'; };
  const auto res = pretrain<Real>(cfg, videos, opts);
  std::cout << nlohmann::json{{"checkpoint", res.checkpoint_path}, {"steps", res.records.size()},
                              {"final_L_total", res.records.empty() ? 0.0 : res.records.back().loss_total}}
                   .dump()
            << '\n';
  return 0;
}

template <class Real>
int run_probe(const TrainConfig& cfg, const std::string& checkpoint, const std::string& data_dir) {
  const auto videos = load_videos(data_dir, cfg);
  const Model<Real> m = checkpoint.empty() ? Model<Real>::init(cfg, cfg.train.seed) : Model<Real>::load(Checkpoint::load(checkpoint), cfg);
  const ProbeResult r = probe_encoder<Real>(m.encoder, videos, cfg);
  std::cout << nlohmann::json{{"accuracy", r.accuracy}, {"train_accuracy", r.train_accuracy}, {"videos", r.videos},
                              {"classes", r.classes}, {"folds", r.folds}, {"encoder", checkpoint.empty() ? "random" : checkpoint}}
                   .dump()
            << '\n';
  return 0;
}

template <class Real>
int run_export(const TrainConfig& cfg, const std::string& checkpoint, const std::string& video_path, std::string out) {
  const Model<Real> m = Model<Real>::load(Checkpoint::load(checkpoint), cfg);
  const PointCloudVideo video = read_pcv(video_path);
  const PointLabels labels = export_assignments(m, video, cfg);
  if (out.empty()) out = (fs::path(video_path).replace_extension(".labels")).string();
  write_labels(labels, out);
  nlohmann::json j{{"labels", out}, {"frames", labels.frames}, {"points", labels.points}};
  if (video.point_labels) j["matched_agreement"] = matched_agreement(labels.labels, *video.point_labels);
  std::cout << j.dump() << '\n';
  return 0;
}

int inspect(const std::string& checkpoint) {
  const Checkpoint ck = Checkpoint::load(checkpoint);
  nlohmann::json tensors = nlohmann::json::array();
  std::size_t total = 0;
  for (const auto& t : ck.tensors()) {
    tensors.push_back({{"name", t.name}, {"dtype", t.dtype == DType::f32 ? "f32" : "f64"}, {"shape", t.shape}});
    total += t.values.size();
  }
  std::cout << nlohmann::json{{"checkpoint", checkpoint}, {"tensors", tensors}, {"values", total}}.dump() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"point cloud video self-supervised pretraining"};
  app.require_subcommand(1);
  Common common;

  auto* gen = app.add_subcommand("gen-data", "write synthetic PCV videos");
  std::size_t classes = 0, per_class = 0, points = 0, frames = 0;
  double noise = -1.0;
  std::string out_dir;
  add_common(gen, common, false);
  gen->add_option("--classes", classes);
  gen->add_option("--videos-per-class", per_class);
  gen->add_option("--points", points);
  gen->add_option("--frames", frames);
  gen->add_option("--noise", noise);
  gen->add_option("--out-dir", out_dir)->required();

  auto* pre = app.add_subcommand("pretrain", "self-supervised pretraining");
  std::string data_dir;
  bool quiet = false;
  add_common(pre, common);
  pre->add_option("--data", data_dir, "directory of .pcv videos (default: synthetic from config)");
  pre->add_flag("--quiet", quiet, "do not echo metrics to stdout");

  auto* probe = app.add_subcommand("probe", "linear probe of a frozen encoder");
  std::string checkpoint;
  add_common(probe, common, false);
  probe->add_option("--checkpoint", checkpoint, "checkpoint (omit for the random-initialization baseline)");
  probe->add_option("--data", data_dir, "directory of labeled .pcv videos");

  auto* exp = app.add_subcommand("export-assign", "per-point prototype labels for one video");
  std::string video_path, labels_out;
  add_common(exp, common, false);
  exp->add_option("--checkpoint", checkpoint)->required();
  exp->add_option("--video", video_path)->required();
  exp->add_option("--labels-out", labels_out, "default: video path with .labels extension");

  auto* ins = app.add_subcommand("inspect-ckpt", "list checkpoint tensors");
  ins->add_option("--checkpoint", checkpoint)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const bool f64 = common.precision == "f64";
    if (gen->parsed()) return gen_data(common, classes, per_class, points, frames, noise, out_dir);
    if (pre->parsed()) {
      const TrainConfig cfg = load_config(common);
      return f64 ? run_pretrain<double>(cfg, data_dir, quiet) : run_pretrain<float>(cfg, data_dir, quiet);
    }
    if (probe->parsed()) {
      const TrainConfig cfg = load_config(common, checkpoint.empty() ? std::string() : sidecar(checkpoint));
      return f64 ? run_probe<double>(cfg, checkpoint, data_dir) : run_probe<float>(cfg, checkpoint, data_dir);
    }
    if (exp->parsed()) {
      const TrainConfig cfg = load_config(common, sidecar(checkpoint));
      return f64 ? run_export<double>(cfg, checkpoint, video_path, labels_out)
                 : run_export<float>(cfg, checkpoint, video_path, labels_out);
    }
    if (ins->parsed()) return inspect(checkpoint);
  } catch (const ConfigError& e) {
    std::cerr << "config error";
    if (!e.key().empty()) std::cerr << " [" << e.key() << "]";
    std::cerr << ": " << e.what() << '\n';
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
