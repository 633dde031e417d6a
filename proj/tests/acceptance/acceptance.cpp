// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pcsc/export.hpp"
#include "pcsc/probe.hpp"
#include "pcsc/trainer.hpp"

using namespace pcsc;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

void report(bool ok, const std::string& name, const std::string& detail) {
  if (!ok) ++failures;
  std::printf("%s %s: %s\n", ok ? "PASS" : "FAIL", name.c_str(), detail.c_str());
  std::fflush(stdout);
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Runs a filtered slice of the unit binary and checks its wall time.
std::pair<bool, std::string> run_filtered(const std::string& unit_tests, const fs::path& work, const std::string& name,
                                          const std::string& filter, double limit_s) {
  const auto log = work / (name + ".log");
  const std::string cmd = "\"" + unit_tests + "\" --gtest_filter='" + filter + "' > \"" + log.string() + "\" 2>&1";
  const auto t0 = Clock::now();
  const int rc = std::system(cmd.c_str());
  const double dt = seconds_since(t0);
  const std::string out = slurp(log);
  std::size_t ran = 0;
  const auto pos = out.rfind("[==========] ");
  if (pos != std::string::npos) ran = std::strtoul(out.c_str() + pos + 13, nullptr, 10);
  return {rc == 0 && ran > 0 && dt < limit_s, fmt("%zu tests, exit %d, %.1f s (limit %.0f s), log %s", ran, rc, dt, limit_s, log.c_str())};
}

void gtest_suite(const std::string& unit_tests, const fs::path& work, const std::string& name, const std::string& filter,
                 double limit_s) {
  const auto [ok, detail] = run_filtered(unit_tests, work, name, filter, limit_s);
  report(ok, name, detail);
}

struct SeedRun {
  double baseline = 0, trained = 0;
  double first10 = 0, last = 0, seconds = 0;
  std::size_t steps = 0;
  bool finite = true;
  std::optional<Model<float>> model;
};

SeedRun train_and_probe(const TrainConfig& base, const std::vector<PointCloudVideo>& videos, std::uint64_t seed,
                        const fs::path& out) {
  TrainConfig cfg = base;
  cfg.train.seed = seed;
  cfg.probe.seed = seed;
  Trainer<float> trainer(cfg, videos);
  SeedRun r;
  r.baseline = probe_encoder(trainer.model().encoder, trainer.videos(), cfg.probe).accuracy;
  PretrainOptions opts;
  opts.out_dir = out.string();
  opts.checkpoint_every_epoch = false;
  const auto t0 = Clock::now();
  const auto res = run_pretraining(trainer, opts);
  r.seconds = seconds_since(t0);
  r.steps = res.records.size();
  for (const auto& rec : res.records)
    for (double v : {rec.loss_total, rec.loss_local, rec.loss_proto, rec.loss_kl, rec.lr, rec.positive_similarity,
                     rec.negative_similarity})
      r.finite = r.finite && std::isfinite(v);
  for (std::size_t i = 0; i < 10 && i < res.records.size(); ++i) r.first10 += res.records[i].loss_total / 10.0;
  r.last = res.records.empty() ? NAN : res.records.back().loss_total;
  r.trained = probe_encoder(trainer.model().encoder, trainer.videos(), cfg.probe).accuracy;
  r.model = trainer.model();
  std::printf("  seed %llu: %zu steps %.1f s, loss %.4f -> %.4f, probe %.3f (baseline %.3f)\n",
              static_cast<unsigned long long>(seed), r.steps, r.seconds, r.first10, r.last, r.trained, r.baseline);
  std::fflush(stdout);
  return r;
}

void determinism(const fs::path& work, bool unit_ok, const std::string& unit_detail) {
  TrainConfig cfg;
  cfg.train.epochs = 1;
  const auto videos = generate_dataset(cfg.data.synthetic, cfg.data.videos_per_class);
  const auto a = work / "det_a", b = work / "det_b";
  fs::remove_all(a);
  fs::remove_all(b);
  const auto ra = pretrain<double>(cfg, videos, {a.string(), true, {}});
  const auto rb = pretrain<double>(cfg, videos, {b.string(), true, {}});
  bool same_log = ra.records.size() == rb.records.size();
  for (std::size_t i = 0; same_log && i < ra.records.size(); ++i)
    same_log = metrics_line(ra.records[i], false) == metrics_line(rb.records[i], false);
  const std::string ck_a = slurp(a / "final.ckpt"), ck_b = slurp(b / "final.ckpt");
  const bool same_ckpt = !ck_a.empty() && ck_a == ck_b && slurp(a / "epoch_0.ckpt") == slurp(b / "epoch_0.ckpt");

  // reload into a fresh trainer and compare a forward pass bit for bit
  Trainer<double> live(cfg, videos);
  live.restore(Checkpoint::load((a / "final.ckpt").string()));
  const auto model = Model<double>::load(Checkpoint::decode(live.checkpoint().encode()), cfg);
  std::vector<const PreparedVideo<double>*> batch;
  for (std::size_t i = 0; i < live.videos().size(); i += 9) batch.push_back(&live.videos()[i]);
  const auto x = batch_losses(batch, live.model(), live.bank(), cfg, false);
  const auto y = batch_losses(batch, model, live.bank(), cfg, false);
  const bool same_forward = x.total.item() == y.total.item() && x.targets.values() == y.targets.values() &&
                            x.local.item() == y.local.item() && x.target_protos == y.target_protos;
  report(unit_ok && same_log && same_ckpt && same_forward, "determinism-and-persistence",
         fmt("f64 single-thread, %zu steps x2: metrics %s, checkpoints %s (%zu bytes), reload forward %s; unit checks: %s",
             ra.records.size(), same_log ? "identical" : "differ", same_ckpt ? "identical" : "differ", ck_a.size(),
             same_forward ? "bit-exact" : "differs", unit_detail.c_str()));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance"};
  std::string work_dir = "acceptance_work", unit_tests;
  bool skip_training = false;
  app.add_option("--work", work_dir, "scratch directory");
  app.add_option("--unit-tests", unit_tests, "path to the unit test binary")->required();
  app.add_flag("--skip-training", skip_training, "only the fast suites");
  CLI11_PARSE(app, argc, argv);
  const fs::path work(work_dir);
  fs::create_directories(work);
  kernel_threads() = 1;

  gtest_suite(unit_tests, work, "gradient-suite", "*Gradients*:Encoder.Gradients*:Predictor.Gradients*", 120);
  gtest_suite(unit_tests, work, "oracle-suite",
              "ContrastOracle.AllSchemesMatchBruteForce:ContrastOracle.SelectionsMatchRankCounting:"
              "UpdatePrototypesOracle.*:AlignOracle.*:Predictor.InterpolationMatchesBruteForce",
              60);
  gtest_suite(unit_tests, work, "invariant-suite",
              "Engine.SoftmaxRowsSumToOne:SoftAssign.RowsSumToOne*:ContrastProperty.CardinalityOrderingAndPartition:"
              "Bank.FifoOverwritesOldest:Encoder.*Invariance*:Predictor.CausalMaskHidesLaterTokens:KlAlignProperty.*",
              120);
  gtest_suite(unit_tests, work, "reduction-check",
              "ContrastOracle.ReducesToStandardInfoNCE:ContrastOracle.BatchWithoutNeighborsAndFullRatioIsStandardInfoNCE", 60);
  const auto [unit_ok, unit_detail] =
      run_filtered(unit_tests, work, "determinism-unit",
                   "Trainer.IdenticalSeeds*:Trainer.*RoundTrip*:Trainer.RestoreContinuesExactly:Trainer.ThreadCount*", 300);
  determinism(work, unit_ok, unit_detail);
  if (skip_training) return failures == 0 ? 0 : 1;

  const TrainConfig cfg;
  const auto videos = generate_dataset(cfg.data.synthetic, cfg.data.videos_per_class);
  std::printf("  default config: %zu videos, %zu steps per run\n", videos.size(),
              cfg.train.epochs * ((videos.size() + cfg.train.batch_size - 1) / cfg.train.batch_size));
  std::vector<SeedRun> runs;
  for (std::uint64_t s = 0; s < 3; ++s) runs.push_back(train_and_probe(cfg, videos, s, work / fmt("default_seed%llu", s)));

  const auto& d = runs[0];
  const double ratio = d.last / d.first10;
  report(d.steps >= 300 && d.seconds < 600 && d.finite && ratio <= 0.5, "desk-scale-training",
         fmt("%zu steps in %.1f s (limit 600), final/first-10 loss %.3f (limit 0.5), all finite %s", d.steps, d.seconds,
             ratio, d.finite ? "yes" : "no"));

  bool all = true;
  std::string detail;
  for (std::size_t s = 0; s < runs.size(); ++s) {
    const double gain = 100 * (runs[s].trained - runs[s].baseline);
    all = all && gain >= 15.0;
    detail += fmt("seed %zu %+.1f pts (%.1f vs %.1f)%s", s, gain, 100 * runs[s].trained, 100 * runs[s].baseline,
                  s + 1 < runs.size() ? ", " : "");
  }
  report(all, "representation-quality", detail + "; need >= +15 on every seed");

  TrainConfig ablated = cfg;
  ablated.contrast.negative_ratio = 1.0;
  ablated.contrast.neighbors = 0;
  double mean_default = 0, mean_ablated = 0;
  for (std::uint64_t s = 0; s < 3; ++s) {
    mean_default += runs[s].trained / 3;
    mean_ablated += train_and_probe(ablated, videos, s, work / fmt("ablated_seed%llu", s)).trained / 3;
  }
  report(100 * mean_default >= 100 * mean_ablated - 2, "ablation-direction",
         fmt("default %.1f%% vs ratio=1,K=0 %.1f%% (3-seed means), need default >= ablated - 2", 100 * mean_default,
             100 * mean_ablated));

  // two-part articulated videos: body vs arm
  std::vector<std::uint16_t> pred, truth;
  std::vector<std::size_t> groups;
  std::size_t n_videos = 0;
  for (const auto& v : videos) {
    if (v.video_label && cfg.data.synthetic.families[*v.video_label % cfg.data.synthetic.families.size()] ==
                             MotionFamily::articulation) {
      const auto labels = export_assignments(*d.model, v, cfg);
      pred.insert(pred.end(), labels.labels.begin(), labels.labels.end());
      truth.insert(truth.end(), v.point_labels->begin(), v.point_labels->end());
      groups.push_back(labels.labels.size());
      ++n_videos;
    }
  }
  const auto pt = permutation_test(pred, truth, groups, 999, 0);
  report(n_videos > 0 && pt.p_value < 0.01, "prototype-semantics",
         fmt("%zu articulated videos, matched agreement %.4f vs permutation mean %.4f, p = %.4f (999 permutations, need < 0.01)",
             n_videos, pt.observed, pt.null_mean, pt.p_value));

  std::printf("%s: %d criteria failed\n", failures == 0 ? "ALL PASS" : "SOME FAIL", failures);
  return failures == 0 ? 0 : 1;
}
