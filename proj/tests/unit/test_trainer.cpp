#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "pcsc/trainer.hpp"

using namespace pcsc;
namespace fs = std::filesystem;

namespace {

TrainConfig tiny_config() {
  TrainConfig c;
  c.data.synthetic.num_classes = 2;
  c.data.synthetic.points = 64;
  c.data.synthetic.frames = 8;
  c.data.videos_per_class = 2;
  c.data.segments = 2;
  c.encoder.centers = 4;
  c.encoder.hidden = 8;
  c.encoder.width = 8;
  c.ar = {1, 2, 8, 16, true};
  c.contrast.bank_size = 32;
  c.contrast.warmup_margin = 2;
  c.cluster.prototypes = 3;
  c.train.batch_size = 2;
  c.train.epochs = 2;
  c.train.warmup_steps = 1;
  return c;
}

std::vector<PointCloudVideo> tiny_videos(const TrainConfig& c) { return generate_dataset(c.data.synthetic, c.data.videos_per_class); }

std::string read_all(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("pcsc_unit_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST(Trainer, StepsProduceFiniteLossesAndFillTheBank) {
  const auto cfg = tiny_config();
  Trainer<double> t(cfg, tiny_videos(cfg));
  EXPECT_EQ(t.total_steps(), 4u);
  const auto r1 = t.step({0, 1});
  EXPECT_EQ(r1.loss_local, 0.0);  // empty bank
  EXPECT_EQ(r1.bank_fill, 8u);
  const auto r2 = t.step({2, 3});
  EXPECT_GT(r2.loss_local, 0.0);
  EXPECT_TRUE(std::isfinite(r2.loss_total));
  EXPECT_NEAR(r2.loss_total, r2.loss_local + r2.loss_proto, 1e-12);
  EXPECT_EQ(r2.neighbors, 3u);
  EXPECT_EQ(t.step_count(), 2);
}

TEST(Trainer, GradientsReachEveryTrainableTensor) {
  auto cfg = tiny_config();
  cfg.cluster.mode = LossMode::prototype_plus_soft_category;
  Trainer<double> t(cfg, tiny_videos(cfg));
  t.step({0, 1});  // fill the bank so the local term is live
  const auto params = t.model().trainable();
  for (auto [name, p] : params) p.zero_grad();
  std::vector<const PreparedVideo<double>*> batch{&t.videos()[2], &t.videos()[3]};
  Tape<double> tape;
  {
    Tape<double>::Scope scope(tape);
    const auto l = batch_losses(batch, t.model(), t.bank(), cfg);
    tape.backward(l.total);
  }
  for (const auto& [name, p] : params) {
    double norm = 0;
    for (double g : p.grad()) norm += g * g;
    EXPECT_GT(norm, 0.0) << name;
  }
  // S_t moves by EMA only and is not optimized
  for (const auto& [name, p] : params) EXPECT_NE(name, "proto.t");
}

TEST(Trainer, IdenticalSeedsGiveBitIdenticalRuns) {
  const auto cfg = tiny_config();
  const auto videos = tiny_videos(cfg);
  const auto a = scratch("det_a"), b = scratch("det_b");
  const auto ra = pretrain<double>(cfg, videos, {a.string(), true, {}});
  const auto rb = pretrain<double>(cfg, videos, {b.string(), true, {}});
  ASSERT_EQ(ra.records.size(), 4u);
  for (std::size_t i = 0; i < ra.records.size(); ++i)
    EXPECT_EQ(metrics_line(ra.records[i], false), metrics_line(rb.records[i], false));
  EXPECT_EQ(read_all(a / "final.ckpt"), read_all(b / "final.ckpt"));
  EXPECT_EQ(read_all(a / "epoch_1.ckpt"), read_all(b / "epoch_1.ckpt"));
  EXPECT_EQ(read_all(a / "config.txt"), read_all(b / "config.txt"));
  EXPECT_TRUE(fs::exists(a / "metrics.jsonl"));
  auto other = cfg;
  other.train.seed = 1;
  const auto rc = pretrain<double>(other, videos);
  EXPECT_NE(metrics_line(ra.records.back(), false), metrics_line(rc.records.back(), false));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Trainer, ThreadCountDoesNotChangeResults) {
  const auto cfg = tiny_config();
  const auto videos = tiny_videos(cfg);
  const auto one = pretrain<double>(cfg, videos);
  kernel_threads() = 4;
  const auto four = pretrain<double>(cfg, videos);
  kernel_threads() = 1;
  for (std::size_t i = 0; i < one.records.size(); ++i)
    EXPECT_EQ(metrics_line(one.records[i], false), metrics_line(four.records[i], false));
}

TEST(Trainer, CheckpointRoundTripIsBitExact) {
  const auto cfg = tiny_config();
  Trainer<double> t(cfg, tiny_videos(cfg));
  t.step({0, 1});
  t.step({2, 3});
  const auto bytes = t.checkpoint().encode();
  const auto loaded = Model<double>::load(Checkpoint::decode(bytes), cfg);
  for (const auto& [name, x] : t.model().tensors()) {
    bool found = false;
    for (const auto& [n2, y] : loaded.tensors())
      if (n2 == name) {
        found = true;
        EXPECT_EQ(x.values(), y.values()) << name;
      }
    EXPECT_TRUE(found) << name;
  }
  const std::vector<const PreparedVideo<double>*> batch{&t.videos()[0], &t.videos()[3]};
  const auto a = batch_losses(batch, t.model(), t.bank(), cfg, false);
  const auto b = batch_losses(batch, loaded, MemoryBank<double>::load(Checkpoint::decode(bytes)), cfg, false);
  EXPECT_EQ(a.total.item(), b.total.item());
  EXPECT_EQ(a.targets.values(), b.targets.values());
  EXPECT_EQ(Checkpoint::decode(bytes).encode(), bytes);
}

TEST(Trainer, FloatCheckpointRoundTripIsBitExact) {
  const auto cfg = tiny_config();
  Trainer<float> t(cfg, tiny_videos(cfg));
  t.step({0, 1});
  const auto ck = Checkpoint::decode(t.checkpoint().encode());
  EXPECT_EQ(ck.at("enc.point1.weight").dtype, DType::f32);
  const auto loaded = Model<float>::load(ck, cfg);
  const std::vector<const PreparedVideo<float>*> batch{&t.videos()[1]};
  EXPECT_EQ(encode_videos(batch, t.model().encoder)[0][0].embeddings.values(),
            encode_videos(batch, loaded.encoder)[0][0].embeddings.values());
}

TEST(Trainer, RestoreContinuesExactly) {
  const auto cfg = tiny_config();
  const auto videos = tiny_videos(cfg);
  Trainer<double> straight(cfg, videos);
  straight.step({0, 1});
  const auto ck = straight.checkpoint();
  const auto want = straight.step({2, 3});
  Trainer<double> resumed(cfg, videos);
  resumed.restore(Checkpoint::decode(ck.encode()));
  EXPECT_EQ(resumed.step_count(), 1);
  const auto got = resumed.step({2, 3});
  EXPECT_EQ(metrics_line(got, false), metrics_line(want, false));
  EXPECT_EQ(resumed.checkpoint().encode(), straight.checkpoint().encode());
}

TEST(Trainer, ShapeMismatchOnLoadIsReported) {
  const auto cfg = tiny_config();
  Trainer<double> t(cfg, tiny_videos(cfg));
  auto wider = cfg;
  wider.encoder.hidden = 12;
  EXPECT_THROW(Model<double>::load(t.checkpoint(), wider), DimensionError);
}

TEST(Trainer, ZeroLearningRateLeavesParametersUnchanged) {
  auto cfg = tiny_config();
  cfg.train.lr = 0.0;
  Trainer<double> t(cfg, tiny_videos(cfg));
  const auto before = t.model().trainable();
  std::vector<std::vector<double>> copy;
  for (const auto& [n, p] : before) copy.push_back(p.values());
  t.step({0, 1});
  t.step({2, 3});
  const auto after = t.model().trainable();
  for (std::size_t i = 0; i < after.size(); ++i) EXPECT_EQ(after[i].second.values(), copy[i]) << after[i].first;
}

TEST(Trainer, EpochOrderDependsOnSeedAndEpochOnly) {
  const auto cfg = tiny_config();
  Trainer<double> t(cfg, tiny_videos(cfg));
  Trainer<double> u(cfg, tiny_videos(cfg));
  EXPECT_EQ(t.epoch_order(3), u.epoch_order(3));
  auto sorted = t.epoch_order(0);
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(sorted, (std::vector<std::size_t>{0, 1, 2, 3}));
}

TEST(Trainer, RejectsVideosThatDoNotSplit) {
  auto cfg = tiny_config();
  auto videos = tiny_videos(cfg);
  videos[0].frames = 7;
  videos[0].coords.resize(7 * 64 * 3);
  EXPECT_THROW(Trainer<double>(cfg, videos), ConfigError);
}
