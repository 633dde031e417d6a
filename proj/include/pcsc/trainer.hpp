#pragma once

// Pre-training: model bundle, batched forward pass, one optimizer step per
// batch, checkpoints and the per-step metrics log.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "pcsc/config.hpp"
#include "pcsc/optim.hpp"

namespace pcsc {

template <class Real>
struct Model {
  EncoderParams<Real> encoder;
  AutoregressorParams<Real> ar;
  PredictorHead<Real> head;
  PrototypeSet<Real> protos;
  ClusterPredictor<Real> cpred;

  static Model init(const TrainConfig& cfg, std::uint64_t seed) {
    const std::size_t c = cfg.encoder.width;
    Model m;
    m.encoder = init_encoder<Real>(cfg.encoder, detail::mix_seed(seed, 1, 0));
    m.ar = init_autoregressor<Real>(cfg.ar, detail::mix_seed(seed, 2, 0));
    m.head = PredictorHead<Real>::init(c, detail::mix_seed(seed, 3, 0));
    m.protos = PrototypeSet<Real>::init(cfg.cluster.prototypes, c, detail::mix_seed(seed, 4, 0));
    m.cpred = ClusterPredictor<Real>::init(c, detail::mix_seed(seed, 5, 0));
    return m;
  }

  // Optimizer-managed tensors. S_t and the normalization statistics are
  // excluded: they are running averages.
  NamedTensors<Real> trainable() const {
    NamedTensors<Real> out;
    encoder.collect(out);
    ar.collect(out);
    head.collect(out);
    out.emplace_back("proto.p", protos.prediction);
    cpred.collect(out);
    return out;
  }

  NamedTensors<Real> tensors() const {
    NamedTensors<Real> out = trainable();
    encoder.collect_buffers(out);
    out.emplace_back("proto.t", protos.target);
    return out;
  }

  void save(Checkpoint& ck) const {
    for (const auto& [name, t] : tensors()) ck.add(name, t);
  }

  // Copies every model tensor from the checkpoint; shapes must match cfg.
  static Model load(const Checkpoint& ck, const TrainConfig& cfg) {
    Model m = init(cfg, 0);
    for (auto& [name, t] : m.tensors()) {
      const StoredTensor& s = ck.at(name);
      if (s.shape != t.shape()) {
        throw DimensionError("checkpoint tensor " + name + " has shape " + to_string(s.shape) + ", config expects " +
                             to_string(t.shape()));
      }
      auto dst = Tensor<Real>(t).mutable_data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<Real>(s.values[i]);
    }
    return m;
  }
};

// Weight-independent tube geometry of every segment of a video.
template <class Real>
struct PreparedVideo {
  std::vector<TubeInput<Real>> segments;
  std::optional<std::uint32_t> label;
};

template <class Real>
PreparedVideo<Real> prepare_video(const PointCloudVideo& video, const TrainConfig& cfg) {
  PreparedVideo<Real> out;
  for (const auto& seg : split_segments(video, cfg.data.segments)) out.segments.push_back(prepare_segment<Real>(seg, cfg.encoder));
  out.label = video.video_label;
  return out;
}

// Encodes every segment of every video with one pass through the tube MLPs.
template <class Real>
std::vector<std::vector<SuperpointGrid<Real>>> encode_videos(const std::vector<const PreparedVideo<Real>*>& videos,
                                                             const EncoderParams<Real>& p, bool training = false) {
  std::vector<Real> features;
  std::size_t tubes = 0, members = 0;
  for (const auto* v : videos)
    for (const auto& s : v->segments) {
      if (members != 0 && s.members != members) throw DimensionError("segments disagree on tube size");
      members = s.members;
      features.insert(features.end(), s.features.begin(), s.features.end());
      tubes += s.superpoints();
    }
  const Tensor<Real> emb = encode_tubes(features, tubes, members, p, training);
  const std::size_t c = emb.shape()[1];
  std::vector<std::vector<SuperpointGrid<Real>>> out;
  std::size_t offset = 0;
  for (const auto* v : videos) {
    auto& grids = out.emplace_back();
    for (const auto& s : v->segments) {
      grids.push_back({reshape(slice(emb, 0, offset, s.superpoints()), Shape{s.frames, s.centers, c}), s.positions});
      offset += s.superpoints();
    }
  }
  return out;
}

// Unit target rows Z and projected predictions Q-hat of one video.
template <class Real>
struct VideoForward {
  Tensor<Real> z;  // [n, c]
  Tensor<Real> q;  // [n, c]
};

template <class Real>
VideoForward<Real> forward_video(const std::vector<SuperpointGrid<Real>>& grids, const Model<Real>& m, const TrainConfig& cfg) {
  const std::vector<SuperpointGrid<Real>> inputs(grids.begin(), grids.end() - 1);
  const auto& target = grids.back();
  const auto raw = autoregress(inputs, cfg.ar, m.ar);
  const auto aligned = align_predictions(raw, target.positions, target.frames(), target.centers(), cfg.predictor.k_interp,
                                         cfg.predictor.time_scale);
  return {l2_normalize(target.rows(), -1), predict_head(aligned, m.head).rows()};
}

struct StepRecord {
  long step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss_local = 0.0, loss_proto = 0.0, loss_kl = 0.0, loss_total = 0.0;
  std::size_t bank_fill = 0;
  std::size_t neighbors = 0;
  double positive_similarity = 0.0, negative_similarity = 0.0;
  double wall_time = 0.0;

  nlohmann::ordered_json to_json(bool with_wall_time = true) const {
    nlohmann::ordered_json j;
    j["step"] = step;
    j["epoch"] = epoch;
    j["lr"] = lr;
    j["L_l"] = loss_local;
    j["L_c"] = loss_proto;
    j["L_k"] = loss_kl;
    j["L_total"] = loss_total;
    j["bank_fill"] = bank_fill;
    j["neighbors"] = neighbors;
    j["pos_sim"] = positive_similarity;
    j["neg_sim"] = negative_similarity;
    if (with_wall_time) j["wall_time"] = wall_time;
    return j;
  }
};

// Losses of one batch; the caller owns the tape.
template <class Real>
struct BatchLosses {
  Tensor<Real> local, proto, kl, total;
  Tensor<Real> targets;            // [B * n, c], for the bank
  std::vector<Real> target_protos;  // batch mean of Shat_t, for the EMA
  ContrastOutput<Real> contrast;
};

template <class Real>
BatchLosses<Real> batch_losses(const std::vector<const PreparedVideo<Real>*>& batch, const Model<Real>& m,
                               const MemoryBank<Real>& bank, const TrainConfig& cfg, bool training = true) {
  const auto grids = encode_videos(batch, m.encoder, training);
  std::vector<Tensor<Real>> zs, qs;
  BatchLosses<Real> out;
  const std::size_t k = m.protos.count(), c = cfg.encoder.width;
  out.target_protos.assign(k * c, Real(0));
  std::vector<Tensor<Real>> lc, lk;
  const Real tau_c = static_cast<Real>(cfg.cluster.temperature);
  for (const auto& g : grids) {
    const auto f = forward_video(g, m, cfg);
    zs.push_back(f.z);
    qs.push_back(f.q);
    const Tensor<Real> a_t = soft_assign(f.z, m.protos.target);
    const Tensor<Real> a_p = soft_assign(f.q, m.protos.prediction);
    const Tensor<Real> s_t = update_prototypes(a_t, f.z, m.protos.target).detach();
    const Tensor<Real> s_p = update_prototypes(a_p, f.q, m.protos.prediction);
    lc.push_back(prototype_infonce(s_t, m.cpred(s_p), tau_c));
    if (cfg.cluster.mode == LossMode::prototype_plus_soft_category) lk.push_back(kl_align(a_p, a_t));
    for (std::size_t i = 0; i < k * c; ++i) out.target_protos[i] += s_t.data()[i] / static_cast<Real>(grids.size());
  }
  const Tensor<Real> z = zs.size() == 1 ? zs[0] : concat(zs, 0);
  const Tensor<Real> q = qs.size() == 1 ? qs[0] : concat(qs, 0);
  out.contrast = local_infonce_batch(z, q, bank, cfg.contrast);
  out.local = out.contrast.loss;
  auto avg = [](const std::vector<Tensor<Real>>& v) {
    return v.size() == 1 ? v[0] : mean(reshape(concat(v, 0), Shape{v.size()}));
  };
  auto as_vec = [](std::vector<Tensor<Real>> v) {
    for (auto& t : v) t = reshape(t, Shape{1});
    return v;
  };
  out.proto = avg(as_vec(lc));
  if (!lk.empty()) out.kl = avg(as_vec(lk));
  out.total = total_loss(out.local, reshape(out.proto, Shape{}), lk.empty() ? Tensor<Real>() : reshape(out.kl, Shape{}),
                         cfg.cluster);
  out.targets = z.detach();
  return out;
}

template <class Real>
class Trainer {
 public:
  Trainer(TrainConfig cfg, const std::vector<PointCloudVideo>& videos) : cfg_(std::move(cfg)) {
    cfg_.validate();
    if (videos.empty()) throw ConfigError("pretraining needs at least one video", "data.videos_per_class");
    for (const auto& v : videos) {
      if (v.frames % cfg_.data.segments != 0) {
        throw ConfigError("video of " + std::to_string(v.frames) + " frames does not split into " +
                              std::to_string(cfg_.data.segments) + " segments",
                          "data.segments");
      }
      videos_.push_back(prepare_video<Real>(v, cfg_));
    }
    model_ = Model<Real>::init(cfg_, cfg_.train.seed);
    bank_ = MemoryBank<Real>(cfg_.contrast.bank_size, cfg_.encoder.width);
    optimizer_ = AdamW<Real>(model_.trainable(), {cfg_.train.lr, 0.9, 0.999, 1e-8, cfg_.train.weight_decay});
    schedule_ = {cfg_.train.lr, cfg_.train.lr_min, cfg_.train.warmup_steps,
                 cfg_.train.horizon > 0 ? cfg_.train.horizon : static_cast<long>(total_steps())};
  }

  const TrainConfig& config() const { return cfg_; }
  Model<Real>& model() { return model_; }
  const Model<Real>& model() const { return model_; }
  const MemoryBank<Real>& bank() const { return bank_; }
  const AdamW<Real>& optimizer() const { return optimizer_; }
  const LrSchedule& schedule() const { return schedule_; }
  const std::vector<PreparedVideo<Real>>& videos() const { return videos_; }
  long step_count() const { return step_; }
  std::size_t steps_per_epoch() const { return (videos_.size() + cfg_.train.batch_size - 1) / cfg_.train.batch_size; }
  std::size_t total_steps() const { return steps_per_epoch() * cfg_.train.epochs; }

  // Video order of an epoch; depends only on the seed and epoch number.
  std::vector<std::size_t> epoch_order(std::size_t epoch) const {
    std::vector<std::size_t> order(videos_.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(detail::mix_seed(cfg_.train.seed, 0x5eed, epoch));
    std::shuffle(order.begin(), order.end(), rng);
    return order;
  }

  StepRecord step(const std::vector<std::size_t>& indices, std::size_t epoch = 0) {
    std::vector<const PreparedVideo<Real>*> batch;
    for (std::size_t i : indices) batch.push_back(&videos_.at(i));
    const double lr = schedule_(step_ + 1);
    optimizer_.zero_grad();
    Tape<Real> tape;
    BatchLosses<Real> losses;
    {
      typename Tape<Real>::Scope scope(tape);
      losses = batch_losses(batch, model_, bank_, cfg_);
      StepRecord r = record(losses, epoch, lr);
      if (!std::isfinite(r.loss_total) || !std::isfinite(r.loss_local) || !std::isfinite(r.loss_proto) ||
          !std::isfinite(r.loss_kl)) {
        throw NumericError("non-finite loss at step " + std::to_string(r.step) + ": " + r.to_json(false).dump());
      }
      tape.backward(losses.total);
    }
    try {
      optimizer_.step(lr);
    } catch (const NumericError& e) {
      throw NumericError("step " + std::to_string(step_ + 1) + ": " + e.what());
    }
    if (losses.contrast.no_negatives) {
      std::clog << "warning: step " << step_ + 1 << ": memory bank empty, local contrastive loss is 0\n";
    }
    bank_.enqueue(losses.targets);
    ema_update(model_.protos, losses.target_protos, cfg_.cluster.ema);
    ++step_;
    StepRecord r = record(losses, epoch, lr);
    r.bank_fill = bank_.fill();
    return r;
  }

  void save(Checkpoint& ck) const {
    model_.save(ck);
    bank_.save(ck);
    for (const auto& [name, t] : optimizer_.state()) ck.add(name, t);
    ck.add("train.step", Tensor<Real>::scalar(static_cast<Real>(step_)));
  }

  Checkpoint checkpoint() const {
    Checkpoint ck;
    save(ck);
    return ck;
  }

  // Restores model, bank, optimizer and step counter.
  void restore(const Checkpoint& ck) {
    model_ = Model<Real>::load(ck, cfg_);
    bank_ = MemoryBank<Real>::load(ck);
    optimizer_ = AdamW<Real>(model_.trainable(), optimizer_.options());
    std::vector<std::vector<Real>> m, v;
    for (const auto& [name, t] : model_.trainable()) {
      m.push_back(ck.get<Real>("opt.m." + name).values());
      v.push_back(ck.get<Real>("opt.v." + name).values());
    }
    optimizer_.load_state(static_cast<long>(ck.scalar("opt.step")), std::move(m), std::move(v));
    step_ = static_cast<long>(ck.scalar("train.step"));
  }

 private:
  StepRecord record(const BatchLosses<Real>& l, std::size_t epoch, double lr) const {
    StepRecord r;
    r.step = step_ + 1;
    r.epoch = epoch;
    r.lr = lr;
    r.loss_local = static_cast<double>(l.local.item());
    r.loss_proto = static_cast<double>(l.proto.item());
    r.loss_kl = l.kl.defined() ? static_cast<double>(l.kl.item()) : 0.0;
    r.loss_total = static_cast<double>(l.total.item());
    r.bank_fill = bank_.fill();
    r.neighbors = l.contrast.neighbors_used;
    r.positive_similarity = l.contrast.mean_positive_similarity;
    r.negative_similarity = l.contrast.mean_negative_similarity;
    return r;
  }

  TrainConfig cfg_;
  std::vector<PreparedVideo<Real>> videos_;
  Model<Real> model_;
  MemoryBank<Real> bank_;
  AdamW<Real> optimizer_;
  LrSchedule schedule_;
  long step_ = 0;
};

struct PretrainOptions {
  std::string out_dir;          // empty: nothing is written
  bool checkpoint_every_epoch = true;
  std::function<void(const StepRecord&)> on_step;
};

struct PretrainResult {
  std::string checkpoint_path;
  std::vector<StepRecord> records;
};

// Metrics line without wall_time; wall time is the only nondeterministic field.
inline std::string metrics_line(const StepRecord& r, bool with_wall_time = true) { return r.to_json(with_wall_time).dump(); }

// Runs every configured epoch on an existing trainer.
template <class Real>
PretrainResult run_pretraining(Trainer<Real>& trainer, const PretrainOptions& opts = {}) {
  namespace fs = std::filesystem;
  const TrainConfig& cfg = trainer.config();
  PretrainResult result;
  std::ofstream log;
  if (!opts.out_dir.empty()) {
    fs::create_directories(opts.out_dir);
    std::ofstream(fs::path(opts.out_dir) / "config.txt") << config_to_text(cfg);
    log.open(fs::path(opts.out_dir) / "metrics.jsonl", std::ios::trunc);
  }
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    const auto order = trainer.epoch_order(epoch);
    for (std::size_t b = 0; b < order.size(); b += cfg.train.batch_size) {
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(b),
                                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), b + cfg.train.batch_size)));
      StepRecord r = trainer.step(idx, epoch);
      r.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      if (log.is_open()) log << metrics_line(r) << '\n' << std::flush;
      if (opts.on_step) opts.on_step(r);
      result.records.push_back(r);
    }
    if (!opts.out_dir.empty() && (opts.checkpoint_every_epoch || epoch + 1 == cfg.train.epochs)) {
      trainer.checkpoint().save((fs::path(opts.out_dir) / ("epoch_" + std::to_string(epoch + 1) + ".ckpt")).string());
    }
  }
  if (!opts.out_dir.empty()) {
    result.checkpoint_path = (fs::path(opts.out_dir) / "final.ckpt").string();
    trainer.checkpoint().save(result.checkpoint_path);
  }
  return result;
}

template <class Real>
PretrainResult pretrain(const TrainConfig& cfg, const std::vector<PointCloudVideo>& videos, const PretrainOptions& opts = {}) {
  Trainer<Real> trainer(cfg, videos);
  return run_pretraining(trainer, opts);
}

}  // namespace pcsc
