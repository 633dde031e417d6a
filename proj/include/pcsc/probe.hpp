#pragma once

// Linear probe: frozen encoder, mean-pooled superpoint embeddings per video,
// one linear softmax layer trained with AdamW, top-1 accuracy on held-out
// stratified folds.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <vector>

#include "pcsc/trainer.hpp"

namespace pcsc {

// Mean of every superpoint embedding over all segments, eval mode.
template <class Real>
std::vector<double> video_features(const PreparedVideo<Real>& video, const EncoderParams<Real>& encoder) {
  const std::vector<const PreparedVideo<Real>*> one{&video};
  const auto grids = encode_videos(one, encoder, false);
  std::vector<double> f;
  std::size_t count = 0;
  for (const auto& g : grids[0]) {
    const auto rows = g.rows();
    const std::size_t c = rows.shape()[1];
    if (f.empty()) f.assign(c, 0.0);
    for (std::size_t i = 0; i < rows.shape()[0]; ++i)
      for (std::size_t j = 0; j < c; ++j) f[j] += rows.data()[i * c + j];
    count += rows.shape()[0];
  }
  for (double& v : f) v /= static_cast<double>(count);
  return f;
}

// Stratified fold of every video: per class, a seeded shuffle deals videos
// round-robin into `folds` folds.
inline std::vector<std::size_t> stratified_folds(const std::vector<std::uint32_t>& labels, std::size_t folds,
                                                 std::uint64_t seed) {
  std::map<std::uint32_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  std::vector<std::size_t> fold(labels.size(), 0);
  std::size_t next = 0;
  for (auto& [label, idx] : by_class) {
    std::mt19937_64 rng(detail::mix_seed(seed, label, 0x9b0e));
    std::shuffle(idx.begin(), idx.end(), rng);
    // Continue the deal across classes so small classes do not all start at fold 0.
    for (std::size_t i : idx) fold[i] = next++ % folds;
  }
  return fold;
}

struct ProbeResult {
  double accuracy = 0.0;        // pooled over held-out folds
  double train_accuracy = 0.0;  // mean over folds
  std::size_t videos = 0, classes = 0, folds = 0;
};

namespace detail {

// Fits a softmax classifier on standardized train rows and returns the
// predicted class of every row of `eval`.
inline std::vector<std::uint32_t> fit_predict(const std::vector<std::vector<double>>& features,
                                              const std::vector<std::uint32_t>& labels, const std::vector<std::size_t>& train,
                                              const std::vector<std::size_t>& eval, std::size_t classes, const ProbeConfig& cfg) {
  const std::size_t c = features[0].size();
  std::vector<double> mu(c, 0.0), sd(c, 0.0);
  for (std::size_t i : train)
    for (std::size_t j = 0; j < c; ++j) mu[j] += features[i][j];
  for (double& m : mu) m /= static_cast<double>(train.size());
  for (std::size_t i : train)
    for (std::size_t j = 0; j < c; ++j) sd[j] += (features[i][j] - mu[j]) * (features[i][j] - mu[j]);
  for (double& s : sd) s = std::sqrt(s / static_cast<double>(train.size())) + 1e-8;
  auto matrix = [&](const std::vector<std::size_t>& idx) {
    std::vector<double> v;
    v.reserve(idx.size() * c);
    for (std::size_t i : idx)
      for (std::size_t j = 0; j < c; ++j) v.push_back((features[i][j] - mu[j]) / sd[j]);
    return Tensor<double>(Shape{idx.size(), c}, std::move(v));
  };
  const Tensor<double> x_train = matrix(train);
  std::vector<std::uint32_t> target;
  for (std::size_t r = 0; r < train.size(); ++r) target.push_back(static_cast<std::uint32_t>(r * classes + labels[train[r]]));

  Linear<double> clf = Linear<double>::zeros(c, classes);
  NamedTensors<double> params;
  clf.collect("probe", params);
  AdamW<double> opt(params, {cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    opt.zero_grad();
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    const Tensor<double> logits = clf(x_train);
    tape.backward(mean(sub(logsumexp(logits, 1), take(logits, target, Shape{train.size()}))));
    opt.step(cfg.lr);
  }
  const Tensor<double> logits = clf(matrix(eval));
  std::vector<std::uint32_t> pred;
  for (std::size_t r = 0; r < eval.size(); ++r) {
    const auto row = logits.data().subspan(r * classes, classes);
    pred.push_back(static_cast<std::uint32_t>(std::max_element(row.begin(), row.end()) - row.begin()));
  }
  return pred;
}

}  // namespace detail

// Stratified k-fold cross-fitting: each fold is scored by a classifier trained
// on the other folds, and the held-out predictions are pooled.
inline ProbeResult linear_probe(const std::vector<std::vector<double>>& features, const std::vector<std::uint32_t>& labels,
                                const ProbeConfig& cfg) {
  if (labels.size() != features.size()) {
    throw ConfigError("probe has " + std::to_string(labels.size()) + " labels for " + std::to_string(features.size()) +
                          " videos",
                      "probe.labels");
  }
  if (features.size() < 2) throw ConfigError("probe needs at least two labeled videos", "probe.labels");
  const std::size_t classes = *std::max_element(labels.begin(), labels.end()) + 1;
  const std::size_t folds = std::min(cfg.folds, features.size());
  const auto fold = stratified_folds(labels, folds, cfg.seed);
  ProbeResult res;
  res.videos = features.size();
  res.classes = classes;
  res.folds = folds;
  std::size_t hit = 0;
  for (std::size_t f = 0; f < folds; ++f) {
    std::vector<std::size_t> train, test;
    for (std::size_t i = 0; i < fold.size(); ++i) (fold[i] == f ? test : train).push_back(i);
    const auto pred = detail::fit_predict(features, labels, train, test, classes, cfg);
    for (std::size_t r = 0; r < test.size(); ++r) hit += pred[r] == labels[test[r]];
    const auto fit = detail::fit_predict(features, labels, train, train, classes, cfg);
    std::size_t train_hit = 0;
    for (std::size_t r = 0; r < train.size(); ++r) train_hit += fit[r] == labels[train[r]];
    res.train_accuracy += static_cast<double>(train_hit) / static_cast<double>(train.size()) / static_cast<double>(folds);
  }
  res.accuracy = static_cast<double>(hit) / static_cast<double>(features.size());
  return res;
}

template <class Real>
ProbeResult probe_encoder(const EncoderParams<Real>& encoder, const std::vector<PreparedVideo<Real>>& videos,
                          const ProbeConfig& cfg) {
  std::vector<std::vector<double>> features;
  std::vector<std::uint32_t> labels;
  for (const auto& v : videos) {
    if (!v.label) throw ConfigError("probe video without a label", "probe.labels");
    features.push_back(video_features(v, encoder));
    labels.push_back(*v.label);
  }
  return linear_probe(features, labels, cfg);
}

template <class Real>
ProbeResult probe_encoder(const EncoderParams<Real>& encoder, const std::vector<PointCloudVideo>& videos, const TrainConfig& cfg) {
  std::vector<PreparedVideo<Real>> prepared;
  for (const auto& v : videos) prepared.push_back(prepare_video<Real>(v, cfg));
  return probe_encoder(encoder, prepared, cfg.probe);
}

}  // namespace pcsc
