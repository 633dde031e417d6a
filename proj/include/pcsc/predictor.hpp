#pragma once

// Causal transformer autoregressor over the superpoints of the first L-1
// segments, inverse-distance interpolation of its predictions onto the target
// segment's superpoint positions, and the projection head.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <type_traits>
#include <vector>

#include "pcsc/encoder.hpp"

namespace pcsc {

struct AutoregressorConfig {
  std::size_t depth = 2;
  std::size_t heads = 4;
  std::size_t width = 64;  // token width, must equal the encoder output width
  std::size_t feedforward = 128;
  bool causal = true;

  void validate() const {
    if (heads == 0 || width % heads != 0) throw ConfigError("ar.heads must divide the token width", "ar.heads");
    if (feedforward == 0) throw ConfigError("ar.feedforward must be positive", "ar.feedforward");
  }
};

enum class PredictionStage { raw, aligned, projected };

template <class Real>
struct PredictionGrid {
  Tensor<Real> embeddings;      // [l, r, c]
  std::vector<Real> positions;  // l * r * 4
  PredictionStage stage = PredictionStage::raw;

  std::size_t frames() const { return embeddings.shape()[0]; }
  std::size_t centers() const { return embeddings.shape()[1]; }
  std::size_t width() const { return embeddings.shape()[2]; }
  Tensor<Real> rows() const { return reshape(embeddings, Shape{frames() * centers(), width()}); }
};

template <class Real>
struct AttentionBlock {
  LayerNorm<Real> norm1, norm2;
  Linear<Real> query, key, value, proj;
  Linear<Real> ff1, ff2;

  void collect(const std::string& prefix, NamedTensors<Real>& out) const {
    norm1.collect(prefix + ".norm1", out);
    query.collect(prefix + ".query", out);
    key.collect(prefix + ".key", out);
    value.collect(prefix + ".value", out);
    proj.collect(prefix + ".proj", out);
    norm2.collect(prefix + ".norm2", out);
    ff1.collect(prefix + ".ff1", out);
    ff2.collect(prefix + ".ff2", out);
  }
};

template <class Real>
struct AutoregressorParams {
  Linear<Real> position_embed;  // (t, x, y, z) -> c
  std::vector<AttentionBlock<Real>> blocks;

  void collect(NamedTensors<Real>& out) const {
    position_embed.collect("ar.pos", out);
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect("ar.block" + std::to_string(i), out);
  }
};

template <class Real>
AutoregressorParams<Real> init_autoregressor(const AutoregressorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  AutoregressorParams<Real> p;
  p.position_embed = Linear<Real>::init(4, cfg.width, rng);
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    AttentionBlock<Real> b;
    b.norm1 = LayerNorm<Real>::init(cfg.width);
    b.norm2 = LayerNorm<Real>::init(cfg.width);
    b.query = Linear<Real>::init(cfg.width, cfg.width, rng);
    b.key = Linear<Real>::init(cfg.width, cfg.width, rng);
    b.value = Linear<Real>::init(cfg.width, cfg.width, rng);
    b.proj = Linear<Real>::init(cfg.width, cfg.width, rng);
    b.ff1 = Linear<Real>::init(cfg.width, cfg.feedforward, rng);
    b.ff2 = Linear<Real>::init(cfg.feedforward, cfg.width, rng);
    p.blocks.push_back(std::move(b));
  }
  return p;
}

// Sinusoidal encoding of sequence indices: [tokens, width].
template <class Real>
Tensor<Real> sinusoidal_encoding(std::size_t tokens, std::size_t width) {
  std::vector<Real> pe(tokens * width);
  for (std::size_t pos = 0; pos < tokens; ++pos)
    for (std::size_t i = 0; i < width; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(width));
      const double a = static_cast<double>(pos) * freq;
      pe[pos * width + i] = static_cast<Real>(i % 2 == 0 ? std::sin(a) : std::cos(a));
    }
  return Tensor<Real>(Shape{tokens, width}, std::move(pe));
}

namespace detail {

// Additive attention mask; masked logits get a large negative value so their
// softmax weight underflows to exactly zero.
template <class Real>
Tensor<Real> causal_mask(std::size_t tokens) {
  std::vector<Real> m(tokens * tokens, Real(0));
  for (std::size_t i = 0; i < tokens; ++i)
    for (std::size_t j = i + 1; j < tokens; ++j) m[i * tokens + j] = Real(-1e9);
  return Tensor<Real>(Shape{tokens, tokens}, std::move(m));
}

template <class Real>
Tensor<Real> self_attention(const Tensor<Real>& x, const AttentionBlock<Real>& b, std::size_t heads,
                            const Tensor<Real>* mask) {
  const std::size_t width = x.shape()[1];
  const std::size_t dh = width / heads;
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(dh));
  const Tensor<Real> q = b.query(x), k = b.key(x), v = b.value(x);
  std::vector<Tensor<Real>> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const auto qh = slice(q, 1, h * dh, dh);
    const auto kh = slice(k, 1, h * dh, dh);
    const auto vh = slice(v, 1, h * dh, dh);
    auto scores = mul_scalar(matmul(qh, transpose(kh)), scale);
    if (mask) scores = add(scores, *mask);
    outs.push_back(matmul(softmax(scores, -1), vh));
  }
  return b.proj(heads == 1 ? outs[0] : concat(outs, 1));
}

}  // namespace detail

// Token outputs for every input superpoint: [(L-1) * l * r, c], ordered by
// (segment, frame, superpoint).
template <class Real>
Tensor<Real> autoregress_tokens(const std::vector<SuperpointGrid<Real>>& inputs, const AutoregressorConfig& cfg,
                                const AutoregressorParams<Real>& p) {
  if (inputs.empty()) throw DimensionError("autoregress needs at least one input segment");
  cfg.validate();
  std::vector<Tensor<Real>> rows;
  std::vector<Real> pos;
  for (const auto& g : inputs) {
    if (g.width() != cfg.width) {
      throw ConfigError("encoder width " + std::to_string(g.width()) + " does not match autoregressor width " +
                            std::to_string(cfg.width),
                        "ar.width");
    }
    rows.push_back(g.rows());
    pos.insert(pos.end(), g.positions.begin(), g.positions.end());
  }
  Tensor<Real> x = rows.size() == 1 ? rows[0] : concat(rows, 0);
  const std::size_t tokens = x.shape()[0];
  x = add(x, sinusoidal_encoding<Real>(tokens, cfg.width));
  x = add(x, p.position_embed(Tensor<Real>(Shape{tokens, 4}, std::move(pos))));
  const Tensor<Real> mask = detail::causal_mask<Real>(tokens);
  for (const auto& b : p.blocks) {
    x = add(x, detail::self_attention(b.norm1(x), b, cfg.heads, cfg.causal ? &mask : nullptr));
    x = add(x, b.ff2(relu(b.ff1(b.norm2(x)))));
  }
  return x;
}

// Predictions Q: the outputs at the last input segment's token slots, carrying
// that segment's positions.
template <class Real>
PredictionGrid<Real> autoregress(const std::vector<SuperpointGrid<Real>>& inputs, const AutoregressorConfig& cfg,
                                 const AutoregressorParams<Real>& p) {
  const Tensor<Real> tokens = autoregress_tokens(inputs, cfg, p);
  const auto& last = inputs.back();
  const std::size_t n = last.frames() * last.centers();
  const Tensor<Real> q = slice(tokens, 0, tokens.shape()[0] - n, n);
  return {reshape(q, Shape{last.frames(), last.centers(), cfg.width}), last.positions, PredictionStage::raw};
}

// Dense [targets, sources] inverse-distance weights over the k nearest sources
// by 4D distance, with time differences multiplied by time_scale.
template <class Real>
std::vector<Real> interpolation_weights(std::span<const Real> source_positions, std::span<const Real> target_positions,
                                        std::size_t k, double time_scale) {
  const std::size_t ns = source_positions.size() / 4, nt = target_positions.size() / 4;
  const std::size_t kk = std::min(k, ns);
  std::vector<Real> w(nt * ns, Real(0));
  std::vector<std::pair<double, std::uint32_t>> dist(ns);
  for (std::size_t i = 0; i < nt; ++i) {
    const Real* t = target_positions.data() + i * 4;
    for (std::size_t j = 0; j < ns; ++j) {
      const Real* s = source_positions.data() + j * 4;
      const double dt = (static_cast<double>(t[0]) - s[0]) * time_scale;
      double d2 = dt * dt;
      for (int a = 1; a < 4; ++a) {
        const double dx = static_cast<double>(t[a]) - s[a];
        d2 += dx * dx;
      }
      dist[j] = {std::sqrt(d2), static_cast<std::uint32_t>(j)};
    }
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(kk), dist.end());
    double total = 0.0;
    for (std::size_t q = 0; q < kk; ++q) total += 1.0 / std::max(dist[q].first, 1e-8);
    for (std::size_t q = 0; q < kk; ++q) {
      w[i * ns + dist[q].second] = static_cast<Real>((1.0 / std::max(dist[q].first, 1e-8)) / total);
    }
  }
  return w;
}

// Q-hat: predictions interpolated onto the target positions.
template <class Real>
PredictionGrid<Real> align_predictions(const PredictionGrid<Real>& q, std::type_identity_t<std::span<const Real>> target_positions,
                                       std::size_t target_frames, std::size_t target_centers, std::size_t k_interp,
                                       double time_scale) {
  if (k_interp < 1) throw ConfigError("predictor.k_interp must be at least 1", "predictor.k_interp");
  if (q.positions.empty()) throw DimensionError("align_predictions: empty prediction grid");
  if (target_positions.size() != target_frames * target_centers * 4) throw DimensionError("target position count mismatch");
  const std::size_t nt = target_frames * target_centers;
  const std::size_t ns = q.frames() * q.centers();
  Tensor<Real> w(Shape{nt, ns}, interpolation_weights<Real>(q.positions, target_positions, k_interp, time_scale));
  Tensor<Real> out = matmul(w, q.rows());
  return {reshape(out, Shape{target_frames, target_centers, q.width()}),
          std::vector<Real>(target_positions.begin(), target_positions.end()), PredictionStage::aligned};
}

template <class Real>
struct PredictorHead {
  ResidualMlpHead<Real> mlp;

  static PredictorHead init(std::size_t width, std::uint64_t seed) {
    Rng rng(seed);
    return {ResidualMlpHead<Real>::init(width, rng)};
  }
  // Zeroed second layer: the head reduces to row normalization.
  static PredictorHead identity(std::size_t width, std::uint64_t seed) {
    Rng rng(seed);
    return {ResidualMlpHead<Real>::identity(width, rng)};
  }

  void collect(NamedTensors<Real>& out) const { mlp.collect("pred", out); }
};

template <class Real>
PredictionGrid<Real> predict_head(const PredictionGrid<Real>& aligned, const PredictorHead<Real>& head) {
  if (aligned.width() != head.mlp.fc1.in_features()) throw DimensionError("predict_head width mismatch");
  Tensor<Real> out = head.mlp(aligned.rows());
  return {reshape(out, aligned.embeddings.shape()), aligned.positions, PredictionStage::projected};
}

}  // namespace pcsc
