#pragma once

// Prototype clustering: soft assignments, assignment-weighted prototype
// aggregates, aggregate InfoNCE, KL alignment of assignments, total objective.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <type_traits>
#include <vector>

#include "pcsc/checkpoint.hpp"
#include "pcsc/nn.hpp"

namespace pcsc {

enum class LossMode : std::uint8_t { prototype_only, prototype_plus_soft_category };

inline const char* to_string(LossMode m) {
  return m == LossMode::prototype_only ? "prototype_only" : "prototype_plus_soft_category";
}

struct LossConfig {
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  LossMode mode = LossMode::prototype_only;
  double temperature = 0.01;  // clustering temperature
  std::size_t prototypes = 10;
  double ema = 0.99;  // target prototype momentum

  void validate() const {
    if (!(lambda1 >= 0.0)) throw ConfigError("cluster.lambda1 must be non-negative", "cluster.lambda1");
    if (!(lambda2 >= 0.0)) throw ConfigError("cluster.lambda2 must be non-negative", "cluster.lambda2");
    if (!(temperature > 0.0)) throw ConfigError("cluster.temperature must be positive", "cluster.temperature");
    if (prototypes < 1) throw ConfigError("cluster.prototypes must be at least 1", "cluster.prototypes");
    if (!(ema >= 0.0 && ema <= 1.0)) throw ConfigError("cluster.ema must lie in [0, 1]", "cluster.ema");
  }
};

// S_t (target) and S_p (prediction), each [k, c], normalized on read. S_t
// has no gradient path (its consumers are detached) and moves by EMA.
template <class Real>
struct PrototypeSet {
  Tensor<Real> target;
  Tensor<Real> prediction;

  static PrototypeSet init(std::size_t k, std::size_t width, std::uint64_t seed) {
    Rng rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    auto draw = [&] {
      std::vector<Real> v(k * width);
      for (Real& x : v) x = static_cast<Real>(g(rng));
      return Tensor<Real>(Shape{k, width}, std::move(v));
    };
    PrototypeSet s{draw(), draw()};
    s.prediction.set_requires_grad();
    return s;
  }

  std::size_t count() const { return target.shape()[0]; }

  void collect(NamedTensors<Real>& out) const {
    out.emplace_back("proto.t", target);
    out.emplace_back("proto.p", prediction);
  }
};

// A = softmax_k(normalize(Z) . normalize(S)^T). Z: [n, c] or [l, r, c];
// the result has Z's leading shape with a trailing k.
template <class Real>
Tensor<Real> soft_assign(const Tensor<Real>& z, const Tensor<Real>& s) {
  if (s.rank() != 2) throw DimensionError("prototypes must be [k, c]");
  const std::size_t k = s.shape()[0], c = s.shape()[1];
  if (k < 2) throw ConfigError("soft assignment needs at least 2 prototypes", "cluster.prototypes");
  if (z.shape().back() != c) throw DimensionError("soft_assign width mismatch: " + to_string(z.shape()) + " vs " + to_string(s.shape()));
  Shape out = z.shape();
  out.back() = k;
  const Tensor<Real> zr = l2_normalize(reshape(z, Shape{z.size() / c, c}), -1);
  return reshape(softmax(matmul(zr, transpose(l2_normalize(s, -1))), -1), out);
}

// Shat[m] = normalize(sum_i A[i, m] Z[i] / sum_i A[i, m]). Rows whose total
// weight is below 1e-8 fall back to normalize(S[m]).
template <class Real>
Tensor<Real> update_prototypes(const Tensor<Real>& a, const Tensor<Real>& z, const Tensor<Real>& s) {
  const std::size_t k = a.shape().back(), c = z.shape().back();
  const std::size_t n = a.size() / k;
  if (z.size() / c != n) throw DimensionError("update_prototypes: assignment and embedding counts differ");
  if (s.rank() != 2 || s.shape()[0] != k || s.shape()[1] != c) throw DimensionError("update_prototypes: prototype shape mismatch");
  const Tensor<Real> at = transpose(reshape(a, Shape{n, k}));  // [k, n]
  const Tensor<Real> mass = sum(at, 1, true);                   // [k, 1]
  std::vector<Real> dead(k, Real(0)), live(k, Real(1));
  bool any_dead = false;
  for (std::size_t m = 0; m < k; ++m)
    if (mass.data()[m] < Real(1e-8)) {
      dead[m] = Real(1);
      live[m] = Real(0);
      any_dead = true;
    }
  Tensor<Real> avg = div(matmul(at, reshape(z, Shape{n, c})), clamp_min(mass, Real(1e-30)));
  if (any_dead) {
    avg = add(mul(avg, Tensor<Real>(Shape{k, 1}, live)), mul(l2_normalize(s, -1), Tensor<Real>(Shape{k, 1}, dead)));
  }
  return l2_normalize(avg, -1);
}

template <class Real>
struct ClusterPredictor {
  ResidualMlpHead<Real> mlp;

  static ClusterPredictor init(std::size_t width, std::uint64_t seed) {
    Rng rng(seed);
    return {ResidualMlpHead<Real>::init(width, rng)};
  }
  static ClusterPredictor identity(std::size_t width, std::uint64_t seed) {
    Rng rng(seed);
    return {ResidualMlpHead<Real>::identity(width, rng)};
  }

  Tensor<Real> operator()(const Tensor<Real>& s_hat) const { return mlp(s_hat); }

  void collect(NamedTensors<Real>& out) const { mlp.collect("cpred", out); }
};

template <class Real>
Tensor<Real> cluster_predictor(const Tensor<Real>& s_hat_p, const ClusterPredictor<Real>& p) {
  return p(s_hat_p);
}

// Mean over m of -log(exp(t_m.p_m / tau) / sum_m' exp(t_m.p_m' / tau)).
// The target aggregates are detached.
template <class Real>
Tensor<Real> prototype_infonce(const Tensor<Real>& s_hat_t, const Tensor<Real>& s_hat_p, Real tau) {
  if (s_hat_t.shape() != s_hat_p.shape() || s_hat_t.rank() != 2) throw DimensionError("prototype_infonce shape mismatch");
  const std::size_t k = s_hat_t.shape()[0];
  if (k < 2) throw ConfigError("prototype InfoNCE needs at least 2 prototypes", "cluster.prototypes");
  if (!(tau > Real(0))) throw ConfigError("temperature must be positive", "cluster.temperature");
  const Tensor<Real> logits = mul_scalar(matmul(s_hat_t.detach(), transpose(s_hat_p)), Real(1) / tau);  // [k, k]
  std::vector<std::uint32_t> diag(k);
  for (std::size_t m = 0; m < k; ++m) diag[m] = static_cast<std::uint32_t>(m * k + m);
  return mean(sub(logsumexp(logits, 1), take(logits, std::move(diag), Shape{k})));
}

// Mean over rows of sum_m a_p (log a_p - log a_t), logs clamped at 1e-12,
// A_t detached.
template <class Real>
Tensor<Real> kl_align(const Tensor<Real>& a_p, const Tensor<Real>& a_t) {
  if (a_p.shape() != a_t.shape()) throw DimensionError("kl_align shape mismatch");
  const std::size_t k = a_p.shape().back();
  const Tensor<Real> lt = log(clamp_min(a_t.detach(), Real(1e-12)));
  const Tensor<Real> per = mul(a_p, sub(log(clamp_min(a_p, Real(1e-12))), lt));
  return mul_scalar(sum(per), Real(k) / static_cast<Real>(a_p.size()));
}

// L_l + lambda1 L_c (+ lambda2 L_k in prototype_plus_soft_category mode).
// l_k may be undefined in prototype_only mode.
template <class Real>
Tensor<Real> total_loss(const Tensor<Real>& l_l, const Tensor<Real>& l_c, const Tensor<Real>& l_k, const LossConfig& cfg) {
  cfg.validate();
  Tensor<Real> total = add(l_l, mul_scalar(l_c, static_cast<Real>(cfg.lambda1)));
  if (cfg.mode == LossMode::prototype_plus_soft_category) {
    if (!l_k.defined()) throw ConfigError("soft-category mode needs the KL term", "cluster.mode");
    total = add(total, mul_scalar(l_k, static_cast<Real>(cfg.lambda2)));
  }
  return total;
}

// S_t <- ema * S_t + (1 - ema) * Shat_t, in place, outside any tape.
template <class Real>
void ema_update(PrototypeSet<Real>& protos, std::type_identity_t<std::span<const Real>> s_hat_t, double ema) {
  auto dst = protos.target.mutable_data();
  if (dst.size() != s_hat_t.size()) throw DimensionError("ema_update shape mismatch");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    dst[i] = static_cast<Real>(ema * static_cast<double>(dst[i]) + (1.0 - ema) * static_cast<double>(s_hat_t[i]));
  }
}

}  // namespace pcsc
