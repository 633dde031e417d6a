#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "pcsc/nn.hpp"

namespace pcsc {

struct AdamWOptions {
  double lr = 8e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

// Adam with decoupled weight decay. Moment buffers are held per parameter in
// registration order.
template <class Real>
class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(NamedTensors<Real> params, AdamWOptions opts = {}) : params_(std::move(params)), opts_(opts) {
    for (const auto& [name, p] : params_) {
      m_.emplace_back(p.size(), Real(0));
      v_.emplace_back(p.size(), Real(0));
    }
  }

  AdamWOptions& options() { return opts_; }
  const AdamWOptions& options() const { return opts_; }
  long step_count() const { return step_; }
  const NamedTensors<Real>& params() const { return params_; }

  void zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
  }

  // Applies one update with the given learning rate. Throws NumericError,
  // leaving parameters and state untouched, if any gradient is non-finite.
  void step(double lr) {
    for (const auto& [name, p] : params_) {
      for (Real g : p.grad()) {
        if (!std::isfinite(g)) throw NumericError("adamw: non-finite gradient in " + name);
      }
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(step_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Tensor<Real>& p = params_[k].second;
      auto w = p.mutable_data();
      auto g = p.grad();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        m[i] = static_cast<Real>(opts_.beta1 * m[i] + (1.0 - opts_.beta1) * gi);
        v[i] = static_cast<Real>(opts_.beta2 * v[i] + (1.0 - opts_.beta2) * gi * gi);
        const double mhat = static_cast<double>(m[i]) / bc1;
        const double vhat = static_cast<double>(v[i]) / bc2;
        double wi = static_cast<double>(w[i]);
        wi -= lr * opts_.weight_decay * wi;
        wi -= lr * mhat / (std::sqrt(vhat) + opts_.eps);
        w[i] = static_cast<Real>(wi);
      }
    }
  }

  // Moment buffers as "opt.m.<name>" / "opt.v.<name>" plus "opt.step".
  NamedTensors<Real> state() const {
    NamedTensors<Real> out;
    out.emplace_back("opt.step", Tensor<Real>::scalar(static_cast<Real>(step_)));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      out.emplace_back("opt.m." + params_[k].first, Tensor<Real>(params_[k].second.shape(), m_[k]));
      out.emplace_back("opt.v." + params_[k].first, Tensor<Real>(params_[k].second.shape(), v_[k]));
    }
    return out;
  }

  void load_state(long step, std::vector<std::vector<Real>> m, std::vector<std::vector<Real>> v) {
    if (m.size() != params_.size() || v.size() != params_.size()) throw DimensionError("optimizer state size mismatch");
    for (std::size_t k = 0; k < params_.size(); ++k) {
      if (m[k].size() != params_[k].second.size() || v[k].size() != params_[k].second.size()) {
        throw DimensionError("optimizer state shape mismatch for " + params_[k].first);
      }
    }
    step_ = step;
    m_ = std::move(m);
    v_ = std::move(v);
  }

 private:
  NamedTensors<Real> params_;
  AdamWOptions opts_;
  std::vector<std::vector<Real>> m_, v_;
  long step_ = 0;
};

// Linear warmup from 0 over warmup_steps, then cosine decay from peak to
// floor, reaching the floor at horizon and staying there.
struct LrSchedule {
  double peak = 8e-4;
  double floor = 0.0;
  long warmup_steps = 0;
  long horizon = 1;

  double operator()(long step) const {
    if (warmup_steps > 0 && step < warmup_steps) return peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
    if (step >= horizon) return floor;
    const double span = static_cast<double>(std::max<long>(1, horizon - warmup_steps));
    const double progress = static_cast<double>(step - warmup_steps) / span;
    return floor + 0.5 * (peak - floor) * (1.0 + std::cos(std::numbers::pi * progress));
  }
};

}  // namespace pcsc
