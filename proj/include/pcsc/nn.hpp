#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "pcsc/ops.hpp"

namespace pcsc {

template <class Real>
using NamedTensors = std::vector<std::pair<std::string, Tensor<Real>>>;

using Rng = std::mt19937_64;

// Xavier/Glorot uniform bound.
inline double xavier_bound(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

template <class Real>
struct Linear {
  Tensor<Real> weight;  // [in, out]
  Tensor<Real> bias;    // [out]

  static Linear init(std::size_t in, std::size_t out, Rng& rng) {
    const double a = xavier_bound(in, out);
    std::uniform_real_distribution<double> dist(-a, a);
    std::vector<Real> w(in * out);
    for (Real& v : w) v = static_cast<Real>(dist(rng));
    Linear l;
    l.weight = Tensor<Real>(Shape{in, out}, std::move(w));
    l.bias = Tensor<Real>(Shape{out}, Real(0));
    l.weight.set_requires_grad();
    l.bias.set_requires_grad();
    return l;
  }

  // Identity map for square layers (weight = I, bias = 0).
  static Linear identity(std::size_t width) {
    Linear l;
    l.weight = Tensor<Real>(Shape{width, width}, Real(0));
    for (std::size_t i = 0; i < width; ++i) l.weight.mutable_data()[i * width + i] = Real(1);
    l.bias = Tensor<Real>(Shape{width}, Real(0));
    l.weight.set_requires_grad();
    l.bias.set_requires_grad();
    return l;
  }

  static Linear zeros(std::size_t in, std::size_t out) {
    Linear l;
    l.weight = Tensor<Real>(Shape{in, out}, Real(0));
    l.bias = Tensor<Real>(Shape{out}, Real(0));
    l.weight.set_requires_grad();
    l.bias.set_requires_grad();
    return l;
  }

  std::size_t in_features() const { return weight.shape()[0]; }
  std::size_t out_features() const { return weight.shape()[1]; }

  // x: [n, in] -> [n, out]
  Tensor<Real> operator()(const Tensor<Real>& x) const { return add(matmul(x, weight), bias); }

  void collect(const std::string& prefix, NamedTensors<Real>& out) const {
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
  }
};

template <class Real>
struct LayerNorm {
  Tensor<Real> gamma, beta;

  static LayerNorm init(std::size_t width) {
    LayerNorm n{Tensor<Real>(Shape{width}, Real(1)), Tensor<Real>(Shape{width}, Real(0))};
    n.gamma.set_requires_grad();
    n.beta.set_requires_grad();
    return n;
  }

  Tensor<Real> operator()(const Tensor<Real>& x) const { return layer_norm(x, gamma, beta); }

  void collect(const std::string& prefix, NamedTensors<Real>& out) const {
    out.emplace_back(prefix + ".gamma", gamma);
    out.emplace_back(prefix + ".beta", beta);
  }
};

// Batch statistics while training, running statistics otherwise. The running
// buffers are updated in place by training-mode calls.
template <class Real>
struct BatchNorm {
  Tensor<Real> gamma, beta;
  Tensor<Real> running_mean, running_var;
  double momentum = 0.1;

  static BatchNorm init(std::size_t width) {
    BatchNorm n{Tensor<Real>(Shape{width}, Real(1)), Tensor<Real>(Shape{width}, Real(0)),
                Tensor<Real>(Shape{width}, Real(0)), Tensor<Real>(Shape{width}, Real(1))};
    n.gamma.set_requires_grad();
    n.beta.set_requires_grad();
    return n;
  }

  Tensor<Real> operator()(const Tensor<Real>& x, bool training) const {
    const Real eps = Real(1e-5);
    if (!training) {
      const std::size_t c = gamma.size();
      std::vector<Real> scale(c), shift(c);
      for (std::size_t j = 0; j < c; ++j) {
        scale[j] = gamma.data()[j] / std::sqrt(running_var.data()[j] + eps);
        shift[j] = beta.data()[j] - running_mean.data()[j] * scale[j];
      }
      // gamma and beta enter through constants here; eval mode is never differentiated.
      return add(mul(x, Tensor<Real>(Shape{c}, std::move(scale))), Tensor<Real>(Shape{c}, std::move(shift)));
    }
    std::vector<double> mu, var;
    Tensor<Real> y = batch_norm(x, gamma, beta, eps, &mu, &var);
    const double n = static_cast<double>(x.shape()[0]);
    auto rm = Tensor<Real>(running_mean).mutable_data();
    auto rv = Tensor<Real>(running_var).mutable_data();
    for (std::size_t j = 0; j < mu.size(); ++j) {
      const double unbiased = n > 1 ? var[j] * n / (n - 1) : var[j];
      rm[j] = static_cast<Real>((1 - momentum) * rm[j] + momentum * mu[j]);
      rv[j] = static_cast<Real>((1 - momentum) * rv[j] + momentum * unbiased);
    }
    return y;
  }

  void collect(const std::string& prefix, NamedTensors<Real>& out) const {
    out.emplace_back(prefix + ".gamma", gamma);
    out.emplace_back(prefix + ".beta", beta);
  }
  void collect_buffers(const std::string& prefix, NamedTensors<Real>& out) const {
    out.emplace_back(prefix + ".running_mean", running_mean);
    out.emplace_back(prefix + ".running_var", running_var);
  }
};

// Per-row head: normalize(x + W2 relu(W1 x + b1) + b2). The skip path makes a
// zeroed second layer an exact identity, which the heads' test mode relies on.
template <class Real>
struct ResidualMlpHead {
  Linear<Real> fc1, fc2;

  static ResidualMlpHead init(std::size_t width, Rng& rng) {
    return {Linear<Real>::init(width, width, rng), Linear<Real>::init(width, width, rng)};
  }

  static ResidualMlpHead identity(std::size_t width, Rng& rng) {
    return {Linear<Real>::init(width, width, rng), Linear<Real>::zeros(width, width)};
  }

  // x: [n, c] -> unit rows [n, c]
  Tensor<Real> operator()(const Tensor<Real>& x) const {
    return l2_normalize(add(x, fc2(relu(fc1(x)))), -1);
  }

  void collect(const std::string& prefix, NamedTensors<Real>& out) const {
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
  }
};

}  // namespace pcsc
