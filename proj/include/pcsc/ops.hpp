#pragma once

// Differentiable operations over pcsc::Tensor.
//
// Broadcasting follows right-aligned extents: each trailing dimension must be
// equal or 1 in one operand. Reductions take an axis (negative counts from
// the end) and optionally keep it as extent 1.

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <vector>

#include "pcsc/tensor.hpp"

namespace pcsc {

namespace detail {

inline std::size_t norm_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return static_cast<std::size_t>(axis);
}

// (outer, len, inner) view of a shape around one axis.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit a;
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  a.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

inline Shape reduced_shape(const Shape& s, std::size_t axis, bool keepdim) {
  Shape out = s;
  if (keepdim) {
    out[axis] = 1;
  } else {
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  return out;
}

// Element index maps for a broadcast binary op; empty maps mean identity.
struct BroadcastPlan {
  Shape out;
  std::vector<std::uint32_t> ia, ib;
  bool same = false;
};

inline std::shared_ptr<BroadcastPlan> plan_broadcast(const Shape& a, const Shape& b) {
  auto plan = std::make_shared<BroadcastPlan>();
  if (a == b) {
    plan->out = a;
    plan->same = true;
    return plan;
  }
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r), pa(r, 1), pb(r, 1);
  for (std::size_t i = 0; i < a.size(); ++i) pa[r - a.size() + i] = a[i];
  for (std::size_t i = 0; i < b.size(); ++i) pb[r - b.size() + i] = b[i];
  for (std::size_t i = 0; i < r; ++i) {
    if (pa[i] == pb[i] || pb[i] == 1) {
      out[i] = pa[i];
    } else if (pa[i] == 1) {
      out[i] = pb[i];
    } else {
      throw DimensionError("cannot broadcast " + to_string(a) + " with " + to_string(b));
    }
  }
  std::vector<std::size_t> sa(r, 0), sb(r, 0);
  std::size_t acc_a = 1, acc_b = 1;
  for (std::size_t i = r; i-- > 0;) {
    sa[i] = pa[i] == 1 ? 0 : acc_a;
    sb[i] = pb[i] == 1 ? 0 : acc_b;
    acc_a *= pa[i];
    acc_b *= pb[i];
  }
  const std::size_t n = numel(out);
  plan->ia.resize(n);
  plan->ib.resize(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t k = 0; k < n; ++k) {
    plan->ia[k] = static_cast<std::uint32_t>(oa);
    plan->ib[k] = static_cast<std::uint32_t>(ob);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < out[d]) break;
      oa -= sa[d] * out[d];
      ob -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
  plan->out = std::move(out);
  return plan;
}

enum class BinOp { add, sub, mul, div };

template <class Real>
Tensor<Real> binary(const Tensor<Real>& a, const Tensor<Real>& b, BinOp op) {
  auto plan = plan_broadcast(a.shape(), b.shape());
  const std::size_t n = numel(plan->out);
  const auto& xa = a.values();
  const auto& xb = b.values();
  std::vector<Real> out(n);
  auto at = [&](std::size_t k) { return plan->same ? k : plan->ia[k]; };
  auto bt = [&](std::size_t k) { return plan->same ? k : plan->ib[k]; };
  for (std::size_t k = 0; k < n; ++k) {
    const Real u = xa[at(k)], v = xb[bt(k)];
    switch (op) {
      case BinOp::add: out[k] = u + v; break;
      case BinOp::sub: out[k] = u - v; break;
      case BinOp::mul: out[k] = u * v; break;
      case BinOp::div: out[k] = u / v; break;
    }
  }
  static constexpr const char* names[] = {"add", "sub", "mul", "div"};
  return make_op<Real>(names[static_cast<int>(op)], plan->out, std::move(out), {&a, &b}, [plan, op](Node<Real>& self) {
    Node<Real>& pa = *self.parents[0];
    Node<Real>& pb = *self.parents[1];
    auto* ga = grad_of(pa);
    auto* gb = grad_of(pb);
    const auto& g = self.grad;
    for (std::size_t k = 0; k < g.size(); ++k) {
      const std::size_t i = plan->same ? k : plan->ia[k];
      const std::size_t j = plan->same ? k : plan->ib[k];
      switch (op) {
        case BinOp::add:
          if (ga) (*ga)[i] += g[k];
          if (gb) (*gb)[j] += g[k];
          break;
        case BinOp::sub:
          if (ga) (*ga)[i] += g[k];
          if (gb) (*gb)[j] -= g[k];
          break;
        case BinOp::mul:
          if (ga) (*ga)[i] += g[k] * pb.data[j];
          if (gb) (*gb)[j] += g[k] * pa.data[i];
          break;
        case BinOp::div:
          if (ga) (*ga)[i] += g[k] / pb.data[j];
          if (gb) (*gb)[j] -= g[k] * pa.data[i] / (pb.data[j] * pb.data[j]);
          break;
      }
    }
  });
}

// y = f(x) elementwise; dfdx(x, y) gives the local derivative.
template <class Real, class F, class D>
Tensor<Real> unary(const char* name, const Tensor<Real>& x, F f, D dfdx) {
  const auto& xv = x.values();
  std::vector<Real> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return make_op<Real>(name, x.shape(), std::move(out), {&x}, [dfdx](Node<Real>& self) {
    Node<Real>& p = *self.parents[0];
    auto* gp = grad_of(p);
    if (!gp) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) (*gp)[i] += self.grad[i] * dfdx(p.data[i], self.data[i]);
  });
}

template <class Real>
void check_finite(const Tensor<Real>& x, const char* op) {
  for (Real v : x.values()) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

}  // namespace detail

template <class Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) { return detail::binary(a, b, detail::BinOp::add); }
template <class Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) { return detail::binary(a, b, detail::BinOp::sub); }
template <class Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) { return detail::binary(a, b, detail::BinOp::mul); }
template <class Real>
Tensor<Real> div(const Tensor<Real>& a, const Tensor<Real>& b) { return detail::binary(a, b, detail::BinOp::div); }

template <class Real>
Tensor<Real> operator+(const Tensor<Real>& a, const Tensor<Real>& b) { return add(a, b); }
template <class Real>
Tensor<Real> operator-(const Tensor<Real>& a, const Tensor<Real>& b) { return sub(a, b); }
template <class Real>
Tensor<Real> operator*(const Tensor<Real>& a, const Tensor<Real>& b) { return mul(a, b); }
template <class Real>
Tensor<Real> operator/(const Tensor<Real>& a, const Tensor<Real>& b) { return div(a, b); }

template <class Real>
Tensor<Real> add_scalar(const Tensor<Real>& x, Real c) {
  return detail::unary<Real>("add_scalar", x, [c](Real v) { return v + c; }, [](Real, Real) { return Real(1); });
}

template <class Real>
Tensor<Real> mul_scalar(const Tensor<Real>& x, Real c) {
  return detail::unary<Real>("mul_scalar", x, [c](Real v) { return v * c; }, [c](Real, Real) { return c; });
}

template <class Real>
Tensor<Real> neg(const Tensor<Real>& x) { return mul_scalar(x, Real(-1)); }

template <class Real>
Tensor<Real> exp(const Tensor<Real>& x) {
  return detail::unary<Real>("exp", x, [](Real v) { return std::exp(v); }, [](Real, Real y) { return y; });
}

template <class Real>
Tensor<Real> log(const Tensor<Real>& x) {
  return detail::unary<Real>("log", x, [](Real v) { return std::log(v); }, [](Real v, Real) { return Real(1) / v; });
}

template <class Real>
Tensor<Real> relu(const Tensor<Real>& x) {
  return detail::unary<Real>("relu", x, [](Real v) { return v > Real(0) ? v : Real(0); },
                             [](Real v, Real) { return v > Real(0) ? Real(1) : Real(0); });
}

// max(x, lo); the gradient passes only where x > lo.
template <class Real>
Tensor<Real> clamp_min(const Tensor<Real>& x, Real lo) {
  return detail::unary<Real>("clamp_min", x, [lo](Real v) { return v > lo ? v : lo; },
                             [lo](Real v, Real) { return v > lo ? Real(1) : Real(0); });
}

template <class Real>
Tensor<Real> reshape(const Tensor<Real>& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape " + to_string(x.shape()) + " -> " + to_string(shape) + " changes element count");
  }
  std::vector<Real> out = x.values();
  return detail::make_op<Real>("reshape", std::move(shape), std::move(out), {&x}, [](Node<Real>& self) {
    auto* gp = detail::grad_of(*self.parents[0]);
    if (!gp) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) (*gp)[i] += self.grad[i];
  });
}

template <class Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw DimensionError("matmul " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  const auto& x = a.values();
  const auto& y = b.values();
  std::vector<Real> out(m * n, Real(0));
  parallel_for(0, m, [&](std::size_t i) {
    Real* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Real s = x[i * k + p];
      if (s == Real(0)) continue;
      const Real* brow = y.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += s * brow[j];
    }
  });
  return detail::make_op<Real>("matmul", Shape{m, n}, std::move(out), {&a, &b}, [m, k, n](Node<Real>& self) {
    Node<Real>& pa = *self.parents[0];
    Node<Real>& pb = *self.parents[1];
    const auto& g = self.grad;
    if (auto* ga = detail::grad_of(pa)) {
      // dA = G * B^T
      parallel_for(0, m, [&](std::size_t i) {
        for (std::size_t p = 0; p < k; ++p) {
          Real s = 0;
          const Real* brow = pb.data.data() + p * n;
          const Real* grow = g.data() + i * n;
          for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
          (*ga)[i * k + p] += s;
        }
      });
    }
    if (auto* gb = detail::grad_of(pb)) {
      // dB = A^T * G
      parallel_for(0, k, [&](std::size_t p) {
        Real* out_row = gb->data() + p * n;
        for (std::size_t i = 0; i < m; ++i) {
          const Real s = pa.data[i * k + p];
          if (s == Real(0)) continue;
          const Real* grow = g.data() + i * n;
          for (std::size_t j = 0; j < n; ++j) out_row[j] += s * grow[j];
        }
      });
    }
  });
}

template <class Real>
Tensor<Real> transpose(const Tensor<Real>& x) {
  if (x.rank() != 2) throw DimensionError("transpose needs rank 2, got " + to_string(x.shape()));
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  const auto& v = x.values();
  std::vector<Real> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = v[i * c + j];
  return detail::make_op<Real>("transpose", Shape{c, r}, std::move(out), {&x}, [r, c](Node<Real>& self) {
    auto* gp = detail::grad_of(*self.parents[0]);
    if (!gp) return;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) (*gp)[i * c + j] += self.grad[j * r + i];
  });
}

template <class Real>
Tensor<Real> sum(const Tensor<Real>& x) {
  Real s = 0;
  for (Real v : x.values()) s += v;
  return detail::make_op<Real>("sum", Shape{}, std::vector<Real>{s}, {&x}, [](Node<Real>& self) {
    auto* gp = detail::grad_of(*self.parents[0]);
    if (!gp) return;
    for (Real& g : *gp) g += self.grad[0];
  });
}

template <class Real>
Tensor<Real> mean(const Tensor<Real>& x) {
  return mul_scalar(sum(x), Real(1) / static_cast<Real>(x.size()));
}

template <class Real>
Tensor<Real> sum(const Tensor<Real>& x, int axis, bool keepdim = false) {
  const std::size_t ax = detail::norm_axis(axis, x.rank());
  const auto sp = detail::split_axis(x.shape(), ax);
  const auto& v = x.values();
  std::vector<Real> out(sp.outer * sp.inner, Real(0));
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t l = 0; l < sp.len; ++l)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += v[(o * sp.len + l) * sp.inner + i];
  return detail::make_op<Real>("sum_axis", detail::reduced_shape(x.shape(), ax, keepdim), std::move(out), {&x},
                               [sp](Node<Real>& self) {
                                 auto* gp = detail::grad_of(*self.parents[0]);
                                 if (!gp) return;
                                 for (std::size_t o = 0; o < sp.outer; ++o)
                                   for (std::size_t l = 0; l < sp.len; ++l)
                                     for (std::size_t i = 0; i < sp.inner; ++i)
                                       (*gp)[(o * sp.len + l) * sp.inner + i] += self.grad[o * sp.inner + i];
                               });
}

template <class Real>
Tensor<Real> mean(const Tensor<Real>& x, int axis, bool keepdim = false) {
  const std::size_t len = x.dim(axis);
  return mul_scalar(sum(x, axis, keepdim), Real(1) / static_cast<Real>(len));
}

// Max along an axis; the gradient goes to the first maximal element.
template <class Real>
Tensor<Real> max(const Tensor<Real>& x, int axis, bool keepdim = false) {
  const std::size_t ax = detail::norm_axis(axis, x.rank());
  const auto sp = detail::split_axis(x.shape(), ax);
  if (sp.len == 0) throw DimensionError("max over empty axis");
  const auto& v = x.values();
  std::vector<Real> out(sp.outer * sp.inner);
  auto arg = std::make_shared<std::vector<std::uint32_t>>(sp.outer * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      std::size_t best = 0;
      Real bv = v[o * sp.len * sp.inner + i];
      for (std::size_t l = 1; l < sp.len; ++l) {
        const Real c = v[(o * sp.len + l) * sp.inner + i];
        if (c > bv) {
          bv = c;
          best = l;
        }
      }
      out[o * sp.inner + i] = bv;
      (*arg)[o * sp.inner + i] = static_cast<std::uint32_t>(best);
    }
  return detail::make_op<Real>("max_axis", detail::reduced_shape(x.shape(), ax, keepdim), std::move(out), {&x},
                               [sp, arg](Node<Real>& self) {
                                 auto* gp = detail::grad_of(*self.parents[0]);
                                 if (!gp) return;
                                 for (std::size_t o = 0; o < sp.outer; ++o)
                                   for (std::size_t i = 0; i < sp.inner; ++i) {
                                     const std::size_t k = o * sp.inner + i;
                                     (*gp)[(o * sp.len + (*arg)[k]) * sp.inner + i] += self.grad[k];
                                   }
                               });
}

// log(sum(exp(x))) along an axis, shifted by the axis max. A slice that is
// entirely -inf yields -inf and passes no gradient.
template <class Real>
Tensor<Real> logsumexp(const Tensor<Real>& x, int axis, bool keepdim = false) {
  const std::size_t ax = detail::norm_axis(axis, x.rank());
  const auto sp = detail::split_axis(x.shape(), ax);
  const auto& v = x.values();
  for (Real e : v) {
    if (std::isnan(e) || e == std::numeric_limits<Real>::infinity()) throw NumericError("logsumexp: non-finite input");
  }
  std::vector<Real> out(sp.outer * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      Real mx = -std::numeric_limits<Real>::infinity();
      for (std::size_t l = 0; l < sp.len; ++l) mx = std::max(mx, v[(o * sp.len + l) * sp.inner + i]);
      if (mx == -std::numeric_limits<Real>::infinity()) {
        out[o * sp.inner + i] = mx;
        continue;
      }
      Real s = 0;
      for (std::size_t l = 0; l < sp.len; ++l) s += std::exp(v[(o * sp.len + l) * sp.inner + i] - mx);
      out[o * sp.inner + i] = mx + std::log(s);
    }
  return detail::make_op<Real>("logsumexp", detail::reduced_shape(x.shape(), ax, keepdim), std::move(out), {&x},
                               [sp](Node<Real>& self) {
                                 Node<Real>& p = *self.parents[0];
                                 auto* gp = detail::grad_of(p);
                                 if (!gp) return;
                                 for (std::size_t o = 0; o < sp.outer; ++o)
                                   for (std::size_t i = 0; i < sp.inner; ++i) {
                                     const std::size_t k = o * sp.inner + i;
                                     const Real lse = self.data[k];
                                     if (lse == -std::numeric_limits<Real>::infinity()) continue;
                                     for (std::size_t l = 0; l < sp.len; ++l) {
                                       const std::size_t j = (o * sp.len + l) * sp.inner + i;
                                       (*gp)[j] += self.grad[k] * std::exp(p.data[j] - lse);
                                     }
                                   }
                               });
}

template <class Real>
Tensor<Real> softmax(const Tensor<Real>& x, int axis) {
  detail::check_finite(x, "softmax");
  const std::size_t ax = detail::norm_axis(axis, x.rank());
  const auto sp = detail::split_axis(x.shape(), ax);
  const auto& v = x.values();
  std::vector<Real> out(v.size());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      Real mx = -std::numeric_limits<Real>::infinity();
      for (std::size_t l = 0; l < sp.len; ++l) mx = std::max(mx, v[(o * sp.len + l) * sp.inner + i]);
      Real s = 0;
      for (std::size_t l = 0; l < sp.len; ++l) {
        const std::size_t j = (o * sp.len + l) * sp.inner + i;
        out[j] = std::exp(v[j] - mx);
        s += out[j];
      }
      for (std::size_t l = 0; l < sp.len; ++l) out[(o * sp.len + l) * sp.inner + i] /= s;
    }
  return detail::make_op<Real>("softmax", x.shape(), std::move(out), {&x}, [sp](Node<Real>& self) {
    auto* gp = detail::grad_of(*self.parents[0]);
    if (!gp) return;
    const auto& y = self.data;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        Real dot = 0;
        for (std::size_t l = 0; l < sp.len; ++l) {
          const std::size_t j = (o * sp.len + l) * sp.inner + i;
          dot += g[j] * y[j];
        }
        for (std::size_t l = 0; l < sp.len; ++l) {
          const std::size_t j = (o * sp.len + l) * sp.inner + i;
          (*gp)[j] += y[j] * (g[j] - dot);
        }
      }
  });
}

// x / max(||x||, eps) along an axis.
template <class Real>
Tensor<Real> l2_normalize(const Tensor<Real>& x, int axis, Real eps = Real(1e-12)) {
  const std::size_t ax = detail::norm_axis(axis, x.rank());
  const auto sp = detail::split_axis(x.shape(), ax);
  const auto& v = x.values();
  std::vector<Real> out(v.size());
  auto norms = std::make_shared<std::vector<Real>>(sp.outer * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      Real ss = 0;
      for (std::size_t l = 0; l < sp.len; ++l) {
        const Real e = v[(o * sp.len + l) * sp.inner + i];
        ss += e * e;
      }
      const Real n = std::sqrt(ss);
      (*norms)[o * sp.inner + i] = n;
      const Real d = std::max(n, eps);
      for (std::size_t l = 0; l < sp.len; ++l) {
        const std::size_t j = (o * sp.len + l) * sp.inner + i;
        out[j] = v[j] / d;
      }
    }
  return detail::make_op<Real>("l2_normalize", x.shape(), std::move(out), {&x}, [sp, norms, eps](Node<Real>& self) {
    auto* gp = detail::grad_of(*self.parents[0]);
    if (!gp) return;
    const auto& y = self.data;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const Real n = (*norms)[o * sp.inner + i];
        if (n <= eps) {
          for (std::size_t l = 0; l < sp.len; ++l) {
            const std::size_t j = (o * sp.len + l) * sp.inner + i;
            (*gp)[j] += g[j] / eps;
          }
          continue;
        }
        Real dot = 0;
        for (std::size_t l = 0; l < sp.len; ++l) {
          const std::size_t j = (o * sp.len + l) * sp.inner + i;
          dot += g[j] * y[j];
        }
        for (std::size_t l = 0; l < sp.len; ++l) {
          const std::size_t j = (o * sp.len + l) * sp.inner + i;
          (*gp)[j] += (g[j] - y[j] * dot) / n;
        }
      }
  });
}

// Normalizes over the last axis, then scales by gamma and shifts by beta
// (both shaped like the last axis).
template <class Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gamma, const Tensor<Real>& beta,
                        Real eps = Real(1e-5)) {
  const std::size_t c = x.shape().back();
  if (gamma.size() != c || beta.size() != c) throw DimensionError("layer_norm affine width mismatch");
  const std::size_t rows = x.size() / c;
  const auto& v = x.values();
  const auto& gm = gamma.values();
  const auto& bt = beta.values();
  auto xhat = std::make_shared<std::vector<Real>>(v.size());
  auto inv_std = std::make_shared<std::vector<Real>>(rows);
  std::vector<Real> out(v.size());
  for (std::size_t r = 0; r < rows; ++r) {
    Real mu = 0;
    for (std::size_t j = 0; j < c; ++j) mu += v[r * c + j];
    mu /= static_cast<Real>(c);
    Real var = 0;
    for (std::size_t j = 0; j < c; ++j) {
      const Real d = v[r * c + j] - mu;
      var += d * d;
    }
    var /= static_cast<Real>(c);
    const Real is = Real(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const Real h = (v[r * c + j] - mu) * is;
      (*xhat)[r * c + j] = h;
      out[r * c + j] = h * gm[j] + bt[j];
    }
  }
  return detail::make_op<Real>("layer_norm", x.shape(), std::move(out), {&x, &gamma, &beta},
                               [c, rows, xhat, inv_std](Node<Real>& self) {
                                 Node<Real>& px = *self.parents[0];
                                 Node<Real>& pg = *self.parents[1];
                                 auto* gx = detail::grad_of(px);
                                 auto* gg = detail::grad_of(pg);
                                 auto* gb = detail::grad_of(*self.parents[2]);
                                 const auto& g = self.grad;
                                 for (std::size_t r = 0; r < rows; ++r) {
                                   Real m1 = 0, m2 = 0;
                                   for (std::size_t j = 0; j < c; ++j) {
                                     const std::size_t k = r * c + j;
                                     const Real gh = g[k] * pg.data[j];
                                     m1 += gh;
                                     m2 += gh * (*xhat)[k];
                                     if (gg) (*gg)[j] += g[k] * (*xhat)[k];
                                     if (gb) (*gb)[j] += g[k];
                                   }
                                   if (!gx) continue;
                                   m1 /= static_cast<Real>(c);
                                   m2 /= static_cast<Real>(c);
                                   for (std::size_t j = 0; j < c; ++j) {
                                     const std::size_t k = r * c + j;
                                     const Real gh = g[k] * pg.data[j];
                                     (*gx)[k] += (*inv_std)[r] * (gh - m1 - (*xhat)[k] * m2);
                                   }
                                 }
                               });
}

// Normalizes each column of x [n, c] with its batch mean and biased variance,
// then applies gamma and beta. The batch statistics are written to
// batch_mean / batch_var when given.
template <class Real>
Tensor<Real> batch_norm(const Tensor<Real>& x, const Tensor<Real>& gamma, const Tensor<Real>& beta, Real eps = Real(1e-5),
                        std::vector<double>* batch_mean = nullptr, std::vector<double>* batch_var = nullptr) {
  if (x.rank() != 2) throw DimensionError("batch_norm expects [n, c], got " + to_string(x.shape()));
  const std::size_t n = x.shape()[0], c = x.shape()[1];
  if (gamma.size() != c || beta.size() != c) throw DimensionError("batch_norm affine width mismatch");
  const auto& v = x.values();
  std::vector<double> mu(c, 0.0), var(c, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < c; ++j) mu[j] += v[r * c + j];
  for (double& m : mu) m /= static_cast<double>(n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < c; ++j) {
      const double d = v[r * c + j] - mu[j];
      var[j] += d * d;
    }
  for (double& s : var) s /= static_cast<double>(n);
  auto inv_std = std::make_shared<std::vector<Real>>(c);
  for (std::size_t j = 0; j < c; ++j) (*inv_std)[j] = static_cast<Real>(1.0 / std::sqrt(var[j] + static_cast<double>(eps)));
  auto xhat = std::make_shared<std::vector<Real>>(v.size());
  std::vector<Real> out(v.size());
  const auto& gm = gamma.values();
  const auto& bt = beta.values();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < c; ++j) {
      const std::size_t k = r * c + j;
      const Real h = static_cast<Real>(v[k] - mu[j]) * (*inv_std)[j];
      (*xhat)[k] = h;
      out[k] = h * gm[j] + bt[j];
    }
  if (batch_mean) *batch_mean = mu;
  if (batch_var) *batch_var = var;
  return detail::make_op<Real>("batch_norm", x.shape(), std::move(out), {&x, &gamma, &beta},
                               [n, c, xhat, inv_std](Node<Real>& self) {
                                 Node<Real>& pg = *self.parents[1];
                                 auto* gx = detail::grad_of(*self.parents[0]);
                                 auto* gg = detail::grad_of(pg);
                                 auto* gb = detail::grad_of(*self.parents[2]);
                                 const auto& g = self.grad;
                                 std::vector<double> sg(c, 0.0), sgx(c, 0.0);
                                 for (std::size_t r = 0; r < n; ++r)
                                   for (std::size_t j = 0; j < c; ++j) {
                                     const std::size_t k = r * c + j;
                                     sg[j] += g[k];
                                     sgx[j] += static_cast<double>(g[k]) * (*xhat)[k];
                                   }
                                 for (std::size_t j = 0; j < c; ++j) {
                                   if (gg) (*gg)[j] += static_cast<Real>(sgx[j]);
                                   if (gb) (*gb)[j] += static_cast<Real>(sg[j]);
                                 }
                                 if (!gx) return;
                                 const double inv_n = 1.0 / static_cast<double>(n);
                                 for (std::size_t r = 0; r < n; ++r)
                                   for (std::size_t j = 0; j < c; ++j) {
                                     const std::size_t k = r * c + j;
                                     const double d = g[k] - sg[j] * inv_n - (*xhat)[k] * sgx[j] * inv_n;
                                     (*gx)[k] += static_cast<Real>(pg.data[j] * (*inv_std)[j] * d);
                                   }
                               });
}

template <class Real>
Tensor<Real> concat(const std::vector<Tensor<Real>>& parts, int axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const std::size_t ax = detail::norm_axis(axis, parts[0].rank());
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    if (p.rank() != out_shape.size()) throw DimensionError("concat rank mismatch");
    for (std::size_t d = 0; d < out_shape.size(); ++d) {
      if (d != ax && p.shape()[d] != parts[0].shape()[d]) {
        throw DimensionError("concat extent mismatch: " + to_string(p.shape()) + " vs " + to_string(parts[0].shape()));
      }
    }
    out_shape[ax] += p.shape()[ax];
  }
  const auto sp = detail::split_axis(out_shape, ax);
  std::vector<Real> out(numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t len = p.shape()[ax];
    const auto& v = p.values();
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(o * len * sp.inner), len * sp.inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * sp.len + off) * sp.inner));
    off += len;
  }
  return detail::make_op_n<Real>("concat", out_shape, std::move(out), parts, [sp, offsets](Node<Real>& self) {
    for (std::size_t q = 0; q < self.parents.size(); ++q) {
      Node<Real>& p = *self.parents[q];
      auto* gp = detail::grad_of(p);
      if (!gp) continue;
      const std::size_t len = p.data.size() / (sp.outer * sp.inner);
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t e = 0; e < len * sp.inner; ++e)
          (*gp)[o * len * sp.inner + e] += self.grad[(o * sp.len + offsets[q]) * sp.inner + e];
    }
  });
}

// Contiguous sub-range [start, start+len) along an axis.
template <class Real>
Tensor<Real> slice(const Tensor<Real>& x, int axis, std::size_t start, std::size_t len) {
  const std::size_t ax = detail::norm_axis(axis, x.rank());
  if (start + len > x.shape()[ax]) throw DimensionError("slice out of range for shape " + to_string(x.shape()));
  const auto sp = detail::split_axis(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape[ax] = len;
  const auto& v = x.values();
  std::vector<Real> out(numel(out_shape));
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(v.begin() + static_cast<std::ptrdiff_t>((o * sp.len + start) * sp.inner), len * sp.inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * len * sp.inner));
  return detail::make_op<Real>("slice", out_shape, std::move(out), {&x}, [sp, start, len](Node<Real>& self) {
    auto* gp = detail::grad_of(*self.parents[0]);
    if (!gp) return;
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t e = 0; e < len * sp.inner; ++e)
        (*gp)[(o * sp.len + start) * sp.inner + e] += self.grad[o * len * sp.inner + e];
  });
}

// Gathers elements of the flattened tensor: out.flat[i] = x.flat[index[i]].
template <class Real>
Tensor<Real> take(const Tensor<Real>& x, std::vector<std::uint32_t> index, Shape out_shape) {
  if (numel(out_shape) != index.size()) throw DimensionError("take: index count does not match output shape");
  const auto& v = x.values();
  std::vector<Real> out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= v.size()) throw RangeError("take: index out of range");
    out[i] = v[index[i]];
  }
  auto idx = std::make_shared<std::vector<std::uint32_t>>(std::move(index));
  return detail::make_op<Real>("take", std::move(out_shape), std::move(out), {&x}, [idx](Node<Real>& self) {
    auto* gp = detail::grad_of(*self.parents[0]);
    if (!gp) return;
    for (std::size_t i = 0; i < idx->size(); ++i) (*gp)[(*idx)[i]] += self.grad[i];
  });
}

// Row gather along axis 0.
template <class Real>
Tensor<Real> gather_rows(const Tensor<Real>& x, const std::vector<std::uint32_t>& rows) {
  const std::size_t width = x.size() / x.shape()[0];
  std::vector<std::uint32_t> flat;
  flat.reserve(rows.size() * width);
  for (std::uint32_t r : rows) {
    if (r >= x.shape()[0]) throw RangeError("gather_rows: row index out of range");
    for (std::size_t j = 0; j < width; ++j) flat.push_back(static_cast<std::uint32_t>(r * width + j));
  }
  Shape out_shape = x.shape();
  out_shape[0] = rows.size();
  return take(x, std::move(flat), std::move(out_shape));
}

// Row-wise dot product of two [n, c] tensors -> [n].
template <class Real>
Tensor<Real> rowdot(const Tensor<Real>& a, const Tensor<Real>& b) {
  return sum(mul(a, b), -1);
}

}  // namespace pcsc
