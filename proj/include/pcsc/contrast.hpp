#pragma once

// Memory bank of detached target embeddings, similarity-ranked negative
// selection, positive-neighbor mining and the neighbor-weighted local
// InfoNCE loss.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "pcsc/checkpoint.hpp"
#include "pcsc/ops.hpp"

namespace pcsc {

enum class WeightingScheme : std::uint8_t { feature_weighted_fusion, softmax_weighting, add_k_pairs };

inline const char* to_string(WeightingScheme s) {
  switch (s) {
    case WeightingScheme::feature_weighted_fusion: return "feature_weighted_fusion";
    case WeightingScheme::softmax_weighting: return "softmax_weighting";
    case WeightingScheme::add_k_pairs: return "add_k_pairs";
  }
  return "?";
}

struct ContrastConfig {
  std::size_t bank_size = 1024;
  double negative_ratio = 0.7;
  std::size_t neighbors = 3;
  double temperature = 0.01;
  WeightingScheme scheme = WeightingScheme::feature_weighted_fusion;
  // Neighbors are mined only once the bank holds neighbors + warmup_margin entries.
  std::size_t warmup_margin = 10;

  void validate() const {
    if (bank_size == 0) throw ConfigError("contrast.bank_size must be positive", "contrast.bank_size");
    if (!(negative_ratio > 0.0 && negative_ratio <= 1.0)) {
      throw ConfigError("contrast.negative_ratio must lie in (0, 1]", "contrast.negative_ratio");
    }
    if (!(temperature > 0.0)) throw ConfigError("contrast.temperature must be positive", "contrast.temperature");
  }
};

// Fixed-capacity FIFO of unit-norm rows. Rows are copied on insert, so they
// never reference a tape.
template <class Real>
class MemoryBank {
 public:
  MemoryBank() = default;
  MemoryBank(std::size_t capacity, std::size_t width)
      : capacity_(capacity), width_(width), entries_(capacity * width, Real(0)) {
    if (capacity == 0 || width == 0) throw ConfigError("memory bank needs positive capacity and width", "contrast.bank_size");
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t width() const { return width_; }
  std::size_t fill() const { return fill_; }
  std::size_t cursor() const { return cursor_; }

  std::span<const Real> entry(std::size_t slot) const {
    if (slot >= fill_) throw RangeError("memory bank slot " + std::to_string(slot) + " is not filled");
    return std::span<const Real>(entries_).subspan(slot * width_, width_);
  }

  // Appends rows (n * width values), re-normalizing each, overwriting the
  // oldest entries once full.
  void enqueue(std::span<const Real> rows) {
    if (rows.size() % width_ != 0) throw ConfigError("bank insert width mismatch", "encoder.width");
    for (std::size_t r = 0; r < rows.size() / width_; ++r) {
      const Real* src = rows.data() + r * width_;
      double ss = 0.0;
      for (std::size_t j = 0; j < width_; ++j) ss += static_cast<double>(src[j]) * src[j];
      const double norm = std::max(std::sqrt(ss), 1e-12);
      Real* dst = entries_.data() + cursor_ * width_;
      for (std::size_t j = 0; j < width_; ++j) dst[j] = static_cast<Real>(src[j] / norm);
      cursor_ = (cursor_ + 1) % capacity_;
      fill_ = std::min(fill_ + 1, capacity_);
    }
  }

  void enqueue(const Tensor<Real>& rows) {
    if (rows.rank() != 2 || rows.shape()[1] != width_) {
      throw ConfigError("bank insert of shape " + to_string(rows.shape()) + " into width " + std::to_string(width_),
                        "encoder.width");
    }
    enqueue(rows.data());
  }

  // Filled entries as a constant [fill, width] tensor.
  Tensor<Real> filled() const {
    return Tensor<Real>(Shape{fill_, width_},
                        std::vector<Real>(entries_.begin(), entries_.begin() + static_cast<std::ptrdiff_t>(fill_ * width_)));
  }

  void save(Checkpoint& ck) const {
    ck.add("bank.entries", Tensor<Real>(Shape{capacity_, width_}, entries_));
    ck.add("bank.cursor", Tensor<Real>::scalar(static_cast<Real>(cursor_)));
    ck.add("bank.fill", Tensor<Real>::scalar(static_cast<Real>(fill_)));
  }

  static MemoryBank load(const Checkpoint& ck) {
    const auto e = ck.get<Real>("bank.entries");
    if (e.rank() != 2) throw DimensionError("bank.entries must be rank 2");
    MemoryBank b(e.shape()[0], e.shape()[1]);
    b.entries_ = e.values();
    b.cursor_ = static_cast<std::size_t>(ck.scalar("bank.cursor"));
    b.fill_ = static_cast<std::size_t>(ck.scalar("bank.fill"));
    if (b.fill_ > b.capacity_ || b.cursor_ >= b.capacity_) throw DimensionError("bank cursor/fill out of range");
    return b;
  }

  friend bool operator==(const MemoryBank&, const MemoryBank&) = default;

 private:
  std::size_t capacity_ = 0, width_ = 0;
  std::vector<Real> entries_;
  std::size_t cursor_ = 0, fill_ = 0;
};

// Cosine similarity of a unit vector to every filled bank entry.
template <class Real>
std::vector<double> similarities(std::type_identity_t<std::span<const Real>> z, const MemoryBank<Real>& bank) {
  if (z.size() != bank.width()) throw DimensionError("similarity query width mismatch");
  std::vector<double> out(bank.fill());
  for (std::size_t s = 0; s < bank.fill(); ++s) {
    const auto m = bank.entry(s);
    double d = 0.0;
    for (std::size_t j = 0; j < z.size(); ++j) d += static_cast<double>(m[j]) * z[j];
    out[s] = d;
  }
  return out;
}

// Slots ordered by descending similarity, ties by ascending slot. Neighbors
// are taken from the front and negatives from the back of this one ranking,
// so the two sets never overlap while they fit in the bank together.
inline std::vector<std::uint32_t> rank_by_similarity(std::span<const double> sims) {
  std::vector<std::uint32_t> order(sims.size());
  std::iota(order.begin(), order.end(), 0u);
  std::stable_sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) { return sims[a] > sims[b]; });
  return order;
}

inline std::size_t negative_count(double ratio, std::size_t fill) {
  if (fill == 0) return 0;
  const auto n = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(fill) - 1e-9));
  return std::clamp<std::size_t>(n, 1, fill);
}

// The ceil(ratio * fill) least similar slots, in ascending similarity order.
inline std::vector<std::uint32_t> select_negatives_from(std::span<const double> sims, double ratio) {
  const auto order = rank_by_similarity(sims);
  const std::size_t n = negative_count(ratio, sims.size());
  return std::vector<std::uint32_t>(order.rbegin(), order.rbegin() + static_cast<std::ptrdiff_t>(n));
}

// The K most similar slots (truncated to the fill), in descending order.
inline std::vector<std::uint32_t> mine_neighbors_from(std::span<const double> sims, std::size_t k) {
  const auto order = rank_by_similarity(sims);
  return std::vector<std::uint32_t>(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(std::min(k, order.size())));
}

template <class Real>
std::vector<std::uint32_t> select_negatives(std::type_identity_t<std::span<const Real>> z, const MemoryBank<Real>& bank, double ratio) {
  return select_negatives_from(similarities(z, bank), ratio);
}

template <class Real>
std::vector<std::uint32_t> mine_neighbors(std::type_identity_t<std::span<const Real>> z, const MemoryBank<Real>& bank, std::size_t k) {
  return mine_neighbors_from(similarities(z, bank), k);
}

// Rows of the given slots as a constant [n, width] tensor.
template <class Real>
Tensor<Real> bank_rows(const MemoryBank<Real>& bank, std::span<const std::uint32_t> slots) {
  std::vector<Real> v;
  v.reserve(slots.size() * bank.width());
  for (std::uint32_t s : slots) {
    const auto e = bank.entry(s);
    v.insert(v.end(), e.begin(), e.end());
  }
  return Tensor<Real>(Shape{slots.size(), bank.width()}, std::move(v));
}

// Softmax over neighbor dot products.
inline std::vector<double> neighbor_weights(std::span<const double> dots) {
  if (dots.empty()) return {};
  const double mx = *std::max_element(dots.begin(), dots.end());
  std::vector<double> w(dots.size());
  double s = 0.0;
  for (std::size_t i = 0; i < dots.size(); ++i) s += (w[i] = std::exp(dots[i] - mx));
  for (double& v : w) v /= s;
  return w;
}

namespace detail {

// Per-row local InfoNCE from dot products. pos: [n, 1] z.q+, nbr: [n, K]
// z.neighbor (undefined when K = 0), neg_lse: [n, 1] logsumexp of retained
// negative logits. Returns [n].
template <class Real>
Tensor<Real> local_infonce_rows(const Tensor<Real>& pos, const Tensor<Real>& nbr, const Tensor<Real>& neg_lse, Real tau,
                                WeightingScheme scheme) {
  const Real inv_tau = Real(1) / tau;
  const std::size_t n = pos.shape()[0];
  const bool has_nbr = nbr.defined() && nbr.shape()[1] > 0;
  if (scheme == WeightingScheme::add_k_pairs) {
    const Tensor<Real> logits = mul_scalar(has_nbr ? concat<Real>({pos, nbr}, 1) : pos, inv_tau);
    const std::size_t p = logits.shape()[1];
    const Tensor<Real> neg_b = add(Tensor<Real>(Shape{n, p, 1}), reshape(neg_lse, Shape{n, 1, 1}));
    const Tensor<Real> pair = concat<Real>({reshape(logits, Shape{n, p, 1}), neg_b}, 2);
    return mean(sub(logsumexp(pair, 2), logits), 1);
  }
  Tensor<Real> log_num;
  if (!has_nbr) {
    log_num = mul_scalar(pos, inv_tau);
  } else if (scheme == WeightingScheme::feature_weighted_fusion) {
    // w_0 = 1 for q+, softmax weights over neighbors for the rest.
    const Tensor<Real> log_w = sub(nbr, logsumexp(nbr, 1, true));
    log_num = logsumexp(concat<Real>({mul_scalar(pos, inv_tau), add(log_w, mul_scalar(nbr, inv_tau))}, 1), 1, true);
  } else {
    // One softmax over q+ and the neighbors jointly.
    const Tensor<Real> all = concat<Real>({pos, nbr}, 1);
    const Tensor<Real> log_w = sub(all, logsumexp(all, 1, true));
    log_num = logsumexp(add(log_w, mul_scalar(all, inv_tau)), 1, true);
  }
  return reshape(sub(logsumexp(concat<Real>({log_num, neg_lse}, 1), 1, true), log_num), Shape{n});
}

}  // namespace detail

// Local InfoNCE for one target z [c] and positive q+ [c] against constant
// neighbors [K, c] and negatives [M, c]. Neighbor weights are the softmax of
// the neighbors' dot products with z. An empty negative set gives 0.
template <class Real>
Tensor<Real> local_infonce(const Tensor<Real>& z, const Tensor<Real>& q_plus, const Tensor<Real>& neighbors,
                           const Tensor<Real>& negatives, Real tau, WeightingScheme scheme) {
  if (!(tau > Real(0))) throw ConfigError("temperature must be positive", "contrast.temperature");
  const std::size_t c = z.size();
  const Tensor<Real> zr = reshape(z, Shape{1, c});
  const Tensor<Real> pos = reshape(rowdot(zr, reshape(q_plus, Shape{1, c})), Shape{1, 1});
  if (negatives.size() == 0) return mul_scalar(sum(pos), Real(0));
  Tensor<Real> nbr;
  if (neighbors.defined() && neighbors.size() > 0) nbr = matmul(zr, transpose(neighbors.detach()));
  const Tensor<Real> neg_lse = logsumexp(mul_scalar(matmul(zr, transpose(negatives.detach())), Real(1) / tau), 1, true);
  return sum(detail::local_infonce_rows(pos, nbr, neg_lse, tau, scheme));
}

template <class Real>
struct ContrastOutput {
  Tensor<Real> loss;                 // scalar, mean over rows
  double mean_positive_similarity = 0.0;
  double mean_negative_similarity = 0.0;  // over retained negatives
  std::size_t neighbors_used = 0;
  bool no_negatives = false;  // empty bank; loss is 0
};

// Batched local InfoNCE: every target row z [n, c] is contrasted with its
// prediction row q [n, c] against its own selection from the bank.
template <class Real>
ContrastOutput<Real> local_infonce_batch(const Tensor<Real>& z, const Tensor<Real>& q, const MemoryBank<Real>& bank,
                                         const ContrastConfig& cfg) {
  cfg.validate();
  const std::size_t n = z.shape()[0], c = z.shape()[1];
  ContrastOutput<Real> out;
  const Tensor<Real> pos = reshape(rowdot(z, q), Shape{n, 1});
  for (Real v : pos.data()) out.mean_positive_similarity += static_cast<double>(v) / static_cast<double>(n);
  const std::size_t fill = bank.fill();
  if (fill == 0) {
    out.loss = mul_scalar(sum(pos), Real(0));
    out.no_negatives = true;
    return out;
  }
  const std::size_t k = fill >= cfg.neighbors + cfg.warmup_margin ? cfg.neighbors : 0;
  out.neighbors_used = k;
  const Tensor<Real> sims = matmul(z, transpose(bank.filled()));
  std::vector<Real> mask(n * fill, -std::numeric_limits<Real>::infinity());
  std::vector<std::uint32_t> nbr_index;
  nbr_index.reserve(n * k);
  double neg_total = 0.0;
  std::size_t neg_count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto s = similarities(z.data().subspan(i * c, c), bank);
    const auto order = rank_by_similarity(s);
    const std::size_t m = negative_count(cfg.negative_ratio, fill);
    for (std::size_t q2 = fill - m; q2 < fill; ++q2) {
      mask[i * fill + order[q2]] = Real(0);
      neg_total += s[order[q2]];
    }
    neg_count += m;
    for (std::size_t j = 0; j < k; ++j) nbr_index.push_back(static_cast<std::uint32_t>(i * fill + order[j]));
  }
  out.mean_negative_similarity = neg_total / static_cast<double>(neg_count);
  const Real inv_tau = Real(1) / static_cast<Real>(cfg.temperature);
  const Tensor<Real> neg_lse = logsumexp(add(mul_scalar(sims, inv_tau), Tensor<Real>(Shape{n, fill}, std::move(mask))), 1, true);
  Tensor<Real> nbr;
  if (k > 0) nbr = take(sims, std::move(nbr_index), Shape{n, k});
  out.loss = mean(detail::local_infonce_rows(pos, nbr, neg_lse, static_cast<Real>(cfg.temperature), cfg.scheme));
  return out;
}

}  // namespace pcsc
