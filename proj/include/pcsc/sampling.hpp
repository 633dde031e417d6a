#pragma once

// Farthest point sampling and ball query over packed xyz float arrays.

#include <algorithm>
#include <cstdint>
#include <limits>
#include <span>
#include <utility>
#include <vector>

#include "pcsc/errors.hpp"

namespace pcsc {

inline double squared_distance(std::span<const float> a, std::size_t i, std::span<const float> b, std::size_t j) {
  const double dx = static_cast<double>(a[3 * i]) - b[3 * j];
  const double dy = static_cast<double>(a[3 * i + 1]) - b[3 * j + 1];
  const double dz = static_cast<double>(a[3 * i + 2]) - b[3 * j + 2];
  return dx * dx + dy * dy + dz * dz;
}

// Greedy max-min selection starting at `start`; ties go to the lowest index.
inline std::vector<std::uint32_t> farthest_point_sample(std::span<const float> xyz, std::size_t count,
                                                        std::size_t start = 0) {
  const std::size_t n = xyz.size() / 3;
  if (count > n) {
    throw RangeError("farthest_point_sample: requested " + std::to_string(count) + " of " + std::to_string(n) + " points");
  }
  if (count == 0) return {};
  if (start >= n) throw RangeError("farthest_point_sample: start index out of range");
  std::vector<std::uint32_t> picked;
  picked.reserve(count);
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  std::size_t current = start;
  for (std::size_t s = 0; s < count; ++s) {
    picked.push_back(static_cast<std::uint32_t>(current));
    nearest[current] = -1.0;
    std::size_t best = n;
    double best_d = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (nearest[i] < 0.0) continue;
      nearest[i] = std::min(nearest[i], squared_distance(xyz, i, xyz, current));
      if (nearest[i] > best_d) {
        best_d = nearest[i];
        best = i;
      }
    }
    if (best == n) break;
    current = best;
  }
  return picked;
}

struct BallQueryResult {
  std::size_t centers = 0;
  std::size_t k = 0;
  std::vector<std::uint32_t> index;  // centers * k
  std::vector<std::uint8_t> valid;   // 1 for a genuine in-radius neighbor, 0 for padding

  std::span<const std::uint32_t> neighbors(std::size_t c) const { return std::span(index).subspan(c * k, k); }
  std::span<const std::uint8_t> mask(std::size_t c) const { return std::span(valid).subspan(c * k, k); }
};

// Up to k points within `radius` of each center, nearest first (ties by lowest
// index). Short lists are padded with the first neighbor and flagged invalid.
// An empty ball falls back to the single nearest point, also flagged invalid.
inline BallQueryResult ball_query(std::span<const float> centers, std::span<const float> points, double radius,
                                  std::size_t k) {
  if (!(radius > 0.0)) throw ConfigError("ball_query: radius must be positive", "encoder.spatial_radius");
  if (k == 0) throw ConfigError("ball_query: k must be at least 1", "encoder.ball_k");
  const std::size_t nc = centers.size() / 3, np = points.size() / 3;
  if (np == 0) throw DimensionError("ball_query: empty point set");
  BallQueryResult out{nc, k, std::vector<std::uint32_t>(nc * k), std::vector<std::uint8_t>(nc * k, 0)};
  const double r2 = radius * radius;
  std::vector<std::pair<double, std::uint32_t>> found;
  for (std::size_t c = 0; c < nc; ++c) {
    found.clear();
    std::size_t nearest = 0;
    double nearest_d = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < np; ++i) {
      const double d = squared_distance(centers, c, points, i);
      if (d <= r2) found.emplace_back(d, static_cast<std::uint32_t>(i));
      if (d < nearest_d) {
        nearest_d = d;
        nearest = i;
      }
    }
    std::sort(found.begin(), found.end());
    const std::size_t take = std::min(k, found.size());
    for (std::size_t j = 0; j < k; ++j) {
      if (j < take) {
        out.index[c * k + j] = found[j].second;
        out.valid[c * k + j] = 1;
      } else {
        out.index[c * k + j] = take > 0 ? found[0].second : static_cast<std::uint32_t>(nearest);
      }
    }
  }
  return out;
}

}  // namespace pcsc
