#pragma once

// Per-point prototype labels: each superpoint takes the argmax prototype of
// its embedding, and points inherit the label of the nearest superpoint whose
// tube contains them (nearest superpoint of the segment when none does).
//
// Label file "PCVL": magic | u32 T | u32 N | T*N u16, little-endian.

#include <algorithm>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "pcsc/semcluster.hpp"
#include "pcsc/trainer.hpp"

namespace pcsc {

struct PointLabels {
  std::size_t frames = 0, points = 0;
  std::vector<std::uint16_t> labels;  // frames * points

  friend bool operator==(const PointLabels&, const PointLabels&) = default;
};

inline std::vector<unsigned char> encode_labels(const PointLabels& l) {
  if (l.labels.size() != l.frames * l.points) throw DimensionError("label count does not match T*N");
  io::ByteWriter w;
  w.put_bytes("PCVL");
  w.put<std::uint32_t>(static_cast<std::uint32_t>(l.frames));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(l.points));
  for (auto v : l.labels) w.put<std::uint16_t>(v);
  return w.bytes();
}

inline PointLabels decode_labels(std::vector<unsigned char> bytes) {
  io::ByteReader r(std::move(bytes));
  if (r.get_bytes(4, "magic") != "PCVL") throw FormatError("bad label file magic", 0);
  PointLabels l;
  l.frames = r.get<std::uint32_t>("frame count");
  l.points = r.get<std::uint32_t>("point count");
  if (l.frames * l.points > r.remaining() / 2) throw FormatError("truncated label payload", r.offset());
  l.labels.resize(l.frames * l.points);
  for (auto& v : l.labels) v = r.get<std::uint16_t>("label");
  if (r.remaining() != 0) throw FormatError("trailing bytes after label payload", r.offset());
  return l;
}

inline void write_labels(const PointLabels& l, const std::string& path) { io::write_file(path, encode_labels(l)); }
inline PointLabels read_labels(const std::string& path) { return decode_labels(io::read_file(path)); }

// Argmax prototype per row of z against unit-normalized prototypes. A single
// prototype labels everything 0.
template <class Real>
std::vector<std::uint16_t> superpoint_labels(const Tensor<Real>& z, const Tensor<Real>& prototypes) {
  const std::size_t n = z.shape()[0], k = prototypes.shape()[0];
  if (k > std::numeric_limits<std::uint16_t>::max()) throw ConfigError("too many prototypes for u16 labels", "cluster.prototypes");
  if (k == 1) return std::vector<std::uint16_t>(n, 0);
  const Tensor<Real> a = soft_assign(z, prototypes);
  std::vector<std::uint16_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = a.data().subspan(i * k, k);
    out[i] = static_cast<std::uint16_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

// Distances mix space and time as in interpolation: one frame counts as
// `time_scale` meters.
template <class Real>
PointLabels propagate_labels(const PointCloudVideo& video, const std::vector<TubeInput<Real>>& segments,
                             const std::vector<std::vector<std::uint16_t>>& sp_labels, double time_scale) {
  if (segments.size() != sp_labels.size() || segments.empty()) throw DimensionError("one label vector per segment expected");
  const std::size_t seglen = video.frames / segments.size();
  PointLabels out{video.frames, video.points, std::vector<std::uint16_t>(video.frames * video.points, 0)};
  std::vector<double> best(video.frames * video.points);
  for (std::size_t s = 0; s < segments.size(); ++s) {
    const auto& in = segments[s];
    const auto& labels = sp_labels[s];
    if (labels.size() != in.superpoints()) throw DimensionError("superpoint label count does not match the segment");
    const std::size_t base = s * seglen;
    auto dist2 = [&](std::size_t sp, std::size_t f, std::size_t p) {
      const Real* pos = in.positions.data() + sp * 4;
      const auto xyz = video.frame(base + f);
      double d = (static_cast<double>(f) - static_cast<double>(pos[0])) * time_scale;
      d *= d;
      for (int a = 0; a < 3; ++a) {
        const double e = static_cast<double>(xyz[p * 3 + a]) - static_cast<double>(pos[1 + a]);
        d += e * e;
      }
      return d;
    };
    std::fill(best.begin() + static_cast<std::ptrdiff_t>(base * video.points),
              best.begin() + static_cast<std::ptrdiff_t>((base + seglen) * video.points), std::numeric_limits<double>::infinity());
    std::vector<std::uint8_t> covered(seglen * video.points, 0);
    for (std::size_t sp = 0; sp < in.superpoints(); ++sp) {
      for (const auto& [f, p] : in.tube_points[sp]) {
        const std::size_t at = (base + f) * video.points + p;
        const double d = dist2(sp, f, p);
        // Strict comparison keeps the lowest superpoint index on ties.
        if (!covered[f * video.points + p] || d < best[at]) {
          covered[f * video.points + p] = 1;
          best[at] = d;
          out.labels[at] = labels[sp];
        }
      }
    }
    for (std::size_t f = 0; f < seglen; ++f)
      for (std::size_t p = 0; p < video.points; ++p) {
        if (covered[f * video.points + p]) continue;
        const std::size_t at = (base + f) * video.points + p;
        for (std::size_t sp = 0; sp < in.superpoints(); ++sp) {
          const double d = dist2(sp, f, p);
          if (d < best[at]) {
            best[at] = d;
            out.labels[at] = labels[sp];
          }
        }
      }
  }
  return out;
}

// Encodes every segment in eval mode and labels every point against the
// target prototypes.
template <class Real>
PointLabels export_assignments(const Model<Real>& m, const PointCloudVideo& video, const TrainConfig& cfg) {
  const PreparedVideo<Real> prepared = prepare_video<Real>(video, cfg);
  const auto grids = encode_videos(std::vector<const PreparedVideo<Real>*>{&prepared}, m.encoder, false);
  std::vector<std::vector<std::uint16_t>> sp;
  for (const auto& g : grids[0]) sp.push_back(superpoint_labels(l2_normalize(g.rows(), -1), m.protos.target));
  return propagate_labels(video, prepared.segments, sp, cfg.predictor.time_scale);
}

// Minimum-cost assignment of rows to distinct columns (rows <= cols),
// potentials form of the Hungarian method. Returns the column of each row.
inline std::vector<std::size_t> hungarian(const std::vector<std::vector<double>>& cost) {
  const std::size_t n = cost.size();
  if (n == 0) return {};
  const std::size_t m = cost[0].size();
  if (m < n) throw DimensionError("hungarian needs at least as many columns as rows");
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> way(m + 1, 0), match(m + 1, 0);  // match[j]: 1-based row on column j
  for (std::size_t i = 1; i <= n; ++i) {
    match[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<std::uint8_t> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = match[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> col(n);
  for (std::size_t j = 1; j <= m; ++j)
    if (match[j] != 0) col[match[j] - 1] = j - 1;
  return col;
}

// Fraction of points whose predicted label is matched to their true label
// under the best one-to-one matching of label values.
inline double matched_agreement(const std::vector<std::uint16_t>& predicted, const std::vector<std::uint16_t>& truth) {
  if (predicted.size() != truth.size()) throw DimensionError("label vectors differ in length");
  if (predicted.empty()) return 0.0;
  const std::size_t kp = *std::max_element(predicted.begin(), predicted.end()) + 1u;
  const std::size_t kt = *std::max_element(truth.begin(), truth.end()) + 1u;
  std::vector<std::vector<double>> counts(kp, std::vector<double>(kt, 0.0));
  for (std::size_t i = 0; i < predicted.size(); ++i) counts[predicted[i]][truth[i]] += 1.0;
  const bool rows_are_pred = kp <= kt;
  const std::size_t n = rows_are_pred ? kp : kt, m = rows_are_pred ? kt : kp;
  std::vector<std::vector<double>> cost(n, std::vector<double>(m));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) cost[i][j] = -(rows_are_pred ? counts[i][j] : counts[j][i]);
  const auto col = hungarian(cost);
  double hit = 0.0;
  for (std::size_t i = 0; i < n; ++i) hit -= cost[i][col[i]];
  return hit / static_cast<double>(predicted.size());
}

struct PermutationTest {
  double observed = 0.0;
  double null_mean = 0.0;
  double p_value = 1.0;
  std::size_t permutations = 0;
};

// Null distribution: true labels shuffled within each group (e.g. video),
// which keeps every group's label counts.
inline PermutationTest permutation_test(const std::vector<std::uint16_t>& predicted, const std::vector<std::uint16_t>& truth,
                                        const std::vector<std::size_t>& group_sizes, std::size_t permutations,
                                        std::uint64_t seed) {
  if (std::accumulate(group_sizes.begin(), group_sizes.end(), std::size_t{0}) != truth.size()) {
    throw DimensionError("group sizes do not cover the labels");
  }
  PermutationTest res;
  res.permutations = permutations;
  res.observed = matched_agreement(predicted, truth);
  std::mt19937_64 rng(seed);
  std::vector<std::uint16_t> shuffled = truth;
  std::size_t at_least = 0;
  for (std::size_t b = 0; b < permutations; ++b) {
    std::size_t off = 0;
    for (std::size_t g : group_sizes) {
      std::shuffle(shuffled.begin() + static_cast<std::ptrdiff_t>(off), shuffled.begin() + static_cast<std::ptrdiff_t>(off + g), rng);
      off += g;
    }
    const double a = matched_agreement(predicted, shuffled);
    res.null_mean += a / static_cast<double>(permutations);
    if (a >= res.observed) ++at_least;
  }
  res.p_value = static_cast<double>(1 + at_least) / static_cast<double>(1 + permutations);
  return res;
}

}  // namespace pcsc
