#pragma once

// Point-tube encoder: maps a segment to a grid of superpoint embeddings.
//
// Anchor frames are taken every `stride` frames starting at `temporal_radius`.
// On each anchor frame, FPS picks `centers` points; each center gathers the
// ball-query neighbors of its xyz in every frame of [anchor - t, anchor + t].
// A member's input is its displacement from the center (in units of the
// spatial radius) and its frame offset (in units of the temporal radius). A
// shared pointwise MLP embeds members, max-pooling reduces each tube, and a
// second MLP maps the pooled vector to the output width. Hidden layers are
// batch-normalized.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pcsc/nn.hpp"
#include "pcsc/pcv.hpp"
#include "pcsc/sampling.hpp"

namespace pcsc {

struct EncoderConfig {
  double spatial_radius = 0.5;
  std::size_t temporal_radius = 1;
  std::size_t centers = 16;
  std::size_t ball_k = 9;
  std::size_t hidden = 64;
  std::size_t width = 64;
  std::size_t stride = 2;
  std::size_t fps_start = 0;

  void validate() const {
    if (!(spatial_radius > 0.0)) throw ConfigError("encoder.spatial_radius must be positive", "encoder.spatial_radius");
    if (centers < 1) throw ConfigError("encoder.centers must be at least 1", "encoder.centers");
    if (ball_k < 1) throw ConfigError("encoder.ball_k must be at least 1", "encoder.ball_k");
    if (width < 8) throw ConfigError("encoder.width must be at least 8", "encoder.width");
    if (hidden < 1) throw ConfigError("encoder.hidden must be positive", "encoder.hidden");
    if (stride < 1) throw ConfigError("encoder.stride must be at least 1", "encoder.stride");
  }

  // Output frames per segment of the given length.
  std::size_t output_frames(std::size_t segment_length) const {
    if (segment_length <= 2 * temporal_radius) {
      throw ConfigError("segment of " + std::to_string(segment_length) + " frames is too short for temporal radius " +
                            std::to_string(temporal_radius),
                        "encoder.temporal_radius");
    }
    return (segment_length - 2 * temporal_radius + stride - 1) / stride;
  }

  std::size_t tube_members() const { return (2 * temporal_radius + 1) * ball_k; }
};

// Geometry of one encoded segment, independent of the network weights.
template <class Real>
struct TubeInput {
  std::size_t frames = 0;   // l
  std::size_t centers = 0;  // r
  std::size_t members = 0;  // M per tube
  std::vector<Real> features;   // l * r * M * 4
  std::vector<Real> positions;  // l * r * 4: (anchor frame in segment, x, y, z)
  // In-radius members of each tube as (frame in segment, point index).
  std::vector<std::vector<std::pair<std::uint32_t, std::uint32_t>>> tube_points;

  std::size_t superpoints() const { return frames * centers; }
};

template <class Real>
struct SuperpointGrid {
  Tensor<Real> embeddings;      // [l, r, c]
  std::vector<Real> positions;  // l * r * 4

  std::size_t frames() const { return embeddings.shape()[0]; }
  std::size_t centers() const { return embeddings.shape()[1]; }
  std::size_t width() const { return embeddings.shape()[2]; }
  // Embeddings as [l * r, c]; row i * r + j is superpoint (i, j).
  Tensor<Real> rows() const { return reshape(embeddings, Shape{frames() * centers(), width()}); }
};

// Builds tube inputs. `explicit_centers`, if given, holds l * r * 3 center
// coordinates and replaces FPS.
template <class Real>
TubeInput<Real> prepare_segment(const Segment& seg, const EncoderConfig& cfg,
                                std::optional<std::span<const float>> explicit_centers = std::nullopt) {
  cfg.validate();
  const std::size_t l = cfg.output_frames(seg.frames);
  const std::size_t r = cfg.centers;
  const std::size_t k = cfg.ball_k;
  const std::size_t t = cfg.temporal_radius;
  const std::size_t m = cfg.tube_members();
  if (explicit_centers && explicit_centers->size() != l * r * 3) {
    throw DimensionError("explicit centers must hold l*r*3 coordinates");
  }
  if (!explicit_centers && r > seg.points) throw RangeError("more centers than points per frame");

  TubeInput<Real> in;
  in.frames = l;
  in.centers = r;
  in.members = m;
  in.features.resize(l * r * m * 4);
  in.positions.resize(l * r * 4);
  in.tube_points.resize(l * r);

  const double inv_s = 1.0 / cfg.spatial_radius;
  const double inv_t = t > 0 ? 1.0 / static_cast<double>(t) : 0.0;
  std::vector<float> centers(r * 3);
  for (std::size_t i = 0; i < l; ++i) {
    const std::size_t anchor = t + i * cfg.stride;
    if (explicit_centers) {
      std::copy_n(explicit_centers->begin() + static_cast<std::ptrdiff_t>(i * r * 3), r * 3, centers.begin());
    } else {
      const auto frame = seg.frame(anchor);
      const auto picked = farthest_point_sample(frame, r, cfg.fps_start);
      for (std::size_t j = 0; j < r; ++j)
        for (int d = 0; d < 3; ++d) centers[j * 3 + d] = frame[picked[j] * 3 + d];
    }
    // (frame offset, point index, frame) per valid member of each center
    std::vector<std::vector<std::pair<std::uint32_t, std::uint32_t>>> found(r);
    for (std::size_t f = anchor - t; f <= anchor + t; ++f) {
      const auto pts = seg.frame(f);
      const auto bq = ball_query(centers, pts, cfg.spatial_radius, k);
      for (std::size_t j = 0; j < r; ++j) {
        const auto idx = bq.neighbors(j);
        const auto ok = bq.mask(j);
        for (std::size_t q = 0; q < k; ++q)
          if (ok[q]) found[j].emplace_back(static_cast<std::uint32_t>(f), idx[q]);
      }
    }
    for (std::size_t j = 0; j < r; ++j) {
      const std::size_t sp = i * r + j;
      Real* pos = in.positions.data() + sp * 4;
      pos[0] = static_cast<Real>(anchor);
      for (int d = 0; d < 3; ++d) pos[1 + d] = static_cast<Real>(centers[j * 3 + d]);
      auto& members = found[j];
      if (members.empty()) {
        // Explicit centers away from every point: fall back to the nearest
        // point of the anchor frame.
        const auto bq = ball_query(std::span<const float>(centers).subspan(j * 3, 3), seg.frame(anchor),
                                   cfg.spatial_radius, 1);
        members.emplace_back(static_cast<std::uint32_t>(anchor), bq.index[0]);
      }
      in.tube_points[sp] = members;
      for (std::size_t q = 0; q < m; ++q) {
        const auto [f, p] = members[q < members.size() ? q : 0];
        const auto pts = seg.frame(f);
        Real* feat = in.features.data() + (sp * m + q) * 4;
        for (int d = 0; d < 3; ++d) {
          feat[d] = static_cast<Real>((static_cast<double>(pts[p * 3 + d]) - centers[j * 3 + d]) * inv_s);
        }
        feat[3] = static_cast<Real>((static_cast<double>(f) - static_cast<double>(anchor)) * inv_t);
      }
    }
  }
  return in;
}

template <class Real>
struct EncoderParams {
  Linear<Real> point1, point2;  // shared pointwise MLP over tube members
  Linear<Real> out1, out2;      // pooled tube -> embedding
  BatchNorm<Real> bn1, bn2, bn3;

  void collect(NamedTensors<Real>& out) const {
    point1.collect("enc.point1", out);
    bn1.collect("enc.bn1", out);
    point2.collect("enc.point2", out);
    bn2.collect("enc.bn2", out);
    out1.collect("enc.out1", out);
    bn3.collect("enc.bn3", out);
    out2.collect("enc.out2", out);
  }
  void collect_buffers(NamedTensors<Real>& out) const {
    bn1.collect_buffers("enc.bn1", out);
    bn2.collect_buffers("enc.bn2", out);
    bn3.collect_buffers("enc.bn3", out);
  }
};

template <class Real>
EncoderParams<Real> init_encoder(const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  EncoderParams<Real> p;
  p.point1 = Linear<Real>::init(4, cfg.hidden, rng);
  p.point2 = Linear<Real>::init(cfg.hidden, cfg.hidden, rng);
  p.out1 = Linear<Real>::init(cfg.hidden, cfg.hidden, rng);
  p.out2 = Linear<Real>::init(cfg.hidden, cfg.width, rng);
  p.bn1 = BatchNorm<Real>::init(cfg.hidden);
  p.bn2 = BatchNorm<Real>::init(cfg.hidden);
  p.bn3 = BatchNorm<Real>::init(cfg.hidden);
  return p;
}

// Embeds a batch of tubes: features [S * M * 4] -> [S, c]. Training mode
// normalizes with the statistics of this batch and updates the running ones.
template <class Real>
Tensor<Real> encode_tubes(const std::vector<Real>& features, std::size_t tubes, std::size_t members,
                          const EncoderParams<Real>& p, bool training = false) {
  const std::size_t hidden = p.point1.out_features();
  Tensor<Real> x(Shape{tubes * members, 4}, features);
  Tensor<Real> h = relu(p.bn1(p.point1(x), training));
  h = relu(p.bn2(p.point2(h), training));
  h = max(reshape(h, Shape{tubes, members, hidden}), 1);
  return p.out2(relu(p.bn3(p.out1(h), training)));
}

template <class Real>
SuperpointGrid<Real> encode_prepared(const TubeInput<Real>& in, const EncoderParams<Real>& p, bool training = false) {
  Tensor<Real> e = encode_tubes(in.features, in.superpoints(), in.members, p, training);
  return {reshape(e, Shape{in.frames, in.centers, p.out2.out_features()}), in.positions};
}

template <class Real>
SuperpointGrid<Real> encode_segment(const Segment& seg, const EncoderConfig& cfg, const EncoderParams<Real>& p,
                                    std::optional<std::span<const float>> explicit_centers = std::nullopt,
                                    bool training = false) {
  return encode_prepared(prepare_segment<Real>(seg, cfg, explicit_centers), p, training);
}

}  // namespace pcsc
