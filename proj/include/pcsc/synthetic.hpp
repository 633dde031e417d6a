#pragma once

// Synthetic articulated-body point cloud videos.
//
// Each video samples a body of 2 or 3 parts (ellipsoidal torso, cylindrical
// arm hinged at the shoulder, optional cylindrical leg) once in its rest
// frame, then moves the same surface samples frame by frame. The class picks
// the motion family and its variant; per-video nuisances (size, heading,
// motion rate, phase) come from the seed. Point labels record the body part.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "pcsc/pcv.hpp"

namespace pcsc {

enum class MotionFamily : std::uint8_t { translation, rotation, articulation };

inline const char* to_string(MotionFamily f) {
  switch (f) {
    case MotionFamily::translation: return "translation";
    case MotionFamily::rotation: return "rotation";
    case MotionFamily::articulation: return "articulation";
  }
  return "?";
}

struct SyntheticConfig {
  std::size_t num_classes = 4;
  std::size_t points = 256;
  std::size_t frames = 24;
  std::size_t parts = 2;
  double noise = 0.005;  // meters, iid Gaussian per coordinate
  std::uint64_t seed = 0;
  // Class c uses families[c % size]; c / size selects the variant.
  std::vector<MotionFamily> families{MotionFamily::translation, MotionFamily::rotation, MotionFamily::articulation};
  double scale_jitter = 0.15;  // body size factor drawn from 1 +- jitter
  double heading_jitter = std::numbers::pi;  // body heading drawn from +- jitter (radians)
  double rate_jitter = 0.25;   // motion rate factor drawn from 1 +- jitter

  void validate() const {
    if (num_classes == 0) throw ConfigError("data.classes must be positive", "data.classes");
    if (points < 64) throw ConfigError("data.points must be at least 64", "data.points");
    if (frames == 0) throw ConfigError("data.frames must be positive", "data.frames");
    if (parts < 2 || parts > 3) throw ConfigError("data.parts must be 2 or 3", "data.parts");
    if (!(noise >= 0.0)) throw ConfigError("data.noise must be non-negative", "data.noise");
    if (families.empty()) throw ConfigError("at least one motion family is required", "data.families");
    if (scale_jitter < 0.0 || scale_jitter >= 1.0) throw ConfigError("data.scale_jitter must lie in [0, 1)", "data.scale_jitter");
    if (heading_jitter < 0.0) throw ConfigError("data.heading_jitter must be non-negative", "data.heading_jitter");
    if (rate_jitter < 0.0 || rate_jitter >= 1.0) throw ConfigError("data.rate_jitter must lie in [0, 1)", "data.rate_jitter");
  }
};

// Realized motion of one video.
struct MotionParams {
  MotionFamily family = MotionFamily::translation;
  std::size_t variant = 0;
  double scale = 1.0;
  double heading = 0.0;               // body yaw about +z
  std::array<double, 3> velocity{};   // translation, meters per frame
  std::array<double, 3> pivot{};      // rotation axis passes through pivot, parallel to +z
  double angular_rate = 0.0;          // rotation, radians per frame
  double swing_amplitude = 0.0;       // articulation, radians
  double swing_rate = 0.0;            // articulation, radians per frame
  double swing_phase = 0.0;
};

namespace detail {

using Vec3 = std::array<double, 3>;

inline Vec3 rotate_z(const Vec3& p, double a) {
  const double c = std::cos(a), s = std::sin(a);
  return {c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]};
}

inline Vec3 rotate_y(const Vec3& p, double a) {
  const double c = std::cos(a), s = std::sin(a);
  return {c * p[0] + s * p[2], p[1], -s * p[0] + c * p[2]};
}

// Seeds are mixed so that (global seed, class, video seed) map to distinct streams.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  std::seed_seq seq{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32), static_cast<std::uint32_t>(b),
                    static_cast<std::uint32_t>(c), static_cast<std::uint32_t>(c >> 32)};
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

struct BodyGeometry {
  double torso_a = 0.22, torso_b = 0.14, torso_c = 0.45;  // ellipsoid semi-axes
  Vec3 shoulder{0.22, 0.0, 0.25};
  double arm_length = 0.5, arm_radius = 0.06;
  Vec3 hip{0.0, 0.0, -0.45};
  double leg_length = 0.45, leg_radius = 0.07;
};

}  // namespace detail

inline MotionParams motion_params(const SyntheticConfig& cfg, std::size_t class_id, std::uint64_t seed) {
  cfg.validate();
  if (class_id >= cfg.num_classes) {
    throw RangeError("class id " + std::to_string(class_id) + " out of range for " + std::to_string(cfg.num_classes) + " classes");
  }
  std::mt19937_64 rng(detail::mix_seed(cfg.seed, class_id, seed));
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  MotionParams m;
  m.family = cfg.families[class_id % cfg.families.size()];
  m.variant = class_id / cfg.families.size();
  m.scale = 1.0 + cfg.scale_jitter * unit(rng);
  m.heading = cfg.heading_jitter * unit(rng);
  const double rate = 1.0 + cfg.rate_jitter * unit(rng);
  switch (m.family) {
    case MotionFamily::translation: {
      const double dir = static_cast<double>(m.variant) * std::numbers::pi / 2.0;
      const double speed = 0.025 * rate;
      m.velocity = {speed * std::cos(dir), speed * std::sin(dir), 0.0};
      break;
    }
    case MotionFamily::rotation: {
      m.pivot = {0.35 * m.scale, 0.0, 0.0};
      m.pivot = detail::rotate_z(m.pivot, m.heading);
      m.angular_rate = (m.variant % 2 == 0 ? 1.0 : -1.0) * 0.08 * rate;
      break;
    }
    case MotionFamily::articulation: {
      m.swing_amplitude = 0.8;
      m.swing_rate = (m.variant + 1) * 2.0 * std::numbers::pi / 12.0 * rate;
      m.swing_phase = std::numbers::pi * unit(rng);
      break;
    }
  }
  return m;
}

// Deterministic in (cfg, class_id, seed).
inline PointCloudVideo generate_synthetic_video(const SyntheticConfig& cfg, std::size_t class_id, std::uint64_t seed) {
  using detail::Vec3;
  const MotionParams m = motion_params(cfg, class_id, seed);
  std::mt19937_64 rng(detail::mix_seed(cfg.seed ^ 0x9e3779b97f4a7c15ull, class_id, seed));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const detail::BodyGeometry g;

  // Part sizes: torso gets the remainder.
  const std::size_t n = cfg.points;
  std::vector<std::size_t> part_points = cfg.parts == 2 ? std::vector<std::size_t>{n - n * 2 / 5, n * 2 / 5}
                                                        : std::vector<std::size_t>{n - n / 3 - n / 4, n / 3, n / 4};

  std::vector<Vec3> rest;
  std::vector<std::uint16_t> part_of;
  rest.reserve(n);
  auto sample_cylinder = [&](const Vec3& base, double length, double radius, bool along_x) {
    const double s = u01(rng) * length;
    const double phi = 2.0 * std::numbers::pi * u01(rng);
    const double a = radius * std::cos(phi), b = radius * std::sin(phi);
    return along_x ? Vec3{base[0] + s, base[1] + a, base[2] + b} : Vec3{base[0] + a, base[1] + b, base[2] - s};
  };
  for (std::size_t p = 0; p < part_points.size(); ++p) {
    for (std::size_t i = 0; i < part_points[p]; ++i) {
      Vec3 v{};
      if (p == 0) {
        // Uniform direction on the sphere, stretched to the ellipsoid.
        const double z = 2.0 * u01(rng) - 1.0;
        const double phi = 2.0 * std::numbers::pi * u01(rng);
        const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
        v = {g.torso_a * r * std::cos(phi), g.torso_b * r * std::sin(phi), g.torso_c * z};
      } else if (p == 1) {
        v = sample_cylinder(g.shoulder, g.arm_length, g.arm_radius, true);
      } else {
        v = sample_cylinder(g.hip, g.leg_length, g.leg_radius, false);
      }
      rest.push_back(v);
      part_of.push_back(static_cast<std::uint16_t>(p));
    }
  }

  PointCloudVideo video;
  video.frames = cfg.frames;
  video.points = n;
  video.coords.resize(cfg.frames * n * 3);
  video.video_label = static_cast<std::uint32_t>(class_id);
  std::vector<std::uint16_t> labels;
  labels.reserve(cfg.frames * n);

  for (std::size_t t = 0; t < cfg.frames; ++t) {
    const double tt = static_cast<double>(t);
    for (std::size_t i = 0; i < n; ++i) {
      Vec3 p = rest[i];
      if (m.family == MotionFamily::articulation && part_of[i] == 1) {
        const double angle = m.swing_amplitude * std::sin(m.swing_rate * tt + m.swing_phase);
        Vec3 local{p[0] - g.shoulder[0], p[1] - g.shoulder[1], p[2] - g.shoulder[2]};
        local = detail::rotate_y(local, angle);
        p = {local[0] + g.shoulder[0], local[1] + g.shoulder[1], local[2] + g.shoulder[2]};
      }
      p = {p[0] * m.scale, p[1] * m.scale, p[2] * m.scale};
      p = detail::rotate_z(p, m.heading);
      switch (m.family) {
        case MotionFamily::translation:
          for (int d = 0; d < 3; ++d) p[d] += tt * m.velocity[d];
          break;
        case MotionFamily::rotation: {
          Vec3 rel{p[0] - m.pivot[0], p[1] - m.pivot[1], p[2] - m.pivot[2]};
          rel = detail::rotate_z(rel, m.angular_rate * tt);
          p = {rel[0] + m.pivot[0], rel[1] + m.pivot[1], rel[2] + m.pivot[2]};
          break;
        }
        case MotionFamily::articulation:
          break;
      }
      float* out = video.coords.data() + (t * n + i) * 3;
      for (int d = 0; d < 3; ++d) {
        const double noise = cfg.noise > 0.0 ? cfg.noise * gauss(rng) : 0.0;
        out[d] = static_cast<float>(p[d] + noise);
      }
      labels.push_back(part_of[i]);
    }
  }
  video.point_labels = std::move(labels);
  return video;
}

// videos_per_class videos for every class, ordered class-major.
inline std::vector<PointCloudVideo> generate_dataset(const SyntheticConfig& cfg, std::size_t videos_per_class) {
  std::vector<PointCloudVideo> out;
  out.reserve(cfg.num_classes * videos_per_class);
  for (std::size_t c = 0; c < cfg.num_classes; ++c)
    for (std::size_t v = 0; v < videos_per_class; ++v) out.push_back(generate_synthetic_video(cfg, c, v));
  return out;
}

}  // namespace pcsc
