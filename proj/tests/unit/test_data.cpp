#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "pcsc/pcv.hpp"
#include "pcsc/sampling.hpp"
#include "pcsc/synthetic.hpp"

using namespace pcsc;

namespace {

PointCloudVideo small_video(bool labels) {
  PointCloudVideo v;
  v.frames = 4;
  v.points = 5;
  for (std::size_t i = 0; i < 60; ++i) v.coords.push_back(0.25f * static_cast<float>(i) - 3.0f);
  if (labels) {
    v.video_label = 7;
    v.point_labels = std::vector<std::uint16_t>(20);
    for (std::size_t i = 0; i < 20; ++i) (*v.point_labels)[i] = static_cast<std::uint16_t>(i % 3);
  }
  return v;
}

std::vector<float> random_cloud(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  std::vector<float> xyz(3 * n);
  for (float& x : xyz) x = u(rng);
  return xyz;
}

}  // namespace

TEST(Pcv, RoundTripWithLabels) {
  const auto v = small_video(true);
  EXPECT_EQ(decode_pcv(encode_pcv(v)), v);
}

TEST(Pcv, AbsentLabelsStayAbsent) {
  const auto v = decode_pcv(encode_pcv(small_video(false)));
  EXPECT_FALSE(v.video_label.has_value());
  EXPECT_FALSE(v.point_labels.has_value());
  EXPECT_EQ(v, small_video(false));
}

TEST(Pcv, FileRoundTrip) {
  const auto path = (std::filesystem::temp_directory_path() / "pcsc_unit_roundtrip.pcv").string();
  write_pcv(small_video(true), path);
  EXPECT_EQ(read_pcv(path), small_video(true));
  std::filesystem::remove(path);
}

TEST(Pcv, HeaderLayout) {
  const auto b = encode_pcv(small_video(true));
  ASSERT_GE(b.size(), 17u);
  EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "PCV1");
  EXPECT_EQ(b[4], 4);  // T little-endian
  EXPECT_EQ(b[8], 5);  // N
  EXPECT_EQ(b[12], 3);  // both flags
  EXPECT_EQ(b.size(), 4u + 4 + 4 + 1 + 4 + 60 * 4 + 20 * 2);
}

TEST(Pcv, MalformedInputsRaiseFormatErrors) {
  auto good = encode_pcv(small_video(true));
  auto bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_pcv(bad_magic), FormatError);
  auto truncated = good;
  truncated.resize(good.size() - 3);
  EXPECT_THROW(decode_pcv(truncated), FormatError);
  auto trailing = good;
  trailing.push_back(0);
  EXPECT_THROW(decode_pcv(trailing), FormatError);
  auto flags = good;
  flags[12] = 0x80;
  try {
    decode_pcv(flags);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 12u);
  }
  auto nan = encode_pcv(small_video(false));
  const float q = std::nanf("");
  std::memcpy(nan.data() + 13, &q, 4);
  EXPECT_THROW(decode_pcv(nan), FormatError);
  EXPECT_THROW(decode_pcv({}), FormatError);
}

TEST(Pcv, SplitSegmentsIsContiguousAndOrdered) {
  const auto v = small_video(false);
  const auto segs = split_segments(v, 2);
  ASSERT_EQ(segs.size(), 2u);
  for (std::size_t s = 0; s < 2; ++s) {
    EXPECT_EQ(segs[s].index, s);
    EXPECT_EQ(segs[s].frames, 2u);
    for (std::size_t i = 0; i < 30; ++i) EXPECT_EQ(segs[s].coords[i], v.coords[s * 30 + i]);
  }
  EXPECT_THROW(split_segments(v, 3), ConfigError);
  EXPECT_THROW(split_segments(v, 0), ConfigError);
}

TEST(Synthetic, DeterministicInSeed) {
  SyntheticConfig cfg;
  EXPECT_EQ(generate_synthetic_video(cfg, 2, 5), generate_synthetic_video(cfg, 2, 5));
  EXPECT_NE(generate_synthetic_video(cfg, 2, 5).coords, generate_synthetic_video(cfg, 2, 6).coords);
  cfg.seed = 1;
  SyntheticConfig other;
  EXPECT_NE(generate_synthetic_video(cfg, 2, 5).coords, generate_synthetic_video(other, 2, 5).coords);
}

TEST(Synthetic, ShapesAndLabels) {
  SyntheticConfig cfg;
  cfg.parts = 3;
  const auto v = generate_synthetic_video(cfg, 1, 0);
  v.validate();
  EXPECT_EQ(v.frames, 24u);
  EXPECT_EQ(v.points, 256u);
  EXPECT_EQ(*v.video_label, 1u);
  EXPECT_EQ(*std::max_element(v.point_labels->begin(), v.point_labels->end()), 2);
  EXPECT_THROW(generate_synthetic_video(cfg, 4, 0), RangeError);
  cfg.points = 10;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Synthetic, NoiseFreeTranslationFollowsVelocity) {
  SyntheticConfig cfg;
  cfg.noise = 0.0;
  for (std::size_t cls : {0u, 3u}) {
    const auto m = motion_params(cfg, cls, 4);
    const auto v = generate_synthetic_video(cfg, cls, 4);
    for (std::size_t t = 1; t < v.frames; ++t)
      for (std::size_t i = 0; i < v.points; ++i)
        for (int d = 0; d < 3; ++d) {
          const double moved = v.frame(t)[i * 3 + d] - v.frame(0)[i * 3 + d];
          ASSERT_NEAR(moved, static_cast<double>(t) * m.velocity[d], 1e-5);
        }
  }
  // class 0 moves along +x, class 3 along +y
  EXPECT_GT(motion_params(cfg, 0, 0).velocity[0], 0.0);
  EXPECT_NEAR(motion_params(cfg, 0, 0).velocity[1], 0.0, 1e-12);
  EXPECT_GT(motion_params(cfg, 3, 0).velocity[1], 0.0);
  EXPECT_NEAR(motion_params(cfg, 3, 0).velocity[0], 0.0, 1e-12);
}

TEST(Synthetic, NoiseFreeRotationKeepsDistanceFromAxis) {
  SyntheticConfig cfg;
  cfg.noise = 0.0;
  const auto m = motion_params(cfg, 1, 9);
  const auto v = generate_synthetic_video(cfg, 1, 9);
  for (std::size_t i = 0; i < v.points; ++i) {
    const auto radius = [&](std::size_t t) {
      const double dx = v.frame(t)[i * 3] - m.pivot[0], dy = v.frame(t)[i * 3 + 1] - m.pivot[1];
      return std::hypot(dx, dy);
    };
    for (std::size_t t = 1; t < v.frames; ++t) {
      ASSERT_NEAR(radius(t), radius(0), 1e-5);
      ASSERT_NEAR(v.frame(t)[i * 3 + 2], v.frame(0)[i * 3 + 2], 1e-6);
    }
    // rotated by the expected angle about the pivot
    const double dx0 = v.frame(0)[i * 3] - m.pivot[0], dy0 = v.frame(0)[i * 3 + 1] - m.pivot[1];
    const auto r = detail::rotate_z({dx0, dy0, 0.0}, m.angular_rate * 5.0);
    ASSERT_NEAR(v.frame(5)[i * 3] - m.pivot[0], r[0], 1e-5);
    ASSERT_NEAR(v.frame(5)[i * 3 + 1] - m.pivot[1], r[1], 1e-5);
  }
}

TEST(Synthetic, ArticulationMovesOnlyTheArmAndKeepsItsLength) {
  SyntheticConfig cfg;
  cfg.noise = 0.0;
  const auto m = motion_params(cfg, 2, 1);
  const auto v = generate_synthetic_video(cfg, 2, 1);
  const detail::BodyGeometry g;
  auto shoulder = detail::rotate_z({g.shoulder[0] * m.scale, g.shoulder[1] * m.scale, g.shoulder[2] * m.scale}, m.heading);
  for (std::size_t i = 0; i < v.points; ++i) {
    const bool arm = (*v.point_labels)[i] == 1;
    for (std::size_t t = 1; t < v.frames; ++t) {
      double d0 = 0, dt = 0, still = 0;
      for (int a = 0; a < 3; ++a) {
        d0 += std::pow(v.frame(0)[i * 3 + a] - shoulder[a], 2);
        dt += std::pow(v.frame(t)[i * 3 + a] - shoulder[a], 2);
        still += std::abs(v.frame(t)[i * 3 + a] - v.frame(0)[i * 3 + a]);
      }
      if (arm) ASSERT_NEAR(std::sqrt(dt), std::sqrt(d0), 1e-5);
      else ASSERT_EQ(still, 0.0);
    }
  }
}

TEST(Synthetic, DatasetIsClassMajor) {
  SyntheticConfig cfg;
  cfg.num_classes = 3;
  const auto d = generate_dataset(cfg, 2);
  ASSERT_EQ(d.size(), 6u);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(*d[i].video_label, i / 2);
}

TEST(Sampling, FarthestPointSampleMatchesBruteForce) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto xyz = random_cloud(80, rng);
    const auto got = farthest_point_sample(xyz, 16, 0);
    // independent greedy: recompute min distance to the picked set from scratch
    std::vector<std::uint32_t> want{0};
    while (want.size() < 16) {
      double best = -1;
      std::uint32_t arg = 0;
      for (std::uint32_t i = 0; i < 80; ++i) {
        if (std::find(want.begin(), want.end(), i) != want.end()) continue;
        double m = 1e300;
        for (auto j : want) m = std::min(m, squared_distance(xyz, i, xyz, j));
        if (m > best) {
          best = m;
          arg = i;
        }
      }
      want.push_back(arg);
    }
    EXPECT_EQ(got, want);
  }
  std::vector<float> tiny(9, 0.0f);
  EXPECT_THROW(farthest_point_sample(tiny, 4), RangeError);
}

TEST(Sampling, BallQueryMatchesBruteForce) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto pts = random_cloud(100, rng);
    const auto ctr = random_cloud(7, rng);
    const double r = 0.4;
    const auto q = ball_query(ctr, pts, r, 9);
    for (std::size_t c = 0; c < 7; ++c) {
      std::vector<std::pair<double, std::uint32_t>> all;
      for (std::uint32_t i = 0; i < 100; ++i) all.emplace_back(squared_distance(ctr, c, pts, i), i);
      std::sort(all.begin(), all.end());
      std::size_t inside = 0;
      while (inside < all.size() && all[inside].first <= r * r) ++inside;
      for (std::size_t j = 0; j < 9; ++j) {
        if (j < inside) {
          EXPECT_EQ(q.neighbors(c)[j], all[j].second);
          EXPECT_EQ(q.mask(c)[j], 1);
        } else {
          EXPECT_EQ(q.mask(c)[j], 0);
          EXPECT_EQ(q.neighbors(c)[j], all[0].second);
        }
      }
    }
  }
}

TEST(Sampling, BallQueryRejectsBadArguments) {
  std::vector<float> p(6, 0.0f);
  EXPECT_THROW(ball_query(p, p, 0.0, 3), ConfigError);
  EXPECT_THROW(ball_query(p, p, 1.0, 0), ConfigError);
}
