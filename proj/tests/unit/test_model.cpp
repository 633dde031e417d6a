#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "pcsc/encoder.hpp"
#include "pcsc/predictor.hpp"
#include "support/gradcheck.hpp"
#include "support/random.hpp"

using namespace pcsc;
using pcsc::testing::gaussian;
using pcsc::testing::gradcheck;

namespace {

// Coordinates on a 1/256 grid so that shifts by dyadic offsets are exact in f32.
Segment grid_segment(std::size_t frames, std::size_t points, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> u(-200, 200);
  Segment s{0, frames, points, {}};
  for (std::size_t i = 0; i < frames * points * 3; ++i) s.coords.push_back(static_cast<float>(u(rng)) / 256.0f);
  return s;
}

Segment shifted(Segment s, float dx, float dy, float dz) {
  for (std::size_t i = 0; i < s.coords.size(); i += 3) {
    s.coords[i] += dx;
    s.coords[i + 1] += dy;
    s.coords[i + 2] += dz;
  }
  return s;
}

EncoderConfig small_encoder() {
  EncoderConfig c;
  c.centers = 6;
  c.hidden = 16;
  c.width = 8;
  return c;
}

template <class Real>
double max_diff(const Tensor<Real>& a, const Tensor<Real>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a.data()[i]) - b.data()[i]));
  return m;
}

Tensor<double> readout(const Tensor<double>& y) {
  std::mt19937_64 rng(77);
  return sum(mul(y, gaussian(y.shape(), rng)));
}

SuperpointGrid<double> random_grid(std::size_t l, std::size_t r, std::size_t c, double t0, std::mt19937_64& rng) {
  SuperpointGrid<double> g{gaussian({l, r, c}, rng), {}};
  std::uniform_real_distribution<double> u(-1, 1);
  for (std::size_t i = 0; i < l; ++i)
    for (std::size_t j = 0; j < r; ++j) g.positions.insert(g.positions.end(), {t0 + 2.0 * i, u(rng), u(rng), u(rng)});
  return g;
}

}  // namespace

TEST(Encoder, OutputFramesFormula) {
  for (std::size_t t = 0; t <= 2; ++t)
    for (std::size_t stride = 1; stride <= 3; ++stride)
      for (std::size_t len = 2 * t + 1; len <= 12; ++len) {
        EncoderConfig c;
        c.temporal_radius = t;
        c.stride = stride;
        const auto want = static_cast<std::size_t>(std::ceil(static_cast<double>(len - 2 * t) / static_cast<double>(stride)));
        EXPECT_EQ(c.output_frames(len), want) << len << " " << t << " " << stride;
      }
  EncoderConfig c;
  EXPECT_THROW(c.output_frames(2), ConfigError);
}

TEST(Encoder, GridShapeAndAnchors) {
  auto cfg = small_encoder();
  const auto seg = grid_segment(6, 40, 1);
  const auto p = init_encoder<double>(cfg, 3);
  const auto g = encode_segment(seg, cfg, p);
  EXPECT_EQ(g.embeddings.shape(), (Shape{2, 6, 8}));
  for (std::size_t sp = 0; sp < 12; ++sp) EXPECT_EQ(g.positions[sp * 4], sp < 6 ? 1.0 : 3.0);
  const auto in = prepare_segment<double>(seg, cfg);
  EXPECT_EQ(in.members, 27u);
  for (const auto& tube : in.tube_points) EXPECT_LE(tube.size(), 27u);
}

TEST(Encoder, InitRules) {
  const auto cfg = small_encoder();
  const auto p = init_encoder<double>(cfg, 5);
  for (const auto* l : {&p.point1, &p.point2, &p.out1, &p.out2}) {
    const double a = xavier_bound(l->in_features(), l->out_features());
    for (double w : l->weight.data()) EXPECT_LE(std::abs(w), a);
    for (double b : l->bias.data()) EXPECT_EQ(b, 0.0);
  }
  for (double g : p.bn1.gamma.data()) EXPECT_EQ(g, 1.0);
  EXPECT_EQ(init_encoder<double>(cfg, 5).point1.weight.values(), p.point1.weight.values());
}

TEST(Encoder, ExactTranslationInvariance) {
  const auto cfg = small_encoder();
  const auto p64 = init_encoder<double>(cfg, 7);
  const auto p32 = init_encoder<float>(cfg, 7);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto seg = grid_segment(6, 50, seed);
    const auto moved = shifted(seg, 2.0f, -1.5f, 0.25f);
    EXPECT_EQ(max_diff(encode_segment(seg, cfg, p64).embeddings, encode_segment(moved, cfg, p64).embeddings), 0.0);
    EXPECT_LE(max_diff(encode_segment(seg, cfg, p32).embeddings, encode_segment(moved, cfg, p32).embeddings), 1e-5);
  }
}

TEST(Encoder, TranslationInvarianceUnderRoundingF32) {
  const auto cfg = small_encoder();
  const auto p = init_encoder<float>(cfg, 8);
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<float> u(-0.6f, 0.6f);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto seg = grid_segment(6, 50, seed + 10);
    const auto moved = shifted(seg, u(rng), u(rng), u(rng));
    EXPECT_LE(max_diff(encode_segment(seg, cfg, p).embeddings, encode_segment(moved, cfg, p).embeddings), 1e-5);
  }
}

TEST(Encoder, PointOrderInvarianceWithExplicitCenters) {
  const auto cfg = small_encoder();
  const auto p = init_encoder<double>(cfg, 9);
  const auto p32 = init_encoder<float>(cfg, 9);
  std::mt19937_64 rng(9);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto seg = grid_segment(6, 50, seed + 20);
    std::vector<float> centers;
    for (std::size_t i = 0; i < 2 * 6 * 3; ++i) centers.push_back(seg.coords[(i * 7) % seg.coords.size()]);
    Segment perm = seg;
    for (std::size_t f = 0; f < 6; ++f) {
      std::vector<std::size_t> order(50);
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t i = 0; i < 50; ++i)
        for (int d = 0; d < 3; ++d) perm.coords[(f * 50 + i) * 3 + d] = seg.coords[(f * 50 + order[i]) * 3 + d];
    }
    const auto a = encode_segment<double>(seg, cfg, p, std::span<const float>(centers));
    const auto b = encode_segment<double>(perm, cfg, p, std::span<const float>(centers));
    EXPECT_EQ(max_diff(a.embeddings, b.embeddings), 0.0);
    const auto a32 = encode_segment<float>(seg, cfg, p32, std::span<const float>(centers));
    const auto b32 = encode_segment<float>(perm, cfg, p32, std::span<const float>(centers));
    EXPECT_LE(max_diff(a32.embeddings, b32.embeddings), 1e-5);
  }
}

TEST(Encoder, DuplicatedMembersDoNotChangeTheEmbedding) {
  const auto cfg = small_encoder();
  const auto p = init_encoder<double>(cfg, 10);
  std::mt19937_64 rng(10);
  const std::size_t tubes = 5, members = 4;
  std::normal_distribution<double> g;
  std::vector<double> f(tubes * members * 4), twice;
  for (double& x : f) x = g(rng);
  for (std::size_t t = 0; t < tubes; ++t)
    for (int rep = 0; rep < 2; ++rep) twice.insert(twice.end(), f.begin() + t * members * 4, f.begin() + (t + 1) * members * 4);
  EXPECT_EQ(max_diff(encode_tubes(f, tubes, members, p), encode_tubes(twice, tubes, 2 * members, p)), 0.0);
}

TEST(Encoder, GradientsMatchFiniteDifferences) {
  auto cfg = small_encoder();
  cfg.hidden = 6;
  cfg.width = 8;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto p = init_encoder<double>(cfg, seed);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g;
    std::vector<double> f(4 * 3 * 4);
    for (double& x : f) x = g(rng);
    const auto r = gradcheck([&] { return readout(encode_tubes(f, 4, 3, p, true)); },
                             {p.point1.weight, p.point2.weight, p.bn2.gamma, p.out1.weight, p.bn3.beta, p.out2.weight, p.out2.bias});
    EXPECT_LT(r.max_relative_error, 1e-4) << seed << " input " << r.worst;
  }
}

TEST(Predictor, SinusoidalValues) {
  const auto pe = sinusoidal_encoding<double>(3, 4);
  EXPECT_DOUBLE_EQ(pe.data()[0], 0.0);
  EXPECT_DOUBLE_EQ(pe.data()[1], 1.0);
  EXPECT_DOUBLE_EQ(pe.data()[4], std::sin(1.0));
  EXPECT_DOUBLE_EQ(pe.data()[5], std::cos(1.0));
  EXPECT_DOUBLE_EQ(pe.data()[10], std::sin(2.0 / 100.0));
}

TEST(Predictor, DepthZeroAddsOnlyPositionTerms) {
  AutoregressorConfig cfg{0, 2, 8, 16, true};
  const auto p = init_autoregressor<double>(cfg, 1);
  std::mt19937_64 rng(1);
  std::vector<SuperpointGrid<double>> in{random_grid(2, 3, 8, 1, rng), random_grid(2, 3, 8, 1, rng)};
  const auto y = autoregress_tokens(in, cfg, p);
  ASSERT_EQ(y.shape(), (Shape{12, 8}));
  std::vector<double> pos(in[0].positions);
  pos.insert(pos.end(), in[1].positions.begin(), in[1].positions.end());
  const auto pe = sinusoidal_encoding<double>(12, 8);
  const auto lin = p.position_embed(Tensor<double>(Shape{12, 4}, pos));
  for (std::size_t i = 0; i < 12; ++i)
    for (std::size_t j = 0; j < 8; ++j) {
      const double x = (i < 6 ? in[0] : in[1]).embeddings.data()[(i % 6) * 8 + j];
      EXPECT_NEAR(y.data()[i * 8 + j], x + pe.data()[i * 8 + j] + lin.data()[i * 8 + j], 1e-12);
    }
  const auto q = autoregress(in, cfg, p);
  EXPECT_EQ(q.embeddings.shape(), (Shape{2, 3, 8}));
  EXPECT_EQ(q.positions, in[1].positions);
  EXPECT_EQ(q.embeddings.data()[0], y.data()[6 * 8]);
}

TEST(Predictor, CausalMaskHidesLaterTokens) {
  AutoregressorConfig cfg{2, 2, 8, 16, true};
  const auto p = init_autoregressor<double>(cfg, 2);
  std::mt19937_64 rng(2);
  std::vector<SuperpointGrid<double>> in{random_grid(2, 3, 8, 1, rng), random_grid(2, 3, 8, 1, rng)};
  const auto base = autoregress_tokens(in, cfg, p);
  for (std::size_t victim : {3u, 7u, 11u}) {
    auto changed = in;
    changed[victim / 6].embeddings = gaussian({2, 3, 8}, rng);
    // only the victim's own row differs from the original
    auto orig = in[victim / 6].embeddings.values();
    auto edited = changed[victim / 6].embeddings.values();
    for (std::size_t k = 0; k < 6; ++k)
      if (k != victim % 6) std::copy_n(orig.begin() + k * 8, 8, edited.begin() + k * 8);
    changed[victim / 6].embeddings = Tensor<double>(Shape{2, 3, 8}, edited);
    const auto out = autoregress_tokens(changed, cfg, p);
    for (std::size_t i = 0; i < 12; ++i) {
      double d = 0;
      for (std::size_t j = 0; j < 8; ++j) d = std::max(d, std::abs(out.data()[i * 8 + j] - base.data()[i * 8 + j]));
      if (i < victim) {
        EXPECT_EQ(d, 0.0) << "token " << i << " sees " << victim;
      } else if (i == victim) {
        EXPECT_GT(d, 0.0);
      }
    }
  }
  cfg.causal = false;
  auto changed = in;
  changed[1].embeddings = gaussian({2, 3, 8}, rng);
  const auto a = autoregress_tokens(in, cfg, p), b = autoregress_tokens(changed, cfg, p);
  EXPECT_GT(std::abs(a.data()[0] - b.data()[0]), 0.0);
}

TEST(Predictor, WidthMismatchIsAConfigError) {
  AutoregressorConfig cfg{1, 2, 8, 16, true};
  const auto p = init_autoregressor<double>(cfg, 3);
  std::mt19937_64 rng(3);
  std::vector<SuperpointGrid<double>> in{random_grid(1, 2, 6, 1, rng)};
  EXPECT_THROW(autoregress_tokens(in, cfg, p), ConfigError);
  EXPECT_THROW((AutoregressorConfig{1, 3, 8, 16, true}.validate()), ConfigError);
}

TEST(Predictor, InterpolationMatchesBruteForce) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> src, dst;
    for (int i = 0; i < 10; ++i) src.insert(src.end(), {double(i % 3), u(rng), u(rng), u(rng)});
    for (int i = 0; i < 4; ++i) dst.insert(dst.end(), {double(i % 3), u(rng), u(rng), u(rng)});
    const double ts = 0.5;
    const auto w = interpolation_weights<double>(src, dst, 3, ts);
    for (int i = 0; i < 4; ++i) {
      std::vector<std::pair<double, int>> d;
      for (int j = 0; j < 10; ++j) {
        double s = std::pow((dst[i * 4] - src[j * 4]) * ts, 2);
        for (int a = 1; a < 4; ++a) s += std::pow(dst[i * 4 + a] - src[j * 4 + a], 2);
        d.emplace_back(std::sqrt(s), j);
      }
      std::sort(d.begin(), d.end());
      const double z = 1 / d[0].first + 1 / d[1].first + 1 / d[2].first;
      std::vector<double> want(10, 0.0);
      for (int q = 0; q < 3; ++q) want[d[q].second] = (1 / d[q].first) / z;
      for (int j = 0; j < 10; ++j) ASSERT_NEAR(w[i * 10 + j], want[j], 1e-12);
    }
  }
}

// Aligned rows against a direct k-nearest inverse-distance blend of the raw rows.
TEST(AlignOracle, MatchesDirectBlend) {
  std::mt19937_64 rng(15);
  std::uniform_real_distribution<double> u(-1, 1);
  std::uniform_int_distribution<int> kd(1, 4);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t sf = 2, sc = 3, tf = 2, tc = 2, c = 5;
    PredictionGrid<double> q{gaussian({sf, sc, c}, rng), {}, PredictionStage::raw};
    for (std::size_t f = 0; f < sf; ++f)
      for (std::size_t i = 0; i < sc; ++i) q.positions.insert(q.positions.end(), {double(f), u(rng), u(rng), u(rng)});
    std::vector<double> targets;
    for (std::size_t f = 0; f < tf; ++f)
      for (std::size_t i = 0; i < tc; ++i) targets.insert(targets.end(), {double(f + sf), u(rng), u(rng), u(rng)});
    const auto k = static_cast<std::size_t>(kd(rng));
    const double ts = trial % 2 ? 0.5 : 1.0;
    const auto got = align_predictions(q, targets, tf, tc, k, ts);
    ASSERT_EQ(got.embeddings.shape(), (Shape{tf, tc, c}));
    const std::size_t ns = sf * sc;
    for (std::size_t i = 0; i < tf * tc; ++i) {
      std::vector<double> d(ns);
      for (std::size_t j = 0; j < ns; ++j) {
        double s = std::pow((targets[i * 4] - q.positions[j * 4]) * ts, 2);
        for (int a = 1; a < 4; ++a) s += std::pow(targets[i * 4 + a] - q.positions[j * 4 + a], 2);
        d[j] = std::sqrt(s);
      }
      // j is among the k nearest when fewer than k sources are strictly closer
      double z = 0;
      std::vector<double> w(ns, 0.0);
      for (std::size_t j = 0; j < ns; ++j) {
        std::size_t closer = 0;
        for (std::size_t o = 0; o < ns; ++o) closer += d[o] < d[j];
        if (closer < k) {
          w[j] = 1 / d[j];
          z += w[j];
        }
      }
      for (std::size_t a = 0; a < c; ++a) {
        double want = 0;
        for (std::size_t j = 0; j < ns; ++j) want += w[j] / z * q.embeddings.data()[j * c + a];
        ASSERT_NEAR(got.embeddings.data()[i * c + a], want, 1e-10) << trial;
      }
    }
  }
}

TEST(Predictor, AlignExamples) {
  std::mt19937_64 rng(5);
  PredictionGrid<double> q{gaussian({1, 1, 4}, rng), {0, 0, 0, 0}, PredictionStage::raw};
  const std::vector<double> targets{1, 1, 0, 0, 3, -2, 5, 1};
  const auto a = align_predictions(q, targets, 2, 1, 3, 0.5);
  EXPECT_EQ(a.stage, PredictionStage::aligned);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(a.embeddings.data()[i], q.embeddings.data()[i % 4], 1e-12);

  // A target on top of a source takes that source's embedding.
  PredictionGrid<double> two{gaussian({1, 2, 4}, rng), {0, 0, 0, 0, 0, 1, 0, 0}, PredictionStage::raw};
  const std::vector<double> on{0, 1, 0, 0};
  const auto b = align_predictions(two, on, 1, 1, 2, 0.5);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(b.embeddings.data()[i], two.embeddings.data()[4 + i], 1e-7);
  // midpoint: equal weights
  const std::vector<double> mid{0, 0.5, 0, 0};
  const auto c = align_predictions(two, mid, 1, 1, 2, 0.5);
  for (std::size_t i = 0; i < 4; ++i)
    EXPECT_NEAR(c.embeddings.data()[i], 0.5 * (two.embeddings.data()[i] + two.embeddings.data()[4 + i]), 1e-12);
  EXPECT_THROW(align_predictions(two, mid, 1, 1, 0, 0.5), ConfigError);
  EXPECT_THROW(align_predictions(two, mid, 2, 1, 1, 0.5), DimensionError);
}

TEST(Predictor, HeadIdentityNormalizesAndHeadOutputIsUnit) {
  std::mt19937_64 rng(6);
  PredictionGrid<double> g{gaussian({2, 3, 8}, rng, 3.0), std::vector<double>(24, 0.0), PredictionStage::aligned};
  const auto id = predict_head(g, PredictorHead<double>::identity(8, 1));
  EXPECT_EQ(id.stage, PredictionStage::projected);
  const auto x = g.rows();
  for (std::size_t r = 0; r < 6; ++r) {
    double n = 0;
    for (std::size_t j = 0; j < 8; ++j) n += x.data()[r * 8 + j] * x.data()[r * 8 + j];
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(id.embeddings.data()[r * 8 + j], x.data()[r * 8 + j] / std::sqrt(n), 1e-12);
  }
  const auto full = predict_head(g, PredictorHead<double>::init(8, 2));
  for (std::size_t r = 0; r < 6; ++r) {
    double n = 0;
    for (std::size_t j = 0; j < 8; ++j) n += std::pow(full.embeddings.data()[r * 8 + j], 2);
    EXPECT_NEAR(n, 1.0, 1e-12);
  }
}

TEST(Predictor, GradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    AutoregressorConfig cfg{1, 2, 4, 6, true};
    auto p = init_autoregressor<double>(cfg, seed);
    std::mt19937_64 rng(seed);
    std::vector<SuperpointGrid<double>> in{random_grid(1, 2, 4, 1, rng), random_grid(1, 2, 4, 7, rng)};
    auto head = PredictorHead<double>::init(4, seed);
    const std::vector<double> targets{13, 0.1, 0.2, 0.3, 13, -0.4, 0.5, 0};
    auto& b = p.blocks[0];
    const auto r = gradcheck(
        [&] {
          const auto q = autoregress(in, cfg, p);
          return readout(predict_head(align_predictions(q, targets, 1, 2, 2, 0.5), head).embeddings);
        },
        {in[0].embeddings, in[1].embeddings, b.query.weight, b.key.weight, b.value.weight, b.proj.weight, b.norm1.gamma,
         b.ff1.weight, b.ff2.bias, p.position_embed.weight, head.mlp.fc1.weight, head.mlp.fc2.weight});
    EXPECT_LT(r.max_relative_error, 1e-4) << seed << " input " << r.worst;
  }
}
