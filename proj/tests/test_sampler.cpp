#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "eviatta/sampler.hpp"
#include "support.hpp"

using namespace eviatta;
using namespace eviatta::testing;

namespace {

/// Values drawn from a few clusters so Otsu has real structure to find.
RealMap clustered_map(std::size_t n, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> k(2, 4);
  std::uniform_real_distribution<Real> u(0, 1);
  const int clusters = k(rng);
  std::vector<Real> centres, widths;
  for (int i = 0; i < clusters; ++i) {
    centres.push_back(u(rng));
    widths.push_back(0.01 + 0.1 * u(rng));
  }
  std::uniform_int_distribution<int> pick(0, clusters - 1);
  std::normal_distribution<Real> nd(0, 1);
  RealMap m(n, n, 0.0);
  for (auto& v : m.values) {
    const int c = pick(rng);
    v = std::max(Real{0}, centres[static_cast<std::size_t>(c)] + widths[static_cast<std::size_t>(c)] * nd(rng));
  }
  return m;
}

/// Logits from a fixed field plus bumps around each clicked point, so that
/// every answer changes the next uncertainty map.
PromptForward toy_forward(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<Real> u(-2, 2);
  std::vector<Real> base(n * n * 2);
  for (auto& v : base) v = u(rng);
  return [n, base](const PromptSet& p) {
    std::vector<Real> z = base;
    for (const auto& pt : p.points)
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < n; ++c) {
          const Real d2 = std::pow(static_cast<Real>(r) - pt.row, 2) + std::pow(static_cast<Real>(c) - pt.col, 2);
          z[(r * n + c) * 2 + (pt.positive ? 1 : 0)] += 4 * std::exp(-d2 / 8);
        }
    return Tensor::from({n, n, 2}, std::move(z));
  };
}

}  // namespace

// ---------------------------------------------------------------------------
// Otsu

TEST(Otsu, PerfectBimodalSplit) {
  RealMap m(4, 4, 0.0);
  for (std::size_t i = 8; i < 16; ++i) m.values[i] = 1.0;
  const auto r = otsu_threshold(m);
  ASSERT_FALSE(r.degenerate);
  EXPECT_GT(r.threshold, 0);
  EXPECT_LT(r.threshold, 1);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(m.values[i] > r.threshold, i >= 8);
}

TEST(Otsu, ConstantMapIsDegenerate) {
  EXPECT_TRUE(otsu_threshold(RealMap(8, 8, 0.5)).degenerate);
}

TEST(Otsu, NonFiniteMapThrows) {
  RealMap m(2, 2, 0.1);
  m.values[3] = std::numeric_limits<Real>::infinity();
  EXPECT_THROW(otsu_threshold(m), NumericError);
}

TEST(Otsu, MatchesExhaustiveScanOnRandomMaps) {
  std::mt19937_64 rng(101);
  for (int trial = 0; trial < 50; ++trial) {
    const RealMap m = trial % 2 ? clustered_map(64, rng) : random_map(64, 64, rng, 0, 0.7);
    const auto got = otsu_threshold(m);
    const auto want = brute_otsu(m);
    ASSERT_EQ(got.degenerate, want.degenerate);
    EXPECT_EQ(got.threshold, want.threshold) << "trial " << trial;
  }
}

TEST(Otsu, MatchesExhaustiveScanWithEmptyBinsAndTies) {
  // few distinct values leave long runs of empty bins with tied scores
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> level(0, 5);
  for (int trial = 0; trial < 20; ++trial) {
    RealMap m(32, 32, 0.0);
    for (auto& v : m.values) v = 0.1 * level(rng);
    EXPECT_EQ(otsu_threshold(m).threshold, brute_otsu(m).threshold);
  }
}

// ---------------------------------------------------------------------------
// Distance transform

TEST(Distance, RingAroundConfidentCentre) {
  Mask u(3, 3, 1);
  u(1, 1) = 0;
  const RealMap d = distance_map(u);
  EXPECT_EQ(d(1, 1), 0);
  EXPECT_EQ(d(0, 1), 1);
  EXPECT_EQ(d(1, 0), 1);
  EXPECT_NEAR(d(0, 0), std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(d(2, 2), 1.41421, 1e-5);
}

TEST(Distance, AllConfidentIsZero) {
  const RealMap d = distance_map(Mask(5, 7, 0));
  for (Real v : d.values) EXPECT_EQ(v, 0);
}

TEST(Distance, AllUncertainMeasuresToBorder) {
  const RealMap d = distance_map(Mask(5, 5, 1));
  EXPECT_EQ(d(0, 0), 1);
  EXPECT_EQ(d(2, 2), 3);
  EXPECT_EQ(d(1, 3), 2);
  EXPECT_EQ(d, brute_distance_map(Mask(5, 5, 1)));
}

TEST(Distance, MatchesBruteForceOnRandomMasks) {
  std::mt19937_64 rng(202);
  for (int trial = 0; trial < 50; ++trial) {
    const double p = trial == 0 ? 1.0 : 0.3 + 0.69 * static_cast<double>(trial) / 50;
    const Mask u = trial % 3 == 0 && trial > 0 ? random_blob_mask(64, rng, 4) : random_mask(64, 64, p, rng);
    EXPECT_EQ(distance_map(u), brute_distance_map(u)) << "trial " << trial;
  }
}

TEST(Distance, NonSquareMasks) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const Mask u = random_mask(7 + trial, 19 - trial, 0.8, rng);
    EXPECT_EQ(distance_map(u), brute_distance_map(u));
  }
}

// ---------------------------------------------------------------------------
// Pixel selection

TEST(SelectPixel, PlainArgmax) {
  const RealMap data(2, 2, std::vector<Real>{.1, .9, .2, .3});
  const auto q = select_pixel(data, RealMap(2, 2, 1.0));
  EXPECT_EQ(q.row, 0u);
  EXPECT_EQ(q.col, 1u);
}

TEST(SelectPixel, RowMajorTieBreak) {
  const auto q = select_pixel(RealMap(2, 2, 0.5), RealMap(2, 2, 2.0));
  EXPECT_EQ(q.row, 0u);
  EXPECT_EQ(q.col, 0u);
}

TEST(SelectPixel, ZeroProductFallsBackToData) {
  const RealMap data(2, 2, std::vector<Real>{.1, .2, .7, .3});
  const auto q = select_pixel(data, RealMap(2, 2, 0.0));
  EXPECT_TRUE(q.fallback);
  EXPECT_EQ(q.row, 1u);
  EXPECT_EQ(q.col, 0u);
}

TEST(SelectPixel, ExclusionSkipsQueriedPixels) {
  const RealMap data(2, 2, std::vector<Real>{.1, .9, .2, .3});
  Mask ex(2, 2, 0);
  ex(0, 1) = 1;
  const auto q = select_pixel(data, RealMap(2, 2, 1.0), &ex);
  EXPECT_EQ(q.row, 1u);
  EXPECT_EQ(q.col, 1u);
  EXPECT_THROW(select_pixel(data, RealMap(2, 2, 1.0), &(ex = Mask(2, 2, 1))), std::logic_error);
}

TEST(SelectPixel, MatchesFullScanOnRandomMaps) {
  std::mt19937_64 rng(303);
  for (int trial = 0; trial < 50; ++trial) {
    const RealMap data = random_map(32, 32, rng), dist = random_map(32, 32, rng, 0, 5);
    const Mask ex = random_mask(32, 32, 0.1, rng);
    std::size_t best = 0;
    Real best_v = -1;
    for (std::size_t i = 0; i < data.size(); ++i)
      if (!ex.values[i] && data.values[i] * dist.values[i] > best_v) best_v = data.values[i] * dist.values[i], best = i;
    const auto q = select_pixel(data, dist, &ex);
    EXPECT_EQ(q.row * 32 + q.col, best);
    EXPECT_EQ(q.score, best_v);
  }
}

TEST(SelectPixel, DistanceAwarePrefersInteriorOfUncertainRegion) {
  // a flat uncertain plateau: the centre is farthest from confident pixels
  RealMap data(9, 9, 0.01);
  for (std::size_t r = 2; r <= 6; ++r)
    for (std::size_t c = 2; c <= 6; ++c) data(r, c) = 0.5;
  const auto q = select_distance_aware(data);
  EXPECT_EQ(q.row, 4u);
  EXPECT_EQ(q.col, 4u);
  EXPECT_FALSE(q.fallback);
}

TEST(SelectPixel, DegenerateMapFallsBackToArgmax) {
  Mask ex(3, 3, 0);
  ex(0, 0) = 1;
  const auto q = select_distance_aware(RealMap(3, 3, 0.2), &ex);
  EXPECT_TRUE(q.fallback);
  EXPECT_EQ(q.row * 3 + q.col, 1u);
}

// ---------------------------------------------------------------------------
// Sample selection

TEST(TopK, Examples) {
  const auto r = select_topk_samples({0.3, 0.9, 0.1, 0.5}, 2);
  EXPECT_EQ(r.selected_indices, (std::vector<std::size_t>{1, 3}));
  EXPECT_EQ(budget_from_fraction(0.10, 32), 3u);
  EXPECT_EQ(budget_from_fraction(0.20, 32), 6u);
  EXPECT_EQ(budget_from_fraction(0.01, 10), 1u);
  EXPECT_EQ(budget_from_fraction(1.0, 10), 10u);
  EXPECT_THROW(budget_from_fraction(0, 10), std::invalid_argument);
}

TEST(TopK, TiesGoToLowerIndexAndKClamps) {
  const auto r = select_topk_samples(std::vector<Real>(6, 0.4), 3);
  EXPECT_EQ(r.selected_indices, (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(select_topk_samples({0.1, 0.2}, 5).selected_indices.size(), 2u);
  EXPECT_THROW(select_topk_samples({}, 1), std::invalid_argument);
}

TEST(Rules, EntropyPixelPickIsThePeak) {
  const auto fwd = toy_forward(8, 1);
  Tensor z = Tensor::full({8, 8, 2}, 3.0);
  auto zd = z.mutable_data();
  for (std::size_t p = 0; p < 64; ++p) zd[p * 2] = -3.0;
  zd[(5 * 8 + 2) * 2] = 3.0;  // one maximally uncertain pixel
  const auto maps = decompose(evidence_from_logits(z));
  std::mt19937_64 rng(0);
  const auto q = next_pixel(maps, AcquisitionRule::entropy(), Mask(8, 8, 0), rng);
  EXPECT_EQ(q.row, 5u);
  EXPECT_EQ(q.col, 2u);
}

TEST(Rules, RandomPicksAreReproducibleAndAvoidExcluded) {
  const auto maps = decompose(evidence_from_logits(Tensor::zeros({6, 6, 2})));
  Mask ex(6, 6, 1);
  ex(2, 3) = 0;
  ex(4, 1) = 0;
  std::mt19937_64 a(9), b(9);
  for (int i = 0; i < 20; ++i) {
    const auto qa = next_pixel(maps, AcquisitionRule::random(), ex, a);
    const auto qb = next_pixel(maps, AcquisitionRule::random(), ex, b);
    EXPECT_EQ(qa, qb);
    EXPECT_FALSE(ex(qa.row, qa.col));
  }
}

// ---------------------------------------------------------------------------
// Iterative annotation

TEST(Annotation, ZeroBudgetKeepsPromptAndOneSnapshot) {
  Mask gt(16, 16, 0);
  GroundTruthOracle oracle([&](std::size_t) -> const Mask& { return gt; });
  const PromptSet init{{2, 2, 10, 10}, {}};
  const auto r = annotate_iteratively(0, init, toy_forward(16, 2), oracle, 0);
  EXPECT_EQ(r.prompts, init);
  EXPECT_EQ(r.snapshots.size(), 1u);
  EXPECT_TRUE(r.queries.empty());
}

TEST(Annotation, FivePointsGiveSixSnapshotsAndTruthfulLabels) {
  std::mt19937_64 rng(4);
  for (const auto& rule : {AcquisitionRule::eviatta(), AcquisitionRule::entropy(), AcquisitionRule::swapped(),
                           AcquisitionRule::random()}) {
    const Mask gt = random_blob_mask(16, rng, 2);
    GroundTruthOracle oracle([&](std::size_t) -> const Mask& { return gt; });
    const auto r = annotate_iteratively(3, {{1, 1, 14, 14}, {}}, toy_forward(16, 5), oracle, 5, rule, 11);
    ASSERT_EQ(r.prompts.points.size(), 5u);
    EXPECT_EQ(r.snapshots.size(), 6u);
    std::set<std::pair<int, int>> seen;
    for (std::size_t i = 0; i < 5; ++i) {
      const auto& p = r.prompts.points[i];
      EXPECT_EQ(p.positive, gt(static_cast<std::size_t>(p.row), static_cast<std::size_t>(p.col)) != 0);
      EXPECT_TRUE(seen.insert({p.row, p.col}).second) << "pixel queried twice";
      EXPECT_EQ(r.queries[i].iteration, i);
    }
  }
}

TEST(Annotation, CursorPendingIsStableUntilAnswered) {
  AnnotationCursor cur(0, {{0, 0, 15, 15}, {}}, 3, AcquisitionRule::eviatta(), toy_forward(16, 6), 0);
  const PixelQuery first = cur.pending();
  EXPECT_EQ(cur.pending(), first);
  EXPECT_THROW(cur.answer(7), std::invalid_argument);
  EXPECT_EQ(cur.answered(), 0u);
  cur.answer(1);
  EXPECT_EQ(cur.answered(), 1u);
  EXPECT_NE(cur.pending(), first);
  cur.answer(0);
  cur.answer(0);
  EXPECT_TRUE(cur.complete());
  EXPECT_THROW(cur.pending(), std::logic_error);
}

TEST(Annotation, OracleOutOfRangeRaises) {
  Mask gt(4, 4, 0);
  GroundTruthOracle oracle([&](std::size_t) -> const Mask& { return gt; });
  EXPECT_THROW(oracle.label(0, 9, 0), OracleError);
}
