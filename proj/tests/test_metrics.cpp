#include <gtest/gtest.h>

#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <vector>

#include "metric_oracle.hpp"
#include "test_helpers.hpp"
#include "treelab/metrics.hpp"

using namespace treelab;
using namespace treelab::testing;

namespace {

BinaryMask line10() {
  BinaryMask m(Dims{14, 3, 3});
  for (int x = 2; x < 12; ++x) m(x, 1, 1) = 1;
  return m;
}

}  // namespace

TEST(Dice, Fixtures) {
  BinaryMask y(Dims{4, 4, 1}), g(Dims{4, 4, 1});
  for (int x = 0; x < 4; ++x) y(x, 0, 0) = 1;
  EXPECT_EQ(dice_coeff(y, y), 1.0);
  for (int x = 0; x < 4; ++x) g(x, 2, 0) = 1;
  EXPECT_EQ(dice_coeff(y, g), 0.0);
  BinaryMask h(Dims{4, 4, 1});
  h(0, 0, 0) = h(1, 0, 0) = h(0, 1, 0) = h(1, 1, 0) = 1;
  EXPECT_EQ(dice_coeff(y, h), 0.5);
  EXPECT_EQ(dice_coeff(BinaryMask(Dims{2, 2, 2}), BinaryMask(Dims{2, 2, 2})), 1.0);
  EXPECT_THROW(dice_coeff(y, BinaryMask(Dims{4, 4, 2})), DataError);
}

TEST(Completeness, Fixtures) {
  const BinaryMask cl = line10();
  EXPECT_EQ(completeness(cl, cl), 1.0);
  EXPECT_EQ(completeness(BinaryMask(cl.dims()), cl), 0.0);
  BinaryMask half(cl.dims());
  for (int x = 2; x < 7; ++x) half(x, 1, 1) = 1;
  EXPECT_EQ(completeness(half, cl), 0.5);
  EXPECT_THROW(completeness(cl, BinaryMask(cl.dims())), DataError);
}

TEST(Leakage, Fixtures) {
  BinaryMask g(Dims{20, 5, 5});
  for (int x = 2; x < 10; ++x) g(x, 2, 2) = 1;  // |G_cl| = 8
  const BinaryMask g_cl = g;
  EXPECT_EQ(leakage(g, g, g_cl), 0.0);
  EXPECT_EQ(leakage(BinaryMask(g.dims()), g, g_cl), 0.0);
  // Thin prediction that continues 4 voxels past the reference.
  BinaryMask y = g;
  for (int x = 10; x < 14; ++x) y(x, 2, 2) = 1;
  ASSERT_TRUE(skeletonize(y) == y);
  EXPECT_EQ(leakage(y, g, g_cl), 0.5);
}

TEST(Gaps, Fixtures) {
  const BinaryMask cl = line10();
  BinaryMask y = cl;
  y(6, 1, 1) = y(7, 1, 1) = 0;
  EXPECT_EQ(gaps(y, cl), 1);
  EXPECT_EQ(gaps(cl, cl), 0);
  EXPECT_EQ(gaps(BinaryMask(cl.dims()), cl), -1);
}

TEST(EvaluateCase, PerfectPrediction) {
  BinaryMask g(Dims{12, 12, 12});
  for (int z = 2; z < 10; ++z)
    for (int y = 5; y < 8; ++y)
      for (int x = 5; x < 8; ++x) g(x, y, z) = 1;
  const BinaryMask g_cl = skeletonize(g);
  const CaseMetrics m = evaluate_case(g, g, g_cl, "c0");
  EXPECT_EQ(m.id, "c0");
  EXPECT_EQ(m.dice, 1.0);
  EXPECT_EQ(m.completeness, 1.0);
  EXPECT_EQ(m.leakage, 0.0);
  EXPECT_EQ(m.gaps, 0);
}

TEST(EvaluateCase, MatchesBruteForceOracle) {
  Rng rng(2024);
  for (int trial = 0; trial < 50; ++trial) {
    const MetricTriple t = random_metric_triple(rng);
    const CaseMetrics m = evaluate_case(t.y, t.g, t.g_cl);
    const OracleMetrics o = oracle_metrics(t.y, t.g, t.g_cl, skeletonize(t.y));
    EXPECT_NEAR(m.dice, o.dice, 1e-12);
    EXPECT_NEAR(m.completeness, o.completeness, 1e-12);
    EXPECT_NEAR(m.leakage, o.leakage, 1e-12);
    EXPECT_EQ(m.gaps, o.gaps);
    EXPECT_EQ(m.detected_components, o.detected_components);
  }
}

TEST(Metrics, FlipInvariance) {
  Rng rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    const MetricTriple t = random_metric_triple(rng);
    for (int axis = 0; axis < 3; ++axis) {
      EXPECT_DOUBLE_EQ(completeness(flip(t.y, axis), flip(t.g_cl, axis)), completeness(t.y, t.g_cl));
      EXPECT_EQ(gaps(flip(t.y, axis), flip(t.g_cl, axis)), gaps(t.y, t.g_cl));
    }
  }
}

TEST(Metrics, DisjointFalsePositiveBlob) {
  Rng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const MetricTriple t = random_metric_triple(rng);
    BinaryMask y2 = t.y;
    const BinaryMask keep_out = dilate_cube3(mask_or(t.g, t.y));
    std::size_t i = 0;
    while (i < y2.size() && keep_out[i]) ++i;
    if (i == y2.size()) continue;
    y2[i] = 1;
    const CaseMetrics a = evaluate_case(t.y, t.g, t.g_cl);
    const CaseMetrics b = evaluate_case(y2, t.g, t.g_cl);
    EXPECT_EQ(count(mask_and(y2, t.g)), count(mask_and(t.y, t.g)));
    EXPECT_EQ(a.completeness, b.completeness);
    EXPECT_EQ(a.gaps, b.gaps);
    EXPECT_GE(b.leakage, a.leakage);
  }
}

TEST(Aggregate, MeanStdAndJson) {
  MetricsReport r;
  r.cases.push_back({"a", 0.5, 1.0, 0.0, 1, 2});
  r.cases.push_back({"b", 0.7, 0.5, 0.2, -1, 0});
  const MeanStd d = r.aggregate("dice");
  EXPECT_NEAR(d.mean, 0.6, 1e-15);
  EXPECT_NEAR(d.std, std::sqrt(0.02), 1e-15);
  const auto j = to_json(r);
  EXPECT_EQ(j["cases"].size(), 2u);
  EXPECT_EQ(j["cases"][1]["gaps"], -1);
  EXPECT_NEAR(j["aggregate"]["gaps"]["mean"].get<double>(), 0.0, 1e-15);
  EXPECT_THROW(r.aggregate("hausdorff"), UsageError);
}

TEST(TTest, IdenticalSamples) {
  const std::vector<double> a = {0.1, 0.5, 0.3};
  const TTestResult r = paired_ttest(a, a);
  EXPECT_EQ(r.t, 0.0);
  EXPECT_EQ(r.p, 1.0);
}

TEST(TTest, DegenerateAndBadInput) {
  EXPECT_THROW(paired_ttest({1.0, 2.0}, {0.0, 1.0}), NumericalError);
  EXPECT_THROW(paired_ttest({1.0}, {0.0}), UsageError);
  EXPECT_THROW(paired_ttest({1.0, 2.0}, {0.0}), UsageError);
}

TEST(TTest, MatchesReferenceDistribution) {
  Rng rng(77);
  for (int fixture = 0; fixture < 20; ++fixture) {
    const int n = fixture == 0 ? 10 : static_cast<int>(rng.uniform_int(2, 30));
    std::vector<double> a(n), b(n);
    for (int i = 0; i < n; ++i) {
      a[i] = rng.uniform();
      b[i] = a[i] + 0.05 * rng.normal() + 0.02 * (fixture % 3);
    }
    const TTestResult r = paired_ttest(a, b);
    // Oracle: textbook statistic and Boost's t distribution.
    double mean = 0;
    for (int i = 0; i < n; ++i) mean += a[i] - b[i];
    mean /= n;
    double ss = 0;
    for (int i = 0; i < n; ++i) ss += (a[i] - b[i] - mean) * (a[i] - b[i] - mean);
    const double t = mean / std::sqrt(ss / (n - 1) / n);
    const boost::math::students_t dist(n - 1);
    const double p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
    EXPECT_NEAR(r.t, t, 1e-9 * std::max(1.0, std::abs(t)));
    EXPECT_NEAR(r.p, p, 1e-9);
    // Two-sidedness: swapping the samples flips t but keeps p.
    const TTestResult s = paired_ttest(b, a);
    EXPECT_NEAR(s.t, -r.t, 1e-12 * std::max(1.0, std::abs(t)));
    EXPECT_EQ(s.p, r.p);
  }
}

TEST(TTest, IncompleteBetaEdgeValues) {
  EXPECT_EQ(incomplete_beta(2, 3, 0), 0.0);
  EXPECT_EQ(incomplete_beta(2, 3, 1), 1.0);
  // I_x(1, 1) = x and I_x(a, 1) = x^a.
  EXPECT_NEAR(incomplete_beta(1, 1, 0.3), 0.3, 1e-14);
  EXPECT_NEAR(incomplete_beta(2.5, 1, 0.4), std::pow(0.4, 2.5), 1e-14);
  EXPECT_NEAR(student_t_two_sided_p(0.0, 5), 1.0, 1e-14);
}
