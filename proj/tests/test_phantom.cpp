#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "treelab/graph_io.hpp"
#include "treelab/phantom.hpp"

using namespace treelab;

namespace {

PhantomSpec spec_with(int depth, std::uint64_t seed) {
  PhantomSpec s;
  s.depth = depth;
  s.seed = seed;
  return s;
}

}  // namespace

TEST(Phantom, DepthZeroIsSingleBranch) {
  const PhantomSample p = generate_tree(spec_with(0, 3));
  EXPECT_EQ(p.graph.branches.size(), 1u);
  EXPECT_EQ(p.graph.bifurcation_count(), 0u);
  EXPECT_EQ(p.graph.endpoint_count(), 2u);
  EXPECT_TRUE(p.graph.branches[0].is_terminal);
}

TEST(Phantom, DepthThreeCountsAndGenerations) {
  const PhantomSample p = generate_tree(spec_with(3, 5));
  EXPECT_EQ(p.graph.branches.size(), 15u);
  EXPECT_EQ(p.graph.bifurcation_count(), 7u);
  EXPECT_EQ(p.graph.nodes.size(), 2u + (15u - 1u));
  EXPECT_EQ(terminal_branches(p.graph).size(), 8u);
  std::map<int, int> per_gen;
  for (const auto& b : p.graph.branches) ++per_gen[b.generation];
  EXPECT_EQ(per_gen, (std::map<int, int>{{0, 1}, {1, 2}, {2, 4}, {3, 8}}));
  for (const auto& b : p.graph.branches) EXPECT_GT(b.mean_diameter_vox, 0.0);
}

TEST(Phantom, ContainmentInvariants) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const PhantomSample p = generate_tree(spec_with(3, seed));
    EXPECT_TRUE(is_subset(p.gt_centerline, p.gt_mask));
    EXPECT_TRUE(is_subset(p.gt_mask, p.bounding_mask));
    EXPECT_TRUE(is_subset(graph_mask(p.graph), p.gt_centerline));
    EXPECT_EQ(count_components(p.gt_mask, Connectivity::twenty_six), 1);
    for (float v : p.image.values()) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
}

TEST(Phantom, BitDeterministicPerSeed) {
  const PhantomSample a = generate_tree(spec_with(3, 11));
  const PhantomSample b = generate_tree(spec_with(3, 11));
  EXPECT_TRUE(a.image == b.image);
  EXPECT_TRUE(a.gt_mask == b.gt_mask);
  EXPECT_TRUE(a.gt_centerline == b.gt_centerline);
  EXPECT_TRUE(a.bounding_mask == b.bounding_mask);
  EXPECT_EQ(to_json(a.graph), to_json(b.graph));
  const PhantomSample c = generate_tree(spec_with(3, 12));
  EXPECT_FALSE(a.gt_mask == c.gt_mask);
}

TEST(Phantom, RadiiDecreaseWithLevel) {
  const PhantomSample p = generate_tree(spec_with(3, 2));
  std::map<int, double> radius;
  for (const auto& s : p.segments) radius[s.level] = s.radius;
  for (int level = 1; level <= 3; ++level) EXPECT_LT(radius[level], radius[level - 1]);
  for (const auto& s : p.segments)
    if (s.parent >= 0) EXPECT_LT(s.radius, p.segments[s.parent].radius);
}

TEST(Phantom, NoiseFreeIntensities) {
  PhantomSpec s = spec_with(2, 4);
  s.noise_sigma = 0;
  const PhantomSample p = generate_tree(s);
  const ScalarVolume dist = distance_transform(p.gt_mask);
  int interior = 0;
  for (std::size_t i = 0; i < p.image.size(); ++i) {
    if (dist[i] >= 2.0f) {
      EXPECT_EQ(p.image[i], static_cast<float>(s.foreground_intensity));
      ++interior;
    }
    if (!p.bounding_mask[i]) EXPECT_EQ(p.image[i], static_cast<float>(s.background_intensity));
  }
  EXPECT_GT(interior, 0);
}

TEST(Phantom, NoiseStandardDeviation) {
  PhantomSpec noisy = spec_with(3, 9);
  noisy.noise_sigma = 0.05;
  PhantomSpec clean = noisy;
  clean.noise_sigma = 0;
  const PhantomSample p = generate_tree(noisy);
  const ScalarVolume ref = render_image(p, clean);
  double sum = 0, sum2 = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    if (p.image[i] <= 0.0f || p.image[i] >= 1.0f) continue;
    const double r = static_cast<double>(p.image[i]) - ref[i];
    sum += r;
    sum2 += r * r;
    ++n;
  }
  ASSERT_GE(n, 100000u);
  const double mean = sum / n;
  const double sd = std::sqrt(sum2 / n - mean * mean);
  EXPECT_NEAR(sd, 0.05, 0.005);
}

TEST(Phantom, SkeletonRecoversTree) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const PhantomSample p = generate_tree(spec_with(3, seed));
    const CenterlineGraph g = extract_centerline_graph(p.gt_mask, p.segments[0].a.rounded());
    EXPECT_EQ(g.branches.size(), 15u) << "seed " << seed;
    EXPECT_EQ(g.bifurcation_count(), 7u) << "seed " << seed;
    EXPECT_EQ(terminal_branches(g).size(), 8u) << "seed " << seed;
  }
}

TEST(Phantom, SpecJsonIsStrict) {
  const PhantomSpec s = phantom_spec_from_json({{"depth", 2}, {"dims", {48, 48, 48}}});
  EXPECT_EQ(s.depth, 2);
  EXPECT_EQ(s.dims, (Dims{48, 48, 48}));
  EXPECT_THROW(phantom_spec_from_json({{"detph", 2}}), UsageError);
  EXPECT_THROW(phantom_spec_from_json({{"radius_decay", 1.5}}), UsageError);
  EXPECT_THROW(phantom_spec_from_json({{"depth", "three"}}), UsageError);
  const PhantomSpec back = phantom_spec_from_json(to_json(s));
  EXPECT_EQ(to_json(back), to_json(s));
}

TEST(Phantom, ImpossibleFitFails) {
  PhantomSpec s = spec_with(3, 1);
  s.dims = {12, 12, 12};
  s.max_attempts = 5;
  EXPECT_THROW(generate_tree(s), DataError);
}
