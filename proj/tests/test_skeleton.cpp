#include <gtest/gtest.h>

#include "test_helpers.hpp"
#include "treelab/skeleton.hpp"

using namespace treelab;
using namespace treelab::testing;

namespace {

int endpoints_of(const BinaryMask& s) {
  int n = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (s[i] && count_neighbors26(s, s.dims().voxel(i)) == 1) ++n;
  return n;
}

// Y shape: stem from (10,10,2) up to (10,10,10), two arms diverging in x.
BinaryMask y_shape() {
  BinaryMask m(Dims{21, 21, 21});
  draw_line(m, {10, 10, 2}, {10, 10, 10});
  draw_line(m, {10, 10, 10}, {4, 10, 16});
  draw_line(m, {10, 10, 10}, {16, 10, 16});
  return m;
}

// Planar binary tree of the given depth drawn with diagonal lines.
BinaryMask planar_tree(int depth) {
  BinaryMask m(Dims{70, 5, 40});
  struct Seg { Voxel from; int spread; int level; };
  std::vector<Seg> stack = {{{34, 2, 1}, 16, 0}};
  draw_line(m, {34, 2, 1}, {34, 2, 6});
  stack[0].from = {34, 2, 6};
  while (!stack.empty()) {
    const Seg s = stack.back();
    stack.pop_back();
    if (s.level >= depth) continue;
    for (int sign : {-1, 1}) {
      const Voxel to{s.from.x + sign * s.spread, 2, s.from.z + s.spread};
      draw_line(m, s.from, to);
      stack.push_back({to, s.spread / 2, s.level + 1});
    }
  }
  return m;
}

}  // namespace

TEST(SimplePoint, BasicConfigurations) {
  // Isolated voxel and interior voxel are not simple.
  EXPECT_FALSE(is_simple_point(0));
  EXPECT_FALSE(is_simple_point((1u << 27) - 1 - (1u << 13)));
  // Single neighbor (line end) is simple; middle of a line is not.
  EXPECT_TRUE(is_simple_point(1u << 4));
  EXPECT_FALSE(is_simple_point((1u << 4) | (1u << 22)));
}

TEST(Skeletonize, ThinLineIsFixedPoint) {
  BinaryMask m(Dims{12, 5, 5});
  draw_line(m, {1, 2, 2}, {10, 2, 2});
  EXPECT_EQ(skeletonize(m), m);
  EXPECT_EQ(count(skeletonize(BinaryMask(Dims{4, 4, 4}))), 0u);
}

TEST(Skeletonize, CylinderBecomesSinglePath) {
  const BinaryMask cyl = z_cylinder(Dims{15, 15, 26}, 3.0, 3, 23);
  const BinaryMask s = skeletonize(cyl);
  EXPECT_TRUE(is_subset(s, cyl));
  EXPECT_EQ(count_components(s, Connectivity::twenty_six), 1);
  EXPECT_EQ(endpoints_of(s), 2);
  for (std::size_t i = 0; i < s.size(); ++i)
    if (s[i]) EXPECT_LE(count_neighbors26(s, s.dims().voxel(i)), 2);
}

TEST(Skeletonize, PreservesComponentsAndIsThin) {
  Rng rng(23);
  for (int trial = 0; trial < 25; ++trial) {
    const BinaryMask m = random_blobs(Dims{16, 16, 16}, 6, rng);
    const BinaryMask s = skeletonize(m);
    ASSERT_TRUE(is_subset(s, m));
    ASSERT_EQ(count_components(s, Connectivity::twenty_six),
              count_components(m, Connectivity::twenty_six));
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (!s[i]) continue;
      const auto bits = detail::neighborhood_bits(s, s.dims().voxel(i));
      ASSERT_TRUE(std::popcount(bits) <= 1 || !is_simple_point(bits));
    }
  }
}

TEST(BuildGraph, StraightLine) {
  BinaryMask m(Dims{12, 3, 3});
  draw_line(m, {1, 1, 1}, {10, 1, 1});
  const CenterlineGraph g = assign_generations(build_graph(m, {0, 1, 1}));
  EXPECT_EQ(g.nodes.size(), 2u);
  EXPECT_EQ(g.bifurcation_count(), 0u);
  ASSERT_EQ(g.branches.size(), 1u);
  EXPECT_EQ(g.branches[0].length_vox(), 8u);
  EXPECT_EQ(g.nodes[g.root].xyz, (Voxel{1, 1, 1}));
  EXPECT_EQ(g.branches[0].path.front(), (Voxel{2, 1, 1}));
  EXPECT_EQ(g.branches[0].generation, 0);
  EXPECT_EQ(terminal_branches(g), std::vector<int>{0});
}

TEST(BuildGraph, YShape) {
  const BinaryMask m = y_shape();
  const CenterlineGraph g = assign_generations(build_graph(m, {10, 10, 0}));
  EXPECT_EQ(g.bifurcation_count(), 1u);
  EXPECT_EQ(g.endpoint_count(), 3u);
  ASSERT_EQ(g.branches.size(), 3u);
  EXPECT_EQ(g.branches.size() + 0, 3u);
  EXPECT_EQ(terminal_branches(g).size(), 2u);
  int gen0 = 0, gen1 = 0;
  for (const auto& b : g.branches) (b.generation == 0 ? gen0 : gen1)++;
  EXPECT_EQ(gen0, 1);
  EXPECT_EQ(gen1, 2);
  std::size_t total = g.node_voxel_count();
  for (const auto& b : g.branches) total += b.length_vox();
  EXPECT_EQ(total, count(m));
  // Paths are 26-connected and start adjacent to their proximal node.
  for (const auto& b : g.branches) {
    for (std::size_t i = 1; i < b.path.size(); ++i) EXPECT_TRUE(adjacent26(b.path[i - 1], b.path[i]));
  }
}

TEST(BuildGraph, TwoDisjointLinesRootInHintComponent) {
  BinaryMask m(Dims{20, 10, 3});
  draw_line(m, {1, 1, 1}, {18, 1, 1});
  draw_line(m, {1, 8, 1}, {4, 8, 1});
  const CenterlineGraph g = build_graph(m, {10, 2, 1});
  EXPECT_EQ(g.branches.size(), 2u);
  EXPECT_EQ(count_components(graph_mask(g), Connectivity::twenty_six), 2);
  EXPECT_EQ(g.nodes[g.root].xyz.y, 1);
  EXPECT_THROW(build_graph(BinaryMask(Dims{3, 3, 3}), {0, 0, 0}), DataError);
}

TEST(Generations, PerfectBinaryTree) {
  const BinaryMask m = planar_tree(3);
  const CenterlineGraph g = assign_generations(build_graph(m, {34, 2, 0}));
  EXPECT_EQ(g.branches.size(), 15u);
  EXPECT_EQ(g.bifurcation_count(), 7u);
  EXPECT_EQ(terminal_branches(g).size(), 8u);
  std::map<int, int> per_gen;
  for (const auto& b : g.branches) ++per_gen[b.generation];
  EXPECT_EQ(per_gen, (std::map<int, int>{{0, 1}, {1, 2}, {2, 4}, {3, 8}}));
  // Generation increases by exactly one across each bifurcation.
  for (const auto& child : g.branches)
    for (const auto& parent : g.branches)
      if (parent.node_to == child.node_from) EXPECT_EQ(child.generation, parent.generation + 1);
}

TEST(Generations, CycleInRootComponentThrows) {
  BinaryMask m(Dims{12, 12, 3});
  draw_line(m, {2, 2, 1}, {9, 2, 1});
  draw_line(m, {9, 2, 1}, {9, 9, 1});
  draw_line(m, {9, 9, 1}, {2, 9, 1});
  draw_line(m, {2, 9, 1}, {2, 2, 1});
  draw_line(m, {2, 2, 1}, {0, 0, 1});  // tail so that a node exists
  EXPECT_THROW(assign_generations(build_graph(m, {0, 0, 1})), DataError);
}

TEST(Diameters, LineAndCylinder) {
  BinaryMask line(Dims{12, 5, 5});
  draw_line(line, {0, 2, 2}, {11, 2, 2});
  CenterlineGraph g = estimate_diameters(build_graph(line, {0, 2, 2}), line);
  EXPECT_DOUBLE_EQ(g.branches[0].mean_diameter_vox, 2.0);

  const BinaryMask cyl = z_cylinder(Dims{15, 15, 30}, 3.0, 0, 30);
  const CenterlineGraph gc = extract_centerline_graph(cyl, {7, 7, 0});
  ASSERT_FALSE(gc.branches.empty());
  for (const auto& b : gc.branches) {
    EXPECT_GT(b.mean_diameter_vox, 0.0);
  }
  // The longest branch runs along the axis.
  const auto longest = std::max_element(gc.branches.begin(), gc.branches.end(), [](auto& a, auto& b) {
    return a.length_vox() < b.length_vox();
  });
  EXPECT_NEAR(longest->mean_diameter_vox, 6.0, 1.0);

  BinaryMask other(Dims{12, 5, 5});
  EXPECT_THROW(estimate_diameters(g, other), DataError);
}
