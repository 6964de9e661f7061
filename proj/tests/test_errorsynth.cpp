#include <gtest/gtest.h>

#include <array>
#include <cmath>

#include "treelab/errorsynth.hpp"
#include "treelab/graph_io.hpp"
#include "treelab/metrics.hpp"
#include "treelab/phantom.hpp"

using namespace treelab;

namespace {

const PhantomSample& phantom(int depth) {
  static std::array<PhantomSample, 5> cache;
  static std::array<bool, 5> ready{};
  if (!ready[depth]) {
    PhantomSpec s;
    s.depth = depth;
    s.seed = 100 + depth;
    s.noise_sigma = 0;
    cache[depth] = generate_tree(s);
    ready[depth] = true;
  }
  return cache[depth];
}

// Record completeness: the removal masks tile (original - corrupted).
void expect_record_exact(const BinaryMask& original, const Corruption& c) {
  EXPECT_TRUE(is_subset(c.label, original));
  const BinaryMask diff = mask_minus(original, c.label);
  EXPECT_TRUE(c.record.removal_union() == diff);
  EXPECT_EQ(c.record.removed_voxels_total, count(diff));
}

std::size_t eligible_discontinuity(const CenterlineGraph& g) {
  std::size_t n = 0;
  for (const auto& b : g.branches) n += b.generation >= 3;
  return n;
}

}  // namespace

TEST(SampleErrorRate, RangeAndFixture) {
  Rng zero(1);
  EXPECT_EQ(sample_error_rate(0.0, zero), 0.0);
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng rng(seed);
    const double r = sample_error_rate(0.3, rng);
    EXPECT_GE(r, 0.0);
    EXPECT_LE(r, 0.3);
  }
  Rng rng42(42);
  EXPECT_DOUBLE_EQ(sample_error_rate(1.0, rng42), 0.6129598811894158);
  EXPECT_THROW(sample_error_rate(1.5, rng42), UsageError);
}

TEST(SelectWeighted, Trivial) {
  std::vector<std::pair<int, double>> c;
  for (int i = 0; i < 10; ++i) c.emplace_back(i, 1.0 + i);
  Rng rng(3);
  EXPECT_TRUE(select_branches_weighted(c, 0.0, rng).empty());
  std::vector<int> all = select_branches_weighted(c, 1.0, rng);
  std::sort(all.begin(), all.end());
  EXPECT_EQ(all, (std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9}));
  EXPECT_EQ(select_branches_weighted(c, 0.34, rng).size(), 3u);
  EXPECT_EQ(select_branches_weighted(c, 0.25, rng).size(), 3u);  // round(2.5) = 3
}

TEST(SelectWeighted, FirstDrawLaw) {
  const std::vector<std::pair<int, double>> c = {{0, 1.0}, {1, 2.0}, {2, 3.0}};
  std::array<int, 3> hits{};
  Rng rng(99);
  const int trials = 10000;
  for (int t = 0; t < trials; ++t) ++hits[select_branches_weighted(c, 1.0 / 3.0, rng).at(0)];
  EXPECT_NEAR(hits[0] / double(trials), 1.0 / 6.0, 0.03);
  EXPECT_NEAR(hits[1] / double(trials), 1.0 / 3.0, 0.03);
  EXPECT_NEAR(hits[2] / double(trials), 1.0 / 2.0, 0.03);
}

TEST(SelectWeighted, ZeroWeights) {
  Rng rng(4);
  EXPECT_THROW(select_branches_weighted({{0, 0.0}, {1, 0.0}}, 0.5, rng), UsageError);
  EXPECT_THROW(select_branches_weighted({{0, -1.0}, {1, 2.0}}, 0.5, rng), UsageError);
  EXPECT_TRUE(select_branches_weighted({{0, 0.0}}, 0.0, rng).empty());
  // Positive weights are exhausted first, then the rest follow uniformly.
  for (int t = 0; t < 20; ++t) {
    const auto ids = select_branches_weighted({{0, 0.0}, {1, 0.0}, {2, 5.0}}, 1.0, rng);
    ASSERT_EQ(ids.size(), 3u);
    EXPECT_EQ(ids[0], 2);
  }
}

TEST(CylinderMask, Examples) {
  const Dims d{12, 9, 9};
  std::vector<Voxel> line;
  for (int x = 2; x < 10; ++x) line.push_back({x, 4, 4});
  const BinaryMask thin = cylinder_mask(line, 1.0, d);
  EXPECT_EQ(count(thin), line.size());
  for (const Voxel& v : line) EXPECT_TRUE(thin(v));

  // Brute-force ball: lattice points within 1.5 of the center.
  const BinaryMask ball = cylinder_mask({{5, 4, 4}}, 3.0, d);
  int expected = 0;
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        const bool in = (x - 5) * (x - 5) + (y - 4) * (y - 4) + (z - 4) * (z - 4) <= 2.25;
        expected += in;
        EXPECT_EQ(ball(x, y, z) != 0, in);
      }
  EXPECT_EQ(expected, 19);
  EXPECT_EQ(count(ball), 19u);

  const BinaryMask corner = cylinder_mask({{0, 0, 0}}, 3.0, d);
  EXPECT_EQ(count(corner), 7u);  // the octant of the 19-voxel ball
  EXPECT_THROW(cylinder_mask({}, 3.0, d), UsageError);
  EXPECT_THROW(cylinder_mask({{0, 0, 0}}, 0.0, d), UsageError);
}

TEST(TerminalErrors, RateZeroIsIdentity) {
  const auto& p = phantom(3);
  Rng rng(1);
  const Corruption c = inject_airway_terminal_errors(p.gt_mask, p.graph, 0.0, {}, rng);
  EXPECT_TRUE(c.label == p.gt_mask);
  EXPECT_TRUE(c.record.removals.empty());
  EXPECT_TRUE(c.record.affected.at("terminal").empty());
}

TEST(TerminalErrors, YShapeBothTerminalsCut) {
  const auto& p = phantom(1);
  ASSERT_EQ(terminal_branches(p.graph).size(), 2u);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const Corruption c = inject_airway_terminal_errors(p.gt_mask, p.graph, 1.0, {}, rng);
    ASSERT_EQ(c.record.removals.size(), 2u);
    for (const auto& r : c.record.removals) {
      const Branch& b = p.graph.branch(r.branch_id);
      EXPECT_TRUE(b.is_terminal);
      EXPECT_GT(r.removed_voxels, 0u);
      EXPECT_GE(r.start_index, 0);
      EXPECT_LE(r.start_index, (static_cast<int>(b.length_vox()) - 1) / 2);
    }
    expect_record_exact(p.gt_mask, c);
    // The distal end voxel is always removed.
    for (const auto& r : c.record.removals)
      EXPECT_FALSE(c.label(p.graph.nodes[p.graph.branch(r.branch_id).node_to].xyz));
  }
}

TEST(TerminalErrors, SingleBranchIsEligible) {
  const auto& p = phantom(0);
  Rng rng(2);
  const Corruption c = inject_airway_terminal_errors(p.gt_mask, p.graph, 1.0, {}, rng);
  EXPECT_EQ(c.record.affected.at("terminal"), std::vector<int>{0});
  EXPECT_LT(count(c.label), count(p.gt_mask));
}

TEST(TerminalErrors, GraphLabelMismatch) {
  const auto& p = phantom(1);
  BinaryMask shifted(p.gt_mask.dims());
  Rng rng(1);
  EXPECT_THROW(inject_airway_terminal_errors(shifted, p.graph, 0.5, {}, rng), DataError);
  EXPECT_THROW(inject_airway_terminal_errors(BinaryMask(Dims{8, 8, 8}), p.graph, 0.5, {}, rng),
               DataError);
}

TEST(Discontinuities, RateZeroIsIdentity) {
  const auto& p = phantom(3);
  Rng rng(1);
  const Corruption c = inject_airway_discontinuities(p.gt_mask, p.graph, 0.0, {}, rng);
  EXPECT_TRUE(c.label == p.gt_mask);
  EXPECT_TRUE(c.record.warnings.empty());
}

TEST(Discontinuities, NothingEligibleBelowGenerationThree) {
  const auto& p = phantom(2);
  Rng rng(1);
  const Corruption c = inject_airway_discontinuities(p.gt_mask, p.graph, 0.8, {}, rng);
  EXPECT_TRUE(c.label == p.gt_mask);
  EXPECT_TRUE(c.record.affected.at("discontinuity").empty());
  ASSERT_EQ(c.record.warnings.size(), 1u);
}

TEST(Discontinuities, DepthFourHalfRate) {
  const auto& p = phantom(4);
  const std::size_t n_c = eligible_discontinuity(p.graph);
  ASSERT_EQ(n_c, 24u);
  Rng rng(7);
  const Corruption c = inject_airway_discontinuities(p.gt_mask, p.graph, 0.5, {}, rng);
  const auto& ids = c.record.affected.at("discontinuity");
  EXPECT_EQ(ids.size(), 12u);
  for (const int id : ids) EXPECT_GE(p.graph.branch(id).generation, 3);
  for (const auto& r : c.record.removals) {
    const int len = static_cast<int>(p.graph.branch(r.branch_id).length_vox());
    EXPECT_GE(r.gap_sampled_length, std::min(10, len));
    EXPECT_LE(r.gap_sampled_length, len);
    EXPECT_GE(r.gap_center, 0);
    EXPECT_LT(r.gap_center, len);
    EXPECT_GE(r.gap_length, 1);
  }
  expect_record_exact(p.gt_mask, c);
  EXPECT_GT(gaps(c.label, p.gt_centerline), 0);
}

TEST(VesselGaps, RateZeroIsDilation) {
  const auto& p = phantom(3);
  Rng rng(1);
  const Corruption c = inject_vessel_gaps(p.gt_centerline, p.graph, {}, 0.0, rng);
  EXPECT_TRUE(c.label == dilate_cube3(p.gt_centerline));
}

TEST(VesselGaps, GroupsAndTables) {
  const auto& p = phantom(4);
  const auto groups = vessel_length_groups(p.graph);
  std::array<int, 3> sizes{};
  for (const auto& [id, g] : groups) ++sizes[g];
  EXPECT_EQ(sizes[0] + sizes[1] + sizes[2], 31);
  EXPECT_LE(std::abs(sizes[0] - sizes[2]), 1);
  for (const auto& a : p.graph.branches)
    for (const auto& b : p.graph.branches)
      if (a.length_vox() < b.length_vox()) EXPECT_LE(groups.at(a.id), groups.at(b.id));

  const VesselErrorParams params;
  const BinaryMask original = dilate_cube3(p.gt_centerline);
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    Rng rng(seed);
    const Corruption c = inject_vessel_gaps(p.gt_centerline, p.graph, params, 1.0, rng);
    EXPECT_EQ(c.record.affected.at("vessel").size(), 31u);
    for (const auto& r : c.record.removals) {
      const GapTable& t = params.table(r.group);
      EXPECT_EQ(r.group, groups.at(r.branch_id));
      EXPECT_LE(static_cast<int>(r.gaps.size()), t.max_gaps);
      const int len = static_cast<int>(p.graph.branch(r.branch_id).length_vox());
      for (const Gap& g : r.gaps) {
        EXPECT_GE(g.sampled_length, t.min_len);
        EXPECT_LE(g.sampled_length, t.max_len);
        EXPECT_LE(g.length, std::min(g.sampled_length, len));
        EXPECT_GE(g.center, 0);
        EXPECT_LT(g.center, len);
      }
    }
    expect_record_exact(original, c);
  }
}

TEST(VesselGaps, ShortBranchClampsGapLength) {
  // One 5-voxel branch: it forms the short group alone and every gap from
  // the 6-15 range is clamped to the whole branch.
  BinaryMask cl(Dims{9, 5, 5});
  for (int x = 2; x < 7; ++x) cl(x, 2, 2) = 1;
  CenterlineGraph g = assign_generations(build_graph(cl, {2, 2, 2}));
  ASSERT_EQ(g.branches.size(), 1u);
  const int len = static_cast<int>(g.branches[0].length_vox());
  ASSERT_LT(len, 6);
  int seen = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const Corruption c = inject_vessel_gaps(cl, g, {}, 1.0, rng);
    for (const auto& r : c.record.removals) {
      EXPECT_EQ(r.group, 0);
      for (const Gap& gap : r.gaps) {
        EXPECT_GE(gap.sampled_length, 6);
        EXPECT_LE(gap.length, len);
        EXPECT_GE(gap.length, (len + 1) / 2);  // centered span clipped to the path
        ++seen;
      }
    }
  }
  EXPECT_GT(seen, 0);
}

TEST(Corrupt, ZeroBoundsIsIdentity) {
  const auto& p = phantom(4);
  Rng rng(5);
  const Corruption a = corrupt(p.gt_mask, p.graph, AirwayErrorParams{}, rng);
  EXPECT_TRUE(a.label == p.gt_mask);
  const Corruption v = corrupt(p.gt_centerline, p.graph, VesselErrorParams{}, rng);
  EXPECT_TRUE(v.label == dilate_cube3(p.gt_centerline));
}

TEST(Corrupt, AirwayInvariantsOverSeeds) {
  const auto& p = phantom(4);
  AirwayErrorParams params;
  params.max_rate_terminal = 0.6;
  params.max_rate_discontinuity = 0.6;
  const std::size_t n_term = terminal_branches(p.graph).size();
  const std::size_t n_c = eligible_discontinuity(p.graph);
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    const Corruption c = corrupt(p.gt_mask, p.graph, params, rng);
    expect_record_exact(p.gt_mask, c);
    const auto& rates = c.record.sampled_rates;
    EXPECT_EQ(c.record.affected.at("terminal").size(),
              static_cast<std::size_t>(std::llround(rates.at("terminal") * n_term)));
    EXPECT_EQ(c.record.affected.at("discontinuity").size(),
              static_cast<std::size_t>(std::llround(rates.at("discontinuity") * n_c)));
    for (const auto& r : c.record.removals)
      if (r.type == ErrorType::terminal)
        EXPECT_LE(r.start_index, (static_cast<int>(p.graph.branch(r.branch_id).length_vox()) - 1) / 2);
  }
}

TEST(Corrupt, DeterministicAndSerializable) {
  const auto& p = phantom(3);
  AirwayErrorParams params;
  params.max_rate_terminal = 0.8;
  params.max_rate_discontinuity = 0.8;
  Rng r1(31), r2(31);
  const Corruption a = corrupt(p.gt_mask, p.graph, params, r1);
  const Corruption b = corrupt(p.gt_mask, p.graph, params, r2);
  EXPECT_TRUE(a.label == b.label);
  EXPECT_EQ(to_json(a.record), to_json(b.record));
  EXPECT_EQ(a.record.seed, 31u);
  const CorruptionRecord back = record_from_json(nlohmann::json::parse(to_json(a.record).dump()));
  EXPECT_EQ(to_json(back), to_json(a.record));
  EXPECT_TRUE(back.removal_union() == mask_minus(p.gt_mask, a.label));
}

TEST(Corrupt, MeanRemovalGrowsWithUpperBound) {
  const auto& p = phantom(4);
  double previous = -1;
  for (const double bound : {0.0, 0.25, 0.5, 1.0}) {
    AirwayErrorParams params;
    params.max_rate_terminal = bound;
    params.max_rate_discontinuity = bound;
    double total = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      Rng rng(seed);
      total += corrupt(p.gt_mask, p.graph, params, rng).record.removed_voxels_total;
    }
    const double mean = total / 100;
    EXPECT_GE(mean, previous) << "bound " << bound;
    previous = mean;
  }
  EXPECT_GT(previous, 0);
}

TEST(Params, Validation) {
  AirwayErrorParams a;
  a.max_rate_terminal = 1.2;
  EXPECT_THROW(a.validate(), UsageError);
  a = {};
  a.min_gap_len_vox = 0;
  EXPECT_THROW(a.validate(), UsageError);
  a = {};
  a.mask_width_factor = 0;
  EXPECT_THROW(a.validate(), UsageError);
  VesselErrorParams v;
  v.medium_group = {4, 20, 10};
  EXPECT_THROW(v.validate(), UsageError);
}

TEST(GraphIo, RoundTrip) {
  const auto& p = phantom(3);
  const nlohmann::json j = to_json(p.graph);
  const CenterlineGraph g = graph_from_json(nlohmann::json::parse(j.dump()));
  EXPECT_EQ(to_json(g), j);
  nlohmann::json bad = j;
  bad["branches"][0]["node_to"] = 999;
  EXPECT_THROW(graph_from_json(bad), DataError);
  EXPECT_THROW(graph_from_json(nlohmann::json{{"dims", {1, 2}}}), DataError);
}
