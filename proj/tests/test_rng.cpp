#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "treelab/rng.hpp"

using namespace treelab;

TEST(Philox, KnownAnswerVectors) {
  // Reference outputs of Philox4x32-10 from the Random123 distribution.
  EXPECT_EQ(philox4x32_10({0, 0, 0, 0}, {0, 0}),
            (PhiloxBlock{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u}));
  EXPECT_EQ(philox4x32_10({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu},
                          {0xffffffffu, 0xffffffffu}),
            (PhiloxBlock{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu}));
  EXPECT_EQ(philox4x32_10({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u},
                          {0xa4093822u, 0x299f31d0u}),
            (PhiloxBlock{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u}));
}

TEST(Rng, SameSeedSameSequence) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, SplitDependsOnlyOnSeedAndId) {
  Rng a(7);
  const Rng child_before = a.split(3);
  for (int i = 0; i < 10; ++i) a.next_u32();
  Rng child_after = a.split(3);
  Rng c1 = child_before;
  EXPECT_EQ(c1.next_u64(), child_after.next_u64());
  Rng other = a.split(4);
  Rng same = a.split(3);
  EXPECT_NE(other.next_u64(), same.next_u64());
}

TEST(Rng, UniformRanges) {
  Rng r(1);
  std::set<std::int64_t> seen;
  for (int i = 0; i < 20000; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    const auto k = r.uniform_int(-2, 3);
    ASSERT_GE(k, -2);
    ASSERT_LE(k, 3);
    seen.insert(k);
  }
  EXPECT_EQ(seen.size(), 6u);
  EXPECT_EQ(r.uniform_int(5, 5), 5);
}

TEST(Rng, NormalMoments) {
  Rng r(99);
  const int n = 200000;
  double s = 0, s2 = 0;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    s += x;
    s2 += x * x;
  }
  const double mean = s / n;
  const double var = s2 / n - mean * mean;
  EXPECT_NEAR(mean, 0.0, 0.01);
  EXPECT_NEAR(var, 1.0, 0.02);
}
