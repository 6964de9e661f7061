#include <gtest/gtest.h>

#include <fstream>

#include "test_helpers.hpp"
#include "treelab/mhd.hpp"
#include "treelab/volume.hpp"

using namespace treelab;
using namespace treelab::testing;

TEST(Volume, RejectsBadGeometry) {
  EXPECT_THROW(BinaryMask(Dims{0, 2, 2}), DataError);
  EXPECT_THROW(ScalarVolume(Dims{2, 2, 2}, Spacing{1, 0, 1}), DataError);
  EXPECT_THROW(ScalarVolume(Dims{2, 2, 2}, Spacing{}, std::vector<float>(7, 0.f)), DataError);
  EXPECT_THROW(ScalarVolume(Dims{1, 1, 1}, Spacing{}, std::vector<float>{NAN}), DataError);
}

TEST(Threshold, BoundaryIsForeground) {
  ScalarVolume y(Dims{3, 1, 1}, Spacing{}, std::vector<float>{0.49f, 0.50f, 0.51f});
  const BinaryMask m = threshold(y, 0.5);
  EXPECT_EQ(m[0], 0);
  EXPECT_EQ(m[1], 1);
  EXPECT_EQ(m[2], 1);
}

TEST(Threshold, MonotoneInT) {
  Rng rng(3);
  ScalarVolume y(Dims{8, 8, 8});
  for (auto& v : y.data()) v = static_cast<float>(rng.uniform());
  for (double t1 = 0.0; t1 <= 1.0; t1 += 0.1)
    for (double t2 = t1; t2 <= 1.0; t2 += 0.1)
      EXPECT_TRUE(is_subset(threshold(y, t2), threshold(y, t1)));
}

TEST(Dilate, CubeKernelAndClipping) {
  BinaryMask interior(Dims{5, 5, 5});
  interior(2, 2, 2) = 1;
  EXPECT_EQ(count(dilate_cube3(interior)), 27u);

  BinaryMask corner(Dims{5, 5, 5});
  corner(0, 0, 0) = 1;
  EXPECT_EQ(count(dilate_cube3(corner)), 8u);

  EXPECT_EQ(count(dilate_cube3(BinaryMask(Dims{4, 4, 4}))), 0u);
}

TEST(Dilate, ContainsInputAndMatchesBruteForce) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const BinaryMask m = random_mask(Dims{7, 6, 5}, 0.05, rng);
    const BinaryMask d = dilate_cube3(m);
    EXPECT_TRUE(is_subset(m, d));
    for (int z = 0; z < 5; ++z)
      for (int y = 0; y < 6; ++y)
        for (int x = 0; x < 7; ++x) {
          bool any = false;
          for (const Voxel& o : neighbor_offsets(Connectivity::twenty_six))
            any = any || m.at_or(Voxel{x, y, z} + o, 0);
          any = any || m(x, y, z);
          ASSERT_EQ(d(x, y, z) != 0, any);
        }
  }
}

TEST(ConnectedComponents, CornerTouch) {
  BinaryMask m(Dims{3, 3, 3});
  m(0, 0, 0) = 1;
  m(1, 1, 1) = 1;
  EXPECT_EQ(connected_components(m, Connectivity::twenty_six).count, 1);
  EXPECT_EQ(connected_components(m, Connectivity::six).count, 2);
  EXPECT_EQ(connected_components(BinaryMask(Dims{3, 3, 3}), Connectivity::six).count, 0);
}

TEST(ConnectedComponents, PartitionProperties) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const BinaryMask m = random_mask(Dims{9, 8, 7}, 0.3, rng);
    const Components c6 = connected_components(m, Connectivity::six);
    const Components c26 = connected_components(m, Connectivity::twenty_six);
    EXPECT_LE(c26.count, c6.count);
    for (std::size_t i = 0; i < m.size(); ++i) {
      ASSERT_EQ(c26.labels[i] == 0, m[i] == 0);
      ASSERT_LE(c26.labels[i], c26.count);
    }
    // Adjacent foreground voxels share a label.
    const Dims d = m.dims();
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (!m[i]) continue;
      for (const Voxel& o : neighbor_offsets(Connectivity::twenty_six)) {
        const Voxel n = d.voxel(i) + o;
        if (d.contains(n) && m(n)) ASSERT_EQ(c26.labels[i], c26.labels(n));
      }
    }
  }
}

namespace {

// All-pairs brute force including a virtual background layer around the volume.
ScalarVolume brute_force_edt(const BinaryMask& m) {
  const Dims d = m.dims();
  ScalarVolume out(d);
  std::vector<Voxel> background;
  for (int z = -1; z <= d.nz; ++z)
    for (int y = -1; y <= d.ny; ++y)
      for (int x = -1; x <= d.nx; ++x)
        if (!d.contains(x, y, z) || !m(x, y, z)) background.push_back({x, y, z});
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        if (!m(x, y, z)) continue;
        std::int64_t best = INT64_MAX;
        for (const Voxel& b : background) best = std::min(best, squared_distance({x, y, z}, b));
        out(x, y, z) = static_cast<float>(std::sqrt(static_cast<double>(best)));
      }
  return out;
}

}  // namespace

TEST(DistanceTransform, Examples) {
  EXPECT_FLOAT_EQ(distance_transform(BinaryMask(Dims{3, 3, 3}, Spacing{}, 1))(1, 1, 1), 2.0f);
  BinaryMask single(Dims{4, 4, 4});
  single(2, 1, 3) = 1;
  EXPECT_FLOAT_EQ(distance_transform(single)(2, 1, 3), 1.0f);
  const ScalarVolume zero = distance_transform(BinaryMask(Dims{4, 4, 4}));
  for (const float v : zero.data()) EXPECT_EQ(v, 0.0f);
}

TEST(DistanceTransform, MatchesBruteForceExactly) {
  Rng rng(17);
  const std::vector<Dims> shapes = {{16, 16, 16}, {5, 9, 3}, {1, 1, 12}, {12, 7, 1}};
  for (const Dims& d : shapes)
    for (double density : {0.2, 0.7, 0.97}) {
      const BinaryMask m = random_mask(d, density, rng);
      const ScalarVolume fast = distance_transform(m);
      const ScalarVolume slow = brute_force_edt(m);
      for (std::size_t i = 0; i < m.size(); ++i) ASSERT_EQ(fast[i], slow[i]) << "voxel " << i;
    }
}

TEST(Mhd, RoundTripBothElementTypes) {
  TempDir tmp("mhd_roundtrip");
  Rng rng(8);
  ScalarVolume f(Dims{5, 4, 3}, Spacing{0.5, 0.5, 1.0});
  for (auto& v : f.data()) v = static_cast<float>(rng.normal());
  write_mhd(f, tmp.path() / "f.mhd", ElementType::float32);
  EXPECT_EQ(read_mhd(tmp.path() / "f.mhd"), f);

  ScalarVolume u(Dims{3, 3, 2}, Spacing{0.7, 1.3, 2.25});
  for (std::size_t i = 0; i < u.size(); ++i) u[i] = static_cast<float>(i * 13 % 256);
  write_mhd(u, tmp.path() / "u.mhd", ElementType::uint8);
  EXPECT_EQ(read_mhd(tmp.path() / "u.mhd"), u);

  const BinaryMask m = random_mask(Dims{6, 6, 6}, 0.4, rng);
  write_mhd(m, tmp.path() / "m.mhd");
  EXPECT_EQ(read_mask(tmp.path() / "m.mhd"), m);
}

TEST(Mhd, HeaderTextAndRawBytes) {
  TempDir tmp("mhd_header");
  write_mhd(BinaryMask(Dims{2, 2, 2}, Spacing{0.5, 0.5, 1.0}), tmp.path() / "z.mhd");
  EXPECT_EQ(std::filesystem::file_size(tmp.path() / "z.raw"), 8u);
  std::ifstream raw(tmp.path() / "z.raw", std::ios::binary);
  for (int i = 0; i < 8; ++i) EXPECT_EQ(raw.get(), 0);
  std::ifstream hdr(tmp.path() / "z.mhd");
  const std::string text((std::istreambuf_iterator<char>(hdr)), {});
  EXPECT_NE(text.find("ElementSpacing = 0.5 0.5 1\n"), std::string::npos);
  EXPECT_NE(text.find("ElementType = MET_UCHAR\n"), std::string::npos);
  EXPECT_NE(text.find("ElementDataFile = z.raw\n"), std::string::npos);

  ScalarVolume quarter(Dims{3, 2, 2}, Spacing{}, 0.25f);
  write_mhd(quarter, tmp.path() / "q.mhd", ElementType::float32);
  EXPECT_EQ(read_mhd(tmp.path() / "q.mhd"), quarter);
}

TEST(Mhd, ReadsHandWrittenHeader) {
  TempDir tmp("mhd_hand");
  {
    std::ofstream h(tmp.path() / "a.mhd");
    h << "ObjectType = Image\nNDims = 3\nDimSize = 4 4 4\nElementSpacing = 1 1 1\n"
         "Comment = ignored\nElementType = MET_UCHAR\nElementDataFile = a.raw\n";
    std::ofstream r(tmp.path() / "a.raw", std::ios::binary);
    for (int i = 0; i < 64; ++i) r.put(static_cast<char>(i % 2));
  }
  const ScalarVolume v = read_mhd(tmp.path() / "a.mhd");
  EXPECT_EQ(v.dims(), (Dims{4, 4, 4}));
  EXPECT_EQ(v[1], 1.0f);
}

TEST(Mhd, Errors) {
  TempDir tmp("mhd_errors");
  EXPECT_THROW(read_mhd(tmp.path() / "missing.mhd"), DataError);
  {
    std::ofstream h(tmp.path() / "short.mhd");
    h << "ObjectType = Image\nNDims = 3\nDimSize = 4 4 4\nElementType = MET_UCHAR\n"
         "ElementDataFile = short.raw\n";
    std::ofstream r(tmp.path() / "short.raw", std::ios::binary);
    for (int i = 0; i < 63; ++i) r.put(0);
  }
  try {
    read_mhd(tmp.path() / "short.mhd");
    FAIL() << "expected size mismatch";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("size mismatch"), std::string::npos);
  }
  {
    std::ofstream h(tmp.path() / "short.mhd");
    h << "NDims = 3\nDimSize = 4 4 4\nElementType = MET_SHORT\nElementDataFile = short.raw\n";
  }
  EXPECT_THROW(read_mhd(tmp.path() / "short.mhd"), DataError);
  {
    std::ofstream h(tmp.path() / "short.mhd");
    h << "NDims = 3\nDimSize = 4 4 4\nElementType = MET_UCHAR\nCompressedData = True\n"
         "ElementDataFile = short.raw\n";
  }
  EXPECT_THROW(read_mhd(tmp.path() / "short.mhd"), DataError);

  ScalarVolume big(Dims{1, 1, 1}, Spacing{}, 300.0f);
  EXPECT_THROW(write_mhd(big, tmp.path() / "big.mhd", ElementType::uint8), DataError);
  EXPECT_THROW(write_mhd(big, "/nonexistent_dir/x.mhd", ElementType::float32), DataError);
}
