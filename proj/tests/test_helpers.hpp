#pragma once

// Shared fixtures for the unit tests: random masks, lines and small trees.

#include <filesystem>
#include <string>
#include <vector>

#include "treelab/rng.hpp"
#include "treelab/volume.hpp"

namespace treelab::testing {

inline BinaryMask random_mask(Dims d, double density, Rng& rng) {
  BinaryMask m(d);
  for (auto& v : m.data()) v = rng.bernoulli(density) ? 1 : 0;
  return m;
}

/// Random union of solid boxes; gives blob-like shapes for topology tests.
inline BinaryMask random_blobs(Dims d, int n, Rng& rng) {
  BinaryMask m(d);
  for (int b = 0; b < n; ++b) {
    const int x0 = static_cast<int>(rng.uniform_int(0, d.nx - 1));
    const int y0 = static_cast<int>(rng.uniform_int(0, d.ny - 1));
    const int z0 = static_cast<int>(rng.uniform_int(0, d.nz - 1));
    const int sx = static_cast<int>(rng.uniform_int(1, 6));
    const int sy = static_cast<int>(rng.uniform_int(1, 6));
    const int sz = static_cast<int>(rng.uniform_int(1, 6));
    for (int z = z0; z < std::min(d.nz, z0 + sz); ++z)
      for (int y = y0; y < std::min(d.ny, y0 + sy); ++y)
        for (int x = x0; x < std::min(d.nx, x0 + sx); ++x) m(x, y, z) = 1;
  }
  return m;
}

inline void draw_line(BinaryMask& m, Voxel a, Voxel b) {
  Voxel v = a;
  m(v) = 1;
  while (v != b) {
    v.x += (b.x > v.x) - (b.x < v.x);
    v.y += (b.y > v.y) - (b.y < v.y);
    v.z += (b.z > v.z) - (b.z < v.z);
    m(v) = 1;
  }
}

/// Solid cylinder along z with the given radius, centered in the xy-plane.
inline BinaryMask z_cylinder(Dims d, double radius, int z0, int z1) {
  BinaryMask m(d);
  const double cx = (d.nx - 1) / 2.0, cy = (d.ny - 1) / 2.0;
  for (int z = z0; z < z1; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x)
        if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= radius * radius) m(x, y, z) = 1;
  return m;
}

class TempDir {
public:
  explicit TempDir(const std::string& name)
      : path_(std::filesystem::temp_directory_path() / ("treelab_" + name)) {
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  const std::filesystem::path& path() const { return path_; }

private:
  std::filesystem::path path_;
};

}  // namespace treelab::testing
