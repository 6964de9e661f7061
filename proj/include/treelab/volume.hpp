#pragma once

// 3D scalar grids, binary masks and the voxel morphology used throughout.
//
// Storage is x-fastest: index = (z * ny + y) * nx + x. Morphology and
// distances work in voxel units; spacing is carried as metadata only.

#include <algorithm>
#include <array>
#include <cmath>
#include <compare>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "treelab/error.hpp"

namespace treelab {

struct Voxel {
  int x = 0;
  int y = 0;
  int z = 0;

  friend constexpr bool operator==(const Voxel&, const Voxel&) = default;
  friend constexpr auto operator<=>(const Voxel&, const Voxel&) = default;
};

inline Voxel operator+(Voxel a, Voxel b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }

inline std::int64_t squared_distance(Voxel a, Voxel b) {
  const std::int64_t dx = a.x - b.x;
  const std::int64_t dy = a.y - b.y;
  const std::int64_t dz = a.z - b.z;
  return dx * dx + dy * dy + dz * dz;
}

inline bool adjacent26(Voxel a, Voxel b) {
  return a != b && std::abs(a.x - b.x) <= 1 && std::abs(a.y - b.y) <= 1 &&
         std::abs(a.z - b.z) <= 1;
}

struct Dims {
  int nx = 0;
  int ny = 0;
  int nz = 0;

  friend constexpr bool operator==(const Dims&, const Dims&) = default;

  std::size_t size() const {
    return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) *
           static_cast<std::size_t>(nz);
  }
  bool contains(int x, int y, int z) const {
    return x >= 0 && y >= 0 && z >= 0 && x < nx && y < ny && z < nz;
  }
  bool contains(Voxel v) const { return contains(v.x, v.y, v.z); }
  std::size_t index(int x, int y, int z) const {
    return (static_cast<std::size_t>(z) * static_cast<std::size_t>(ny) +
            static_cast<std::size_t>(y)) *
               static_cast<std::size_t>(nx) +
           static_cast<std::size_t>(x);
  }
  std::size_t index(Voxel v) const { return index(v.x, v.y, v.z); }
  Voxel voxel(std::size_t i) const {
    const auto sx = static_cast<std::size_t>(nx);
    const auto sy = static_cast<std::size_t>(ny);
    return {static_cast<int>(i % sx), static_cast<int>((i / sx) % sy),
            static_cast<int>(i / (sx * sy))};
  }
};

inline std::string to_string(const Dims& d) {
  return std::to_string(d.nx) + "x" + std::to_string(d.ny) + "x" + std::to_string(d.nz);
}

struct Spacing {
  double x = 1.0;
  double y = 1.0;
  double z = 1.0;

  friend constexpr bool operator==(const Spacing&, const Spacing&) = default;
};

template <typename T>
class Volume {
public:
  using value_type = T;

  Volume() = default;

  Volume(Dims dims, Spacing spacing = {}, T fill = T{})
      : dims_(dims), spacing_(spacing) {
    validate_geometry();
    data_.assign(dims_.size(), fill);
  }

  Volume(Dims dims, Spacing spacing, std::vector<T> data)
      : dims_(dims), spacing_(spacing), data_(std::move(data)) {
    validate_geometry();
    if (data_.size() != dims_.size())
      throw DataError("volume data length " + std::to_string(data_.size()) +
                      " does not match dims " + to_string(dims_));
    if constexpr (std::is_floating_point_v<T>) {
      for (const T v : data_)
        if (!std::isfinite(v)) throw DataError("volume contains non-finite values");
    }
  }

  const Dims& dims() const { return dims_; }
  const Spacing& spacing() const { return spacing_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  const std::vector<T>& values() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& operator()(int x, int y, int z) { return data_[dims_.index(x, y, z)]; }
  const T& operator()(int x, int y, int z) const { return data_[dims_.index(x, y, z)]; }
  T& operator()(Voxel v) { return data_[dims_.index(v)]; }
  const T& operator()(Voxel v) const { return data_[dims_.index(v)]; }

  /// Value at v, or `outside` when v is out of bounds.
  T at_or(Voxel v, T outside) const { return dims_.contains(v) ? (*this)(v) : outside; }

  bool same_geometry(const Volume<T>& other) const { return dims_ == other.dims_; }

  friend bool operator==(const Volume& a, const Volume& b) {
    return a.dims_ == b.dims_ && a.spacing_ == b.spacing_ && a.data_ == b.data_;
  }

private:
  void validate_geometry() const {
    if (dims_.nx <= 0 || dims_.ny <= 0 || dims_.nz <= 0)
      throw DataError("volume dims must be positive, got " + to_string(dims_));
    if (!(spacing_.x > 0.0 && spacing_.y > 0.0 && spacing_.z > 0.0))
      throw DataError("volume spacing must be strictly positive");
  }

  Dims dims_{};
  Spacing spacing_{};
  std::vector<T> data_;
};

using ScalarVolume = Volume<float>;
using BinaryMask = Volume<std::uint8_t>;
using LabelVolume = Volume<std::int32_t>;

template <typename A, typename B>
void require_same_dims(const Volume<A>& a, const Volume<B>& b, const char* what) {
  if (!(a.dims() == b.dims()))
    throw DataError(std::string(what) + ": dimension mismatch " + to_string(a.dims()) +
                    " vs " + to_string(b.dims()));
}

// ---------------------------------------------------------------------------
// Neighborhoods

enum class Connectivity { six = 6, twenty_six = 26 };

inline const std::vector<Voxel>& neighbor_offsets(Connectivity c) {
  static const std::vector<Voxel> six = {{-1, 0, 0}, {1, 0, 0},  {0, -1, 0},
                                         {0, 1, 0},  {0, 0, -1}, {0, 0, 1}};
  static const std::vector<Voxel> twenty_six = [] {
    std::vector<Voxel> out;
    for (int dz = -1; dz <= 1; ++dz)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx)
          if (dx != 0 || dy != 0 || dz != 0) out.push_back({dx, dy, dz});
    return out;
  }();
  return c == Connectivity::six ? six : twenty_six;
}

/// Number of foreground 26-neighbors of v (out-of-bounds counts as background).
inline int count_neighbors26(const BinaryMask& m, Voxel v) {
  int n = 0;
  for (const Voxel& o : neighbor_offsets(Connectivity::twenty_six)) n += m.at_or(v + o, 0) != 0;
  return n;
}

// ---------------------------------------------------------------------------
// Mask algebra

inline std::size_t count(const BinaryMask& m) {
  std::size_t n = 0;
  for (const auto v : m.data()) n += v != 0;
  return n;
}

inline BinaryMask mask_and(const BinaryMask& a, const BinaryMask& b) {
  require_same_dims(a, b, "mask_and");
  BinaryMask out(a.dims(), a.spacing());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = (a[i] && b[i]) ? 1 : 0;
  return out;
}

inline BinaryMask mask_or(const BinaryMask& a, const BinaryMask& b) {
  require_same_dims(a, b, "mask_or");
  BinaryMask out(a.dims(), a.spacing());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = (a[i] || b[i]) ? 1 : 0;
  return out;
}

/// a AND NOT b
inline BinaryMask mask_minus(const BinaryMask& a, const BinaryMask& b) {
  require_same_dims(a, b, "mask_minus");
  BinaryMask out(a.dims(), a.spacing());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = (a[i] && !b[i]) ? 1 : 0;
  return out;
}

inline BinaryMask mask_xor(const BinaryMask& a, const BinaryMask& b) {
  require_same_dims(a, b, "mask_xor");
  BinaryMask out(a.dims(), a.spacing());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = ((a[i] != 0) != (b[i] != 0)) ? 1 : 0;
  return out;
}

/// True when every foreground voxel of `inner` is foreground in `outer`.
inline bool is_subset(const BinaryMask& inner, const BinaryMask& outer) {
  require_same_dims(inner, outer, "is_subset");
  for (std::size_t i = 0; i < inner.size(); ++i)
    if (inner[i] && !outer[i]) return false;
  return true;
}

inline bool is_binary(const BinaryMask& m) {
  return std::all_of(m.data().begin(), m.data().end(), [](auto v) { return v <= 1; });
}

template <typename T>
BinaryMask to_mask(const Volume<T>& v) {
  BinaryMask out(v.dims(), v.spacing());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] != T{} ? 1 : 0;
  return out;
}

template <typename T>
ScalarVolume to_scalar(const Volume<T>& v) {
  ScalarVolume out(v.dims(), v.spacing());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Operations

/// voxel = 1 iff y >= t.
inline BinaryMask threshold(const ScalarVolume& y, double t) {
  BinaryMask out(y.dims(), y.spacing());
  for (std::size_t i = 0; i < y.size(); ++i) out[i] = static_cast<double>(y[i]) >= t ? 1 : 0;
  return out;
}

/// Binary dilation with a 3x3x3 cube, clipped at the borders.
/// Separable: a cube is the product of three 1D windows of width 3.
inline BinaryMask dilate_cube3(const BinaryMask& m) {
  const Dims d = m.dims();
  BinaryMask a(d, m.spacing());
  BinaryMask b(d, m.spacing());
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        bool on = m(x, y, z) != 0;
        if (x > 0) on = on || m(x - 1, y, z);
        if (x + 1 < d.nx) on = on || m(x + 1, y, z);
        a(x, y, z) = on;
      }
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        bool on = a(x, y, z) != 0;
        if (y > 0) on = on || a(x, y - 1, z);
        if (y + 1 < d.ny) on = on || a(x, y + 1, z);
        b(x, y, z) = on;
      }
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        bool on = b(x, y, z) != 0;
        if (z > 0) on = on || b(x, y, z - 1);
        if (z + 1 < d.nz) on = on || b(x, y, z + 1);
        a(x, y, z) = on;
      }
  return a;
}

inline BinaryMask dilate_cube3(const BinaryMask& m, int iterations) {
  BinaryMask out = m;
  for (int i = 0; i < iterations; ++i) out = dilate_cube3(out);
  return out;
}

struct Components {
  LabelVolume labels;
  int count = 0;
};

/// Labels foreground components 1..count in order of their first voxel
/// (linear scan order). Background stays 0.
inline Components connected_components(const BinaryMask& m, Connectivity conn) {
  const Dims d = m.dims();
  Components out{LabelVolume(d, m.spacing(), 0), 0};
  const auto& offsets = neighbor_offsets(conn);
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < m.size(); ++start) {
    if (!m[start] || out.labels[start] != 0) continue;
    const int label = ++out.count;
    out.labels[start] = label;
    stack.push_back(start);
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      const Voxel v = d.voxel(i);
      for (const Voxel& o : offsets) {
        const Voxel n = v + o;
        if (!d.contains(n)) continue;
        const std::size_t j = d.index(n);
        if (m[j] && out.labels[j] == 0) {
          out.labels[j] = label;
          stack.push_back(j);
        }
      }
    }
  }
  return out;
}

inline int count_components(const BinaryMask& m, Connectivity conn) {
  return connected_components(m, conn).count;
}

namespace detail {

// Exact 1D squared distance transform (lower envelope of parabolas).
// f holds 0 at sites and a large value elsewhere; results are exact for
// integer inputs below 2^53.
inline void edt_1d(std::span<const double> f, std::vector<double>& out, std::vector<int>& v,
                   std::vector<double>& z) {
  const int n = static_cast<int>(f.size());
  constexpr double kInf = std::numeric_limits<double>::infinity();
  out.assign(n, kInf);
  v.assign(n, 0);
  z.assign(n + 1, 0.0);
  auto intersect = [&](int q, int p) {
    return ((f[q] + double(q) * q) - (f[p] + double(p) * p)) / (2.0 * (q - p));
  };
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (!std::isfinite(f[q])) continue;
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
      continue;
    }
    double s = intersect(q, v[k]);
    while (s <= z[k]) {
      --k;
      s = intersect(q, v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kInf;
  }
  if (k < 0) return;
  int j = 0;
  for (int q = 0; q < n; ++q) {
    while (z[j + 1] < q) ++j;
    const double dq = q - v[j];
    out[q] = dq * dq + f[v[j]];
  }
}

}  // namespace detail

/// Exact Euclidean distance (voxel units) from each foreground voxel to the
/// nearest background voxel. The volume is surrounded by a virtual layer of
/// background, so a lone voxel, or a voxel on the border, has distance 1.
inline ScalarVolume distance_transform(const BinaryMask& m) {
  const Dims d = m.dims();
  const Dims p{d.nx + 2, d.ny + 2, d.nz + 2};
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> g(p.size(), 0.0);
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x)
        if (m(x, y, z)) g[p.index(x + 1, y + 1, z + 1)] = kInf;

  std::vector<double> line, out, zbuf;
  std::vector<int> vbuf;
  auto pass = [&](int len, auto index_of, int outer_a, int outer_b) {
    line.resize(len);
    for (int b = 0; b < outer_b; ++b)
      for (int a = 0; a < outer_a; ++a) {
        for (int i = 0; i < len; ++i) line[i] = g[index_of(i, a, b)];
        detail::edt_1d(line, out, vbuf, zbuf);
        for (int i = 0; i < len; ++i) g[index_of(i, a, b)] = out[i];
      }
  };
  pass(p.nx, [&](int i, int a, int b) { return p.index(i, a, b); }, p.ny, p.nz);
  pass(p.ny, [&](int i, int a, int b) { return p.index(a, i, b); }, p.nx, p.nz);
  pass(p.nz, [&](int i, int a, int b) { return p.index(a, b, i); }, p.nx, p.ny);

  ScalarVolume result(d, m.spacing(), 0.0f);
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x)
        if (m(x, y, z))
          result(x, y, z) = static_cast<float>(std::sqrt(g[p.index(x + 1, y + 1, z + 1)]));
  return result;
}

/// Mirror along one axis (0 = x, 1 = y, 2 = z).
template <typename T>
Volume<T> flip(const Volume<T>& v, int axis) {
  const Dims d = v.dims();
  Volume<T> out(d, v.spacing());
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        const int sx = axis == 0 ? d.nx - 1 - x : x;
        const int sy = axis == 1 ? d.ny - 1 - y : y;
        const int sz = axis == 2 ? d.nz - 1 - z : z;
        out(x, y, z) = v(sx, sy, sz);
      }
  return out;
}

}  // namespace treelab
