#pragma once

// Synthetic bifurcating tubes: a binary tree of straight capsules with
// radii shrinking per level, rendered into a noisy [0, 1] image.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "treelab/config.hpp"
#include "treelab/error.hpp"
#include "treelab/rng.hpp"
#include "treelab/skeleton.hpp"
#include "treelab/volume.hpp"

namespace treelab {

struct Vec3 {
  double x = 0, y = 0, z = 0;
  Vec3 operator+(Vec3 o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(Vec3 o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  double dot(Vec3 o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(Vec3 o) const { return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x}; }
  double norm() const { return std::sqrt(dot(*this)); }
  Vec3 normalized() const { return *this * (1.0 / norm()); }
  Voxel rounded() const {
    return {static_cast<int>(std::lround(x)), static_cast<int>(std::lround(y)),
            static_cast<int>(std::lround(z))};
  }
};

inline double point_segment_distance(Vec3 p, Vec3 a, Vec3 b) {
  const Vec3 ab = b - a;
  const double len2 = ab.dot(ab);
  const double t = len2 > 0 ? std::clamp((p - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
  return (p - (a + ab * t)).norm();
}

/// Shortest distance between two 3D segments.
inline double segment_segment_distance(Vec3 p1, Vec3 q1, Vec3 p2, Vec3 q2) {
  const Vec3 d1 = q1 - p1, d2 = q2 - p2, r = p1 - p2;
  const double a = d1.dot(d1), e = d2.dot(d2), f = d2.dot(r);
  double s = 0, t = 0;
  if (a <= 1e-12 && e <= 1e-12) return r.norm();
  if (a <= 1e-12) {
    t = std::clamp(f / e, 0.0, 1.0);
  } else {
    const double c = d1.dot(r);
    if (e <= 1e-12) {
      s = std::clamp(-c / a, 0.0, 1.0);
    } else {
      const double b = d1.dot(d2), denom = a * e - b * b;
      s = denom > 1e-12 ? std::clamp((b * f - c * e) / denom, 0.0, 1.0) : 0.0;
      t = (b * s + f) / e;
      if (t < 0) {
        t = 0;
        s = std::clamp(-c / a, 0.0, 1.0);
      } else if (t > 1) {
        t = 1;
        s = std::clamp((b - c) / a, 0.0, 1.0);
      }
    }
  }
  return ((p1 + d1 * s) - (p2 + d2 * t)).norm();
}

struct PhantomSpec {
  Dims dims{64, 64, 64};
  int depth = 3;
  double trunk_radius_vox = 2.5;
  double radius_decay = 0.75;
  double branch_len_min = 12.0;
  double branch_len_max = 18.0;
  double branch_angle_min_deg = 25.0;
  double branch_angle_max_deg = 40.0;
  double foreground_intensity = 0.8;
  double background_intensity = 0.2;
  double noise_sigma = 0.05;
  std::uint64_t seed = 0;
  int max_attempts = 200;

  double radius_at(int level) const { return trunk_radius_vox * std::pow(radius_decay, level); }

  void validate() const {
    if (dims.nx <= 0 || dims.ny <= 0 || dims.nz <= 0) throw UsageError("phantom: dims must be positive");
    if (depth < 0) throw UsageError("phantom: depth must be >= 0");
    if (!(trunk_radius_vox > 0)) throw UsageError("phantom: trunk_radius_vox must be > 0");
    if (!(radius_decay > 0 && radius_decay <= 1)) throw UsageError("phantom: radius_decay must lie in (0, 1]");
    if (!(branch_len_min > 0 && branch_len_min <= branch_len_max))
      throw UsageError("phantom: need 0 < branch_len_min <= branch_len_max");
    if (!(branch_angle_min_deg >= 0 && branch_angle_min_deg <= branch_angle_max_deg &&
          branch_angle_max_deg < 90))
      throw UsageError("phantom: need 0 <= branch_angle_min <= branch_angle_max < 90");
    for (double v : {foreground_intensity, background_intensity})
      if (!(v >= 0 && v <= 1)) throw UsageError("phantom: intensities must lie in [0, 1]");
    if (!(noise_sigma >= 0)) throw UsageError("phantom: noise_sigma must be >= 0");
    if (radius_at(depth) < 0.5) throw UsageError("phantom: radius drops below 0.5 voxel at max depth");
    if (max_attempts < 1) throw UsageError("phantom: max_attempts must be >= 1");
  }
};

inline PhantomSpec phantom_spec_from_json(const nlohmann::json& j) {
  PhantomSpec s;
  ObjectReader r(j, "phantom spec");
  std::array<int, 3> dims{s.dims.nx, s.dims.ny, s.dims.nz};
  std::array<double, 2> len{s.branch_len_min, s.branch_len_max};
  std::array<double, 2> angle{s.branch_angle_min_deg, s.branch_angle_max_deg};
  r.optional("dims", dims);
  r.optional("depth", s.depth);
  r.optional("trunk_radius_vox", s.trunk_radius_vox);
  r.optional("radius_decay", s.radius_decay);
  r.optional("branch_len_range", len);
  r.optional("branch_angle_range", angle);
  r.optional("foreground_intensity", s.foreground_intensity);
  r.optional("background_intensity", s.background_intensity);
  r.optional("noise_sigma", s.noise_sigma);
  r.optional("seed", s.seed);
  r.optional("max_attempts", s.max_attempts);
  r.finish();
  s.dims = {dims[0], dims[1], dims[2]};
  s.branch_len_min = len[0];
  s.branch_len_max = len[1];
  s.branch_angle_min_deg = angle[0];
  s.branch_angle_max_deg = angle[1];
  s.validate();
  return s;
}

inline nlohmann::json to_json(const PhantomSpec& s) {
  return {{"dims", {s.dims.nx, s.dims.ny, s.dims.nz}},
          {"depth", s.depth},
          {"trunk_radius_vox", s.trunk_radius_vox},
          {"radius_decay", s.radius_decay},
          {"branch_len_range", {s.branch_len_min, s.branch_len_max}},
          {"branch_angle_range", {s.branch_angle_min_deg, s.branch_angle_max_deg}},
          {"foreground_intensity", s.foreground_intensity},
          {"background_intensity", s.background_intensity},
          {"noise_sigma", s.noise_sigma},
          {"seed", s.seed},
          {"max_attempts", s.max_attempts}};
}

struct TreeSegment {
  Vec3 a, b;
  double radius = 0;
  int level = 0;
  int parent = -1;  // index into the segment list, -1 for the trunk
};

struct PhantomSample {
  ScalarVolume image;
  BinaryMask gt_mask;
  BinaryMask gt_centerline;
  CenterlineGraph graph;
  BinaryMask bounding_mask;
  std::vector<TreeSegment> segments;
  int attempts = 0;
};

namespace detail {

inline void rasterize_line(BinaryMask& m, Voxel a, Voxel b) {
  const int dx = std::abs(b.x - a.x), dy = std::abs(b.y - a.y), dz = std::abs(b.z - a.z);
  const int n = std::max({dx, dy, dz});
  for (int i = 0; i <= n; ++i) {
    const double t = n == 0 ? 0.0 : static_cast<double>(i) / n;
    const Voxel v{static_cast<int>(std::lround(a.x + t * (b.x - a.x))),
                  static_cast<int>(std::lround(a.y + t * (b.y - a.y))),
                  static_cast<int>(std::lround(a.z + t * (b.z - a.z)))};
    m(v) = 1;
  }
}

inline Vec3 any_perpendicular(Vec3 d) {
  const Vec3 axis = std::abs(d.x) < 0.9 ? Vec3{1, 0, 0} : Vec3{0, 1, 0};
  return d.cross(axis).normalized();
}

inline bool adjacent_segments(const std::vector<TreeSegment>& s, int i, int j) {
  return s[i].parent == j || s[j].parent == i || (s[i].parent == s[j].parent && s[i].parent >= 0);
}

inline bool tree_is_valid(const std::vector<TreeSegment>& segs, const Dims& dims) {
  for (const auto& s : segs)
    for (const Vec3& p : {s.a, s.b}) {
      const double m = s.radius + 2.0;
      if (p.x < m || p.y < m || p.z < m || p.x > dims.nx - 1 - m || p.y > dims.ny - 1 - m ||
          p.z > dims.nz - 1 - m)
        return false;
    }
  for (std::size_t i = 0; i < segs.size(); ++i)
    for (std::size_t j = i + 1; j < segs.size(); ++j) {
      const auto& si = segs[i];
      const auto& sj = segs[j];
      const double need = si.radius + sj.radius + 3.0;
      if (adjacent_segments(segs, static_cast<int>(i), static_cast<int>(j))) {
        // siblings share their start; their far ends must still separate
        if (si.parent == sj.parent && (point_segment_distance(si.b, sj.a, sj.b) <= need ||
                                       point_segment_distance(sj.b, si.a, si.b) <= need))
          return false;
        continue;
      }
      if (segment_segment_distance(si.a, si.b, sj.a, sj.b) <= need) return false;
    }
  return true;
}

inline std::vector<TreeSegment> grow_tree(const PhantomSpec& spec, double len_scale, Rng& rng) {
  constexpr double deg = std::numbers::pi / 180.0;
  auto length = [&] { return rng.uniform(spec.branch_len_min, spec.branch_len_max) * len_scale; };

  // Trunk enters from the low-z face, slightly tilted.
  const double r0 = spec.radius_at(0);
  const Vec3 start{(spec.dims.nx - 1) / 2.0, (spec.dims.ny - 1) / 2.0, r0 + 2.0};
  const double tilt = rng.uniform(0.0, 10.0) * deg, tilt_az = rng.uniform(0.0, 2 * std::numbers::pi);
  const Vec3 dir = Vec3{std::sin(tilt) * std::cos(tilt_az), std::sin(tilt) * std::sin(tilt_az),
                        std::cos(tilt)}.normalized();
  std::vector<TreeSegment> segs{{start, start + dir * length(), r0, 0, -1}};
  // Spread direction (unit, perpendicular to the segment) for each segment's children.
  std::vector<Vec3> spread{detail::any_perpendicular(dir)};

  for (std::size_t i = 0; i < segs.size(); ++i) {
    const TreeSegment parent = segs[i];
    if (parent.level >= spec.depth) continue;
    const Vec3 d = (parent.b - parent.a).normalized();
    const Vec3 w = spread[i];
    const Vec3 n = d.cross(w).normalized();
    const double jitter = rng.uniform(-20.0, 20.0) * deg;
    const Vec3 side = (w * std::cos(jitter) + n * std::sin(jitter)).normalized();
    for (const double sign : {1.0, -1.0}) {
      const double theta = rng.uniform(spec.branch_angle_min_deg, spec.branch_angle_max_deg) * deg;
      const Vec3 cd = (d * std::cos(theta) + side * (sign * std::sin(theta))).normalized();
      segs.push_back({parent.b, parent.b + cd * length(), spec.radius_at(parent.level + 1),
                      parent.level + 1, static_cast<int>(i)});
      // Children of this child spread across the current bifurcation plane.
      const Vec3 plane_normal = d.cross(side).normalized();
      Vec3 next = plane_normal - cd * plane_normal.dot(cd);
      spread.push_back(next.norm() > 1e-9 ? next.normalized() : detail::any_perpendicular(cd));
    }
  }
  return segs;
}

}  // namespace detail

/// Voxel-wise soft occupancy in [0, 1]: 1 deeper than half a voxel inside
/// the surface, falling linearly to 0 half a voxel outside.
inline ScalarVolume soft_tree_mask(const std::vector<TreeSegment>& segs, Dims dims) {
  ScalarVolume soft(dims);
  for (const auto& s : segs) {
    const double reach = s.radius + 1.0;
    const int x0 = std::max(0, static_cast<int>(std::floor(std::min(s.a.x, s.b.x) - reach)));
    const int x1 = std::min(dims.nx - 1, static_cast<int>(std::ceil(std::max(s.a.x, s.b.x) + reach)));
    const int y0 = std::max(0, static_cast<int>(std::floor(std::min(s.a.y, s.b.y) - reach)));
    const int y1 = std::min(dims.ny - 1, static_cast<int>(std::ceil(std::max(s.a.y, s.b.y) + reach)));
    const int z0 = std::max(0, static_cast<int>(std::floor(std::min(s.a.z, s.b.z) - reach)));
    const int z1 = std::min(dims.nz - 1, static_cast<int>(std::ceil(std::max(s.a.z, s.b.z) + reach)));
    for (int z = z0; z <= z1; ++z)
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
          const double d = point_segment_distance({double(x), double(y), double(z)}, s.a, s.b);
          const float v = static_cast<float>(std::clamp(s.radius + 0.5 - d, 0.0, 1.0));
          float& cur = soft(x, y, z);
          cur = std::max(cur, v);
        }
  }
  return soft;
}

/// Voxels whose centers lie within radius of a segment (soft value >= 0.5).
inline BinaryMask solid_tree_mask(const std::vector<TreeSegment>& segs, Dims dims) {
  const ScalarVolume soft = soft_tree_mask(segs, dims);
  BinaryMask m(dims);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = soft[i] >= 0.5f;
  return m;
}

/// Draws image intensities for the sample's geometry.
inline ScalarVolume render_image(const PhantomSample& sample, const PhantomSpec& spec) {
  const Dims dims = sample.gt_mask.dims();
  const ScalarVolume soft = soft_tree_mask(sample.segments, dims);
  Rng rng = Rng(spec.seed).split(2);
  ScalarVolume image(dims);
  const double fg = spec.foreground_intensity, bg = spec.background_intensity;
  for (std::size_t i = 0; i < image.size(); ++i) {
    const double s = soft[i];
    double v = fg * s + bg * (1.0 - s);
    if (spec.noise_sigma > 0) v += spec.noise_sigma * rng.normal();
    image[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  return image;
}

/// Builds a random tree that fits the volume, redrawing on failure and
/// shortening all branches by 5% after every 10 failed attempts.
inline PhantomSample generate_tree(const PhantomSpec& spec) {
  spec.validate();
  Rng geometry = Rng(spec.seed).split(1);
  const std::size_t expected_branches = (std::size_t{2} << spec.depth) - 1;
  for (int attempt = 0; attempt < spec.max_attempts; ++attempt) {
    const double scale = std::pow(0.95, attempt / 10);
    std::vector<TreeSegment> segs = detail::grow_tree(spec, scale, geometry);
    if (!detail::tree_is_valid(segs, spec.dims)) continue;

    PhantomSample s;
    s.segments = std::move(segs);
    s.gt_centerline = BinaryMask(spec.dims);
    for (const auto& seg : s.segments) detail::rasterize_line(s.gt_centerline, seg.a.rounded(), seg.b.rounded());
    s.gt_mask = mask_or(solid_tree_mask(s.segments, spec.dims), s.gt_centerline);

    CenterlineGraph g;
    try {
      g = assign_generations(build_graph(s.gt_centerline, s.segments[0].a.rounded()));
    } catch (const DataError&) {
      continue;
    }
    if (g.branches.size() != expected_branches ||
        g.bifurcation_count() != expected_branches / 2 ||
        count_components(s.gt_centerline, Connectivity::twenty_six) != 1)
      continue;
    s.graph = estimate_diameters(std::move(g), s.gt_mask);
    s.bounding_mask = dilate_cube3(s.gt_mask, 8);
    s.image = render_image(s, spec);
    s.attempts = attempt + 1;
    return s;
  }
  throw DataError("phantom: tree does not fit in " + to_string(spec.dims) + " after " +
                  std::to_string(spec.max_attempts) + " attempts");
}

}  // namespace treelab
