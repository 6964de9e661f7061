#pragma once

// Patch cropping, augmentation and overlapping sliding-window inference.

#include <array>
#include <cmath>
#include <numbers>
#include <vector>

#include "treelab/model.hpp"
#include "treelab/rng.hpp"
#include "treelab/volume.hpp"

namespace treelab {

/// Cube of side `size` starting at `offset`; voxels outside `v` take `pad`.
template <typename T>
Volume<T> crop(const Volume<T>& v, Voxel offset, int size, T pad = T{}) {
  Volume<T> out(Dims{size, size, size}, v.spacing(), pad);
  const Dims d = v.dims();
  for (int z = 0; z < size; ++z)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const Voxel s{offset.x + x, offset.y + y, offset.z + z};
        if (d.contains(s)) out(x, y, z) = v(s);
      }
  return out;
}

/// Uniform offset such that the patch stays inside the volume (0 on axes
/// shorter than the patch, which are padded instead).
inline Voxel random_offset(Dims d, int patch, Rng& rng) {
  auto axis = [&](int n) { return static_cast<int>(rng.uniform_int(0, std::max(0, n - patch))); };
  const int x = axis(d.nx);
  const int y = axis(d.ny);
  const int z = axis(d.nz);
  return {x, y, z};
}

/// One training sample: input channels, target and loss mask, all the
/// same cubic shape.
struct Patch {
  std::vector<ScalarVolume> channels;
  ScalarVolume target;
  BinaryMask mask;
  Voxel offset;
};

struct AugmentFlags {
  bool flip = true;
  bool rot90 = false;
  bool rotate = false;  // arbitrary rotation up to max_rotation_deg
  bool scale = false;   // isotropic scaling in [scale_min, scale_max]
  double max_rotation_deg = 30.0;
  double scale_min = 0.7;
  double scale_max = 1.4;

  bool any() const { return flip || rot90 || rotate || scale; }
};

namespace detail {

template <typename T>
Volume<T> rot90_plane(const Volume<T>& v, int plane, int turns) {
  Volume<T> out = v;
  const int n = v.dims().nx;
  for (int z = 0; z < n; ++z)
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        std::array<int, 3> p{x, y, z};
        const int a = plane == 2 ? 1 : 0;
        const int b = plane == 0 ? 1 : 2;
        for (int t = 0; t < turns; ++t) {
          const int pa = p[a], pb = p[b];
          p[a] = n - 1 - pb;
          p[b] = pa;
        }
        out(p[0], p[1], p[2]) = v(x, y, z);
      }
  return out;
}

using Mat3 = std::array<std::array<double, 3>, 3>;

inline Mat3 rotation(std::array<double, 3> axis, double angle) {
  const double n = std::sqrt(axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]);
  for (double& a : axis) a /= n;
  const double c = std::cos(angle), s = std::sin(angle), t = 1 - c;
  const auto [x, y, z] = axis;
  return {{{t * x * x + c, t * x * y - s * z, t * x * z + s * y},
           {t * x * y + s * z, t * y * y + c, t * y * z - s * x},
           {t * x * z - s * y, t * y * z + s * x, t * z * z + c}}};
}

/// Resamples a cube through `inv` (output -> source, about the center),
/// trilinear or nearest, clamping source coordinates to the edge.
template <typename T>
Volume<T> resample(const Volume<T>& v, const Mat3& inv, bool nearest) {
  const int n = v.dims().nx;
  const double c = (n - 1) / 2.0;
  Volume<T> out(v.dims(), v.spacing());
  auto at = [&](int x, int y, int z) {
    return static_cast<double>(v(std::clamp(x, 0, n - 1), std::clamp(y, 0, n - 1), std::clamp(z, 0, n - 1)));
  };
  for (int z = 0; z < n; ++z)
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        const double p[3] = {x - c, y - c, z - c};
        double s[3];
        for (int r = 0; r < 3; ++r) s[r] = inv[r][0] * p[0] + inv[r][1] * p[1] + inv[r][2] * p[2] + c;
        if (nearest) {
          out(x, y, z) = static_cast<T>(at(static_cast<int>(std::lround(s[0])), static_cast<int>(std::lround(s[1])),
                                           static_cast<int>(std::lround(s[2]))));
          continue;
        }
        const int x0 = static_cast<int>(std::floor(s[0])), y0 = static_cast<int>(std::floor(s[1])),
                  z0 = static_cast<int>(std::floor(s[2]));
        const double fx = s[0] - x0, fy = s[1] - y0, fz = s[2] - z0;
        double acc = 0;
        for (int k = 0; k < 8; ++k) {
          const int dx = k & 1, dy = k >> 1 & 1, dz = k >> 2;
          acc += (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) * (dz ? fz : 1 - fz) * at(x0 + dx, y0 + dy, z0 + dz);
        }
        out(x, y, z) = static_cast<T>(acc);
      }
  return out;
}

}  // namespace detail

/// Applies one random spatial transform to every volume of the patch.
/// Image channels are interpolated trilinearly, target and mask by nearest
/// neighbour; binary targets stay binary.
inline Patch augment(Patch p, Rng& rng, const AugmentFlags& flags) {
  if (flags.flip)
    for (int axis = 0; axis < 3; ++axis)
      if (rng.bernoulli(0.5)) {
        for (auto& c : p.channels) c = flip(c, axis);
        p.target = flip(p.target, axis);
        p.mask = flip(p.mask, axis);
      }
  const Dims d = p.target.dims();
  const bool cube = d.nx == d.ny && d.ny == d.nz;
  if (flags.rot90 && cube) {
    const int plane = static_cast<int>(rng.uniform_int(0, 2));
    const int turns = static_cast<int>(rng.uniform_int(0, 3));
    if (turns) {
      for (auto& c : p.channels) c = detail::rot90_plane(c, plane, turns);
      p.target = detail::rot90_plane(p.target, plane, turns);
      p.mask = detail::rot90_plane(p.mask, plane, turns);
    }
  }
  if ((flags.rotate || flags.scale) && cube) {
    detail::Mat3 inv = {{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
    if (flags.rotate) {
      std::array<double, 3> axis{rng.normal(), rng.normal(), rng.normal()};
      const double angle = rng.uniform(-1, 1) * flags.max_rotation_deg * std::numbers::pi / 180.0;
      // Inverse of a rotation is its transpose.
      const detail::Mat3 r = detail::rotation(axis, angle);
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) inv[i][j] = r[j][i];
    }
    if (flags.scale) {
      const double s = rng.uniform(flags.scale_min, flags.scale_max);
      for (auto& row : inv)
        for (double& v : row) v /= s;
    }
    // Channels that hold binary labels (only 0/1 values) also use nearest.
    for (auto& c : p.channels) {
      const bool binary = std::all_of(c.values().begin(), c.values().end(), [](float v) { return v == 0.0f || v == 1.0f; });
      c = detail::resample(c, inv, binary);
    }
    p.target = detail::resample(p.target, inv, true);
    p.mask = detail::resample(p.mask, inv, true);
  }
  return p;
}

template <typename T>
Tensor<T> to_tensor(const std::vector<const ScalarVolume*>& channels) {
  if (channels.empty()) throw UsageError("to_tensor: no channels");
  const Dims d = channels[0]->dims();
  Tensor<T> t(static_cast<int>(channels.size()), d.nx, d.ny, d.nz);
  for (std::size_t c = 0; c < channels.size(); ++c) {
    if (!(channels[c]->dims() == d)) throw DataError("to_tensor: channel dims differ");
    std::copy(channels[c]->values().begin(), channels[c]->values().end(), t.channel(static_cast<int>(c)));
  }
  return t;
}

template <typename T>
Tensor<T> to_tensor(const Patch& p) {
  std::vector<const ScalarVolume*> ch;
  for (const auto& c : p.channels) ch.push_back(&c);
  return to_tensor<T>(ch);
}

/// Window start positions along one axis: stride = round(patch * (1 -
/// overlap)) (at least 1), last window clamped to the border.
inline std::vector<int> window_starts(int dim, int patch, double overlap) {
  if (!(overlap >= 0.0 && overlap < 1.0)) throw UsageError("overlap must lie in [0, 1)");
  if (patch < 1) throw UsageError("patch must be >= 1");
  if (dim <= patch) return {0};
  const int stride = std::max(1, static_cast<int>(std::lround(patch * (1.0 - overlap))));
  std::vector<int> s;
  for (int p = 0; p + patch < dim; p += stride) s.push_back(p);
  s.push_back(dim - patch);
  return s;
}

/// Runs `net` over overlapping cubic windows and averages the window
/// outputs per voxel. Axes shorter than the patch are padded with
/// `pad_values[c]` for input channel c.
inline ScalarVolume sliding_window_infer(const Network<float>& net, const std::vector<const ScalarVolume*>& inputs,
                                         int patch, double overlap = 0.5, std::vector<float> pad_values = {}) {
  if (inputs.empty()) throw UsageError("sliding_window_infer: no inputs");
  const Dims d = inputs[0]->dims();
  for (const auto* v : inputs)
    if (!(v->dims() == d)) throw DataError("sliding_window_infer: input dims differ");
  pad_values.resize(inputs.size(), 0.0f);
  const auto xs = window_starts(d.nx, patch, overlap), ys = window_starts(d.ny, patch, overlap),
             zs = window_starts(d.nz, patch, overlap);
  std::vector<double> sum(d.size(), 0.0);
  std::vector<int> hits(d.size(), 0);
  for (int oz : zs)
    for (int oy : ys)
      for (int ox : xs) {
        std::vector<ScalarVolume> crops;
        std::vector<const ScalarVolume*> ptrs;
        crops.reserve(inputs.size());
        for (std::size_t c = 0; c < inputs.size(); ++c) crops.push_back(crop(*inputs[c], {ox, oy, oz}, patch, pad_values[c]));
        for (const auto& c : crops) ptrs.push_back(&c);
        const Tensor<float> y = net.forward(to_tensor<float>(ptrs));
        for (int z = 0; z < patch; ++z)
          for (int yy = 0; yy < patch; ++yy)
            for (int x = 0; x < patch; ++x) {
              const Voxel v{ox + x, oy + yy, oz + z};
              if (!d.contains(v)) continue;
              const std::size_t i = d.index(v);
              sum[i] += y(0, x, yy, z);
              ++hits[i];
            }
      }
  ScalarVolume out(d, inputs[0]->spacing());
  for (std::size_t i = 0; i < d.size(); ++i) out[i] = static_cast<float>(sum[i] / hits[i]);
  return out;
}

}  // namespace treelab
