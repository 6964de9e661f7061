#pragma once

// Dense (channels, nx, ny, nz) tensors and the compute kernels of the
// network layers. Layout: channel-major, then z, y, x (x fastest), the same
// voxel order as Volume.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <thread>
#include <vector>

#include "treelab/error.hpp"

namespace treelab {

template <typename T>
struct Tensor {
  int c = 0, nx = 0, ny = 0, nz = 0;
  std::vector<T> data;

  Tensor() = default;
  Tensor(int channels, int x, int y, int z, T fill = T(0))
      : c(channels), nx(x), ny(y), nz(z),
        data(static_cast<std::size_t>(channels) * x * y * z, fill) {
    if (channels <= 0 || x <= 0 || y <= 0 || z <= 0)
      throw UsageError("tensor: non-positive shape");
  }

  std::size_t voxels() const { return static_cast<std::size_t>(nx) * ny * nz; }
  std::size_t size() const { return data.size(); }
  T* channel(int k) { return data.data() + k * voxels(); }
  const T* channel(int k) const { return data.data() + k * voxels(); }
  T& operator()(int k, int x, int y, int z) {
    return data[((static_cast<std::size_t>(k) * nz + z) * ny + y) * nx + x];
  }
  T operator()(int k, int x, int y, int z) const {
    return data[((static_cast<std::size_t>(k) * nz + z) * ny + y) * nx + x];
  }
  const T* row(int k, int y, int z) const {
    return data.data() + ((static_cast<std::size_t>(k) * nz + z) * ny + y) * nx;
  }
  T* row(int k, int y, int z) { return data.data() + ((static_cast<std::size_t>(k) * nz + z) * ny + y) * nx; }
  bool same_shape(const Tensor& o) const { return c == o.c && nx == o.nx && ny == o.ny && nz == o.nz; }
  std::string shape_string() const {
    return std::to_string(c) + "x" + std::to_string(nx) + "x" + std::to_string(ny) + "x" + std::to_string(nz);
  }
  void fill(T v) { std::fill(data.begin(), data.end(), v); }
};

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
  Tensor<To> out;
  out.c = t.c;
  out.nx = t.nx;
  out.ny = t.ny;
  out.nz = t.nz;
  out.data.assign(t.data.begin(), t.data.end());
  return out;
}

/// Runs body(k) for k in [0, n). Work items must write disjoint outputs, so
/// the result does not depend on the thread count.
template <typename F>
void parallel_for(int n, int threads, F&& body) {
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int k = 0; k < n; ++k) body(k);
    return;
  }
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t)
    pool.emplace_back([&, t] {
      for (int k = t; k < n; k += threads) body(k);
    });
  for (auto& th : pool) th.join();
}

namespace kernels {

/// Copy with a one-voxel zero border: (c, nx+2, ny+2, nz+2).
template <typename T>
Tensor<T> pad1(const Tensor<T>& in) {
  Tensor<T> p(in.c, in.nx + 2, in.ny + 2, in.nz + 2);
  for (int k = 0; k < in.c; ++k)
    for (int z = 0; z < in.nz; ++z)
      for (int y = 0; y < in.ny; ++y)
        std::copy_n(in.row(k, y, z), in.nx, p.row(k, y + 1, z + 1) + 1);
  return p;
}

// OB output channels at once over one output row: every loaded input row
// feeds OB x 3 multiply-adds.
template <typename T, int OB>
void conv3_row_block(const Tensor<T>& pad, const T* w, int in_ch, int o0, int z, int y, int nx,
                     T* const* acc) {
  for (int i = 0; i < in_ch; ++i)
    for (int kz = 0; kz < 3; ++kz)
      for (int ky = 0; ky < 3; ++ky) {
        const T* __restrict r = pad.row(i, y + ky, z + kz);
        T wk[OB][3];
        for (int b = 0; b < OB; ++b)
          for (int kx = 0; kx < 3; ++kx)
            wk[b][kx] = w[((static_cast<std::size_t>(o0 + b) * in_ch + i) * 3 + kz) * 9 + ky * 3 + kx];
        for (int b = 0; b < OB; ++b) {
          T* __restrict a = acc[b];
          const T w0 = wk[b][0], w1 = wk[b][1], w2 = wk[b][2];
#pragma GCC ivdep
          for (int x = 0; x < nx; ++x) a[x] += w0 * r[x] + w1 * r[x + 1] + w2 * r[x + 2];
        }
      }
}

/// 3x3x3 convolution with zero padding. w: [out][in][3][3][3], bias may be null.
template <typename T>
void conv3_forward_padded(const Tensor<T>& pad, const T* w, const T* bias, int out_ch, Tensor<T>& out,
                          int threads) {
  const int nx = pad.nx - 2, ny = pad.ny - 2, nz = pad.nz - 2;
  out = Tensor<T>(out_ch, nx, ny, nz);
  constexpr int OB = 4;
  const int blocks = (out_ch + OB - 1) / OB;
  parallel_for(blocks * nz, threads, [&](int job) {
    const int blk = job / nz, z = job % nz;
    const int o0 = blk * OB, nb = std::min(OB, out_ch - o0);
    std::vector<T> buf(static_cast<std::size_t>(OB) * nx);
    T* acc[OB];
    for (int b = 0; b < OB; ++b) acc[b] = buf.data() + static_cast<std::size_t>(b) * nx;
    for (int y = 0; y < ny; ++y) {
      for (int b = 0; b < nb; ++b) std::fill_n(acc[b], nx, bias ? bias[o0 + b] : T(0));
      switch (nb) {
        case 4: conv3_row_block<T, 4>(pad, w, pad.c, o0, z, y, nx, acc); break;
        case 3: conv3_row_block<T, 3>(pad, w, pad.c, o0, z, y, nx, acc); break;
        case 2: conv3_row_block<T, 2>(pad, w, pad.c, o0, z, y, nx, acc); break;
        default: conv3_row_block<T, 1>(pad, w, pad.c, o0, z, y, nx, acc); break;
      }
      for (int b = 0; b < nb; ++b) std::copy_n(acc[b], nx, out.row(o0 + b, y, z));
    }
  });
}

/// Gradients of a 3x3x3 convolution given the padded input and the output
/// gradient. Accumulates into dw/db (which must be pre-sized) and returns
/// the input gradient when `din` is non-null.
template <typename T>
void conv3_backward(const Tensor<T>& pad, const T* w, int out_ch, const Tensor<T>& gout, T* dw, T* db,
                    Tensor<T>* din, int threads) {
  const int in_ch = pad.c, nx = gout.nx, ny = gout.ny, nz = gout.nz;
  // Weight gradient: one job per (o, i); 27 lane-wise accumulators keep the
  // summation order fixed.
  parallel_for(out_ch * in_ch, threads, [&](int job) {
    const int o = job / in_ch, i = job % in_ch;
    std::vector<T> acc(static_cast<std::size_t>(27) * nx, T(0));
    for (int z = 0; z < nz; ++z)
      for (int y = 0; y < ny; ++y) {
        const T* __restrict g = gout.row(o, y, z);
        for (int kz = 0; kz < 3; ++kz)
          for (int ky = 0; ky < 3; ++ky) {
            const T* __restrict r = pad.row(i, y + ky, z + kz);
            T* __restrict a0 = acc.data() + static_cast<std::size_t>(kz * 9 + ky * 3) * nx;
            T* __restrict a1 = a0 + nx;
            T* __restrict a2 = a1 + nx;
#pragma GCC ivdep
            for (int x = 0; x < nx; ++x) {
              a0[x] += g[x] * r[x];
              a1[x] += g[x] * r[x + 1];
              a2[x] += g[x] * r[x + 2];
            }
          }
      }
    for (int k = 0; k < 27; ++k) {
      T s = 0;
      for (int x = 0; x < nx; ++x) s += acc[static_cast<std::size_t>(k) * nx + x];
      dw[(static_cast<std::size_t>(o) * in_ch + i) * 27 + k] += s;
    }
  });
  if (db)
    for (int o = 0; o < out_ch; ++o) {
      const T* g = gout.channel(o);
      T s = 0;
      for (std::size_t v = 0; v < gout.voxels(); ++v) s += g[v];
      db[o] += s;
    }
  if (din) {
    // Input gradient = convolution of the padded output gradient with the
    // spatially flipped, transposed kernel.
    std::vector<T> wt(static_cast<std::size_t>(in_ch) * out_ch * 27);
    for (int o = 0; o < out_ch; ++o)
      for (int i = 0; i < in_ch; ++i)
        for (int k = 0; k < 27; ++k)
          wt[(static_cast<std::size_t>(i) * out_ch + o) * 27 + (26 - k)] =
              w[(static_cast<std::size_t>(o) * in_ch + i) * 27 + k];
    conv3_forward_padded(pad1(gout), wt.data(), static_cast<const T*>(nullptr), in_ch, *din, threads);
  }
}

/// Pointwise channel mixing. w: [out][in].
template <typename T>
void conv1_forward(const Tensor<T>& in, const T* w, const T* bias, int out_ch, Tensor<T>& out) {
  out = Tensor<T>(out_ch, in.nx, in.ny, in.nz);
  const std::size_t n = in.voxels();
  for (int o = 0; o < out_ch; ++o) {
    T* __restrict dst = out.channel(o);
    std::fill_n(dst, n, bias ? bias[o] : T(0));
    for (int i = 0; i < in.c; ++i) {
      const T wi = w[static_cast<std::size_t>(o) * in.c + i];
      const T* __restrict src = in.channel(i);
      for (std::size_t v = 0; v < n; ++v) dst[v] += wi * src[v];
    }
  }
}

template <typename T>
void conv1_backward(const Tensor<T>& in, const T* w, int out_ch, const Tensor<T>& gout, T* dw, T* db,
                    Tensor<T>* din) {
  const std::size_t n = in.voxels();
  for (int o = 0; o < out_ch; ++o) {
    const T* g = gout.channel(o);
    for (int i = 0; i < in.c; ++i) {
      const T* x = in.channel(i);
      T s = 0;
      for (std::size_t v = 0; v < n; ++v) s += g[v] * x[v];
      dw[static_cast<std::size_t>(o) * in.c + i] += s;
    }
    if (db) {
      T s = 0;
      for (std::size_t v = 0; v < n; ++v) s += g[v];
      db[o] += s;
    }
  }
  if (din) {
    *din = Tensor<T>(in.c, in.nx, in.ny, in.nz);
    for (int i = 0; i < in.c; ++i) {
      T* __restrict dst = din->channel(i);
      for (int o = 0; o < out_ch; ++o) {
        const T wi = w[static_cast<std::size_t>(o) * in.c + i];
        const T* __restrict g = gout.channel(o);
        for (std::size_t v = 0; v < n; ++v) dst[v] += wi * g[v];
      }
    }
  }
}

/// 2x2x2 max pooling; ties resolve to the first voxel in x-fastest order.
template <typename T>
void maxpool2_forward(const Tensor<T>& in, Tensor<T>& out, std::vector<std::uint32_t>& argmax) {
  if (in.nx % 2 || in.ny % 2 || in.nz % 2)
    throw UsageError("downsample2 needs even spatial dims, got " + in.shape_string());
  out = Tensor<T>(in.c, in.nx / 2, in.ny / 2, in.nz / 2);
  argmax.assign(out.size(), 0);
  std::size_t j = 0;
  for (int k = 0; k < in.c; ++k)
    for (int z = 0; z < out.nz; ++z)
      for (int y = 0; y < out.ny; ++y)
        for (int x = 0; x < out.nx; ++x, ++j) {
          std::uint32_t best = 0;
          T m = in(k, 2 * x, 2 * y, 2 * z);
          for (std::uint32_t q = 1; q < 8; ++q) {
            const T v = in(k, 2 * x + (q & 1), 2 * y + (q >> 1 & 1), 2 * z + (q >> 2));
            if (v > m) {
              m = v;
              best = q;
            }
          }
          out.data[j] = m;
          argmax[j] = best;
        }
}

template <typename T>
void maxpool2_backward(const Tensor<T>& in_shape, const std::vector<std::uint32_t>& argmax,
                       const Tensor<T>& gout, Tensor<T>& din) {
  din = Tensor<T>(in_shape.c, in_shape.nx, in_shape.ny, in_shape.nz);
  std::size_t j = 0;
  for (int k = 0; k < gout.c; ++k)
    for (int z = 0; z < gout.nz; ++z)
      for (int y = 0; y < gout.ny; ++y)
        for (int x = 0; x < gout.nx; ++x, ++j) {
          const std::uint32_t q = argmax[j];
          din(k, 2 * x + (q & 1), 2 * y + (q >> 1 & 1), 2 * z + (q >> 2)) += gout.data[j];
        }
}

template <typename T>
void upsample2_forward(const Tensor<T>& in, Tensor<T>& out) {
  out = Tensor<T>(in.c, in.nx * 2, in.ny * 2, in.nz * 2);
  for (int k = 0; k < out.c; ++k)
    for (int z = 0; z < out.nz; ++z)
      for (int y = 0; y < out.ny; ++y)
        for (int x = 0; x < out.nx; ++x) out(k, x, y, z) = in(k, x / 2, y / 2, z / 2);
}

template <typename T>
void upsample2_backward(const Tensor<T>& gout, Tensor<T>& din) {
  din = Tensor<T>(gout.c, gout.nx / 2, gout.ny / 2, gout.nz / 2);
  for (int k = 0; k < gout.c; ++k)
    for (int z = 0; z < gout.nz; ++z)
      for (int y = 0; y < gout.ny; ++y)
        for (int x = 0; x < gout.nx; ++x) din(k, x / 2, y / 2, z / 2) += gout(k, x, y, z);
}

}  // namespace kernels
}  // namespace treelab
