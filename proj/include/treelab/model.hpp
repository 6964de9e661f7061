#pragma once

// Small convolutional networks with hand-written backward passes: the
// segmentation U-Nets (base, refiner, label-appearance) and the
// discriminator, their losses, Adam, gradient checking and checkpoints.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "treelab/error.hpp"
#include "treelab/rng.hpp"
#include "treelab/tensor.hpp"

namespace treelab {

enum class Op { conv3, conv1, leaky_relu, affine, instance_norm, downsample2, upsample2, save, concat, sigmoid, global_avg };

inline const char* op_name(Op op) {
  switch (op) {
    case Op::conv3: return "conv3";
    case Op::conv1: return "conv1";
    case Op::leaky_relu: return "leaky_relu";
    case Op::affine: return "affine";
    case Op::instance_norm: return "instance_norm";
    case Op::downsample2: return "downsample2";
    case Op::upsample2: return "upsample2";
    case Op::save: return "save";
    case Op::concat: return "concat";
    case Op::sigmoid: return "sigmoid";
    case Op::global_avg: return "global_avg";
  }
  return "?";
}

inline Op op_from_name(const std::string& s) {
  for (Op op : {Op::conv3, Op::conv1, Op::leaky_relu, Op::affine, Op::instance_norm, Op::downsample2,
                Op::upsample2, Op::save, Op::concat, Op::sigmoid, Op::global_avg})
    if (s == op_name(op)) return op;
  throw UsageError("unknown layer op '" + s + "'");
}

constexpr double kLeakySlope = 0.01;
constexpr double kNormEps = 1e-5;

enum class Norm { none, affine, instance };

inline const char* norm_name(Norm n) {
  return n == Norm::none ? "none" : n == Norm::affine ? "affine" : "instance";
}

inline Norm norm_from_name(const std::string& s) {
  if (s == "none") return Norm::none;
  if (s == "affine") return Norm::affine;
  if (s == "instance") return Norm::instance;
  throw UsageError("unknown norm '" + s + "' (none, affine, instance)");
}

struct LayerSpec {
  Op op = Op::conv3;
  int in = 0;     // channels in (conv, norm)
  int out = 0;    // channels out (conv)
  int slot = -1;  // skip slot (save, concat)
};

struct ModelSpec {
  std::string kind = "custom";  // unet, discriminator, custom
  int in_channels = 1;
  int levels = 1;
  int base_channels = 1;
  Norm norm = Norm::none;
  std::vector<LayerSpec> layers;

  bool scalar_output() const { return layers.size() >= 2 && layers[layers.size() - 2].op == Op::global_avg; }

  /// Spatial dims must be divisible by this factor.
  int spatial_multiple() const {
    int f = 1, best = 1;
    for (const auto& l : layers) {
      if (l.op == Op::downsample2) f *= 2;
      if (l.op == Op::upsample2) f /= 2;
      best = std::max(best, f);
    }
    return best;
  }

  /// Checks channel chaining and the output contract; throws UsageError.
  void validate() const {
    if (in_channels <= 0) throw UsageError("model: in_channels must be positive");
    if (layers.empty() || layers.back().op != Op::sigmoid) throw UsageError("model: last layer must be sigmoid");
    int ch = in_channels, scale = 0;
    std::vector<std::pair<int, int>> slots;  // (channels, scale), -1 if unset
    for (std::size_t k = 0; k < layers.size(); ++k) {
      const LayerSpec& l = layers[k];
      const std::string where = "model layer " + std::to_string(k) + " (" + op_name(l.op) + "): ";
      switch (l.op) {
        case Op::conv3:
        case Op::conv1:
          if (l.in != ch || l.out <= 0) throw UsageError(where + "channel mismatch");
          ch = l.out;
          break;
        case Op::affine:
        case Op::instance_norm:
          if (l.in != ch) throw UsageError(where + "channel mismatch");
          break;
        case Op::downsample2: ++scale; break;
        case Op::upsample2:
          if (--scale < 0) throw UsageError(where + "upsampling above input resolution");
          break;
        case Op::save:
          if (l.slot < 0) throw UsageError(where + "bad slot");
          if (slots.size() <= static_cast<std::size_t>(l.slot)) slots.resize(l.slot + 1, {-1, 0});
          slots[l.slot] = {ch, scale};
          break;
        case Op::concat:
          if (l.slot < 0 || static_cast<std::size_t>(l.slot) >= slots.size() || slots[l.slot].first < 0)
            throw UsageError(where + "slot not saved");
          if (slots[l.slot].second != scale) throw UsageError(where + "resolution mismatch");
          ch += slots[l.slot].first;
          break;
        case Op::global_avg:
        case Op::leaky_relu:
        case Op::sigmoid: break;
      }
    }
    if (ch != 1) throw UsageError("model: output must have 1 channel");
    if (!scalar_output() && scale != 0) throw UsageError("model: output resolution differs from input");
  }
};

namespace detail {

inline void push_norm(std::vector<LayerSpec>& L, Norm norm, int ch) {
  if (norm == Norm::affine) L.push_back({Op::affine, ch, ch});
  if (norm == Norm::instance) L.push_back({Op::instance_norm, ch, ch});
}

inline void push_block(std::vector<LayerSpec>& L, Norm norm, int in, int out) {
  L.push_back({Op::conv3, in, out});
  push_norm(L, norm, out);
  L.push_back({Op::leaky_relu});
}

}  // namespace detail

/// U-Net with `levels` resolutions, two conv blocks per level, channels
/// doubling per level, nearest upsampling and skip concatenation.
inline ModelSpec unet_spec(int in_channels, int levels, int base, Norm norm) {
  if (levels < 1 || base < 1) throw UsageError("unet: levels and base channels must be >= 1");
  ModelSpec s;
  s.kind = "unet";
  s.in_channels = in_channels;
  s.levels = levels;
  s.base_channels = base;
  s.norm = norm;
  auto& L = s.layers;
  int ch = in_channels;
  for (int l = 0; l < levels; ++l) {
    const int c = base << l;
    detail::push_block(L, norm, ch, c);
    detail::push_block(L, norm, c, c);
    ch = c;
    if (l + 1 < levels) {
      L.push_back({Op::save, 0, 0, l});
      L.push_back({Op::downsample2});
    }
  }
  for (int l = levels - 2; l >= 0; --l) {
    const int c = base << l;
    L.push_back({Op::upsample2});
    L.push_back({Op::concat, 0, 0, l});
    detail::push_block(L, norm, ch + c, c);
    detail::push_block(L, norm, c, c);
    ch = c;
  }
  L.push_back({Op::conv1, ch, 1});
  L.push_back({Op::sigmoid});
  s.validate();
  return s;
}

/// Convolutional encoder reduced to one probability: conv blocks with
/// downsampling, 1x1 conv to one channel, global average, sigmoid.
inline ModelSpec discriminator_spec(int in_channels, int levels, int base, Norm norm) {
  if (levels < 1 || base < 1) throw UsageError("discriminator: levels and base channels must be >= 1");
  ModelSpec s;
  s.kind = "discriminator";
  s.in_channels = in_channels;
  s.levels = levels;
  s.base_channels = base;
  s.norm = norm;
  auto& L = s.layers;
  int ch = in_channels;
  for (int l = 0; l < levels; ++l) {
    const int c = base << l;
    detail::push_block(L, norm, ch, c);
    ch = c;
    if (l + 1 < levels) L.push_back({Op::downsample2});
  }
  L.push_back({Op::conv1, ch, 1});
  L.push_back({Op::global_avg});
  L.push_back({Op::sigmoid});
  s.validate();
  return s;
}

inline nlohmann::json to_json(const ModelSpec& s) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : s.layers) {
    nlohmann::json j = {{"op", op_name(l.op)}};
    if (l.op == Op::conv3 || l.op == Op::conv1) {
      j["in"] = l.in;
      j["out"] = l.out;
    } else if (l.op == Op::affine || l.op == Op::instance_norm) {
      j["channels"] = l.in;
    } else if (l.op == Op::save || l.op == Op::concat) {
      j["slot"] = l.slot;
    }
    layers.push_back(j);
  }
  return {{"kind", s.kind},          {"in_channels", s.in_channels}, {"levels", s.levels},
          {"base_channels", s.base_channels}, {"norm", norm_name(s.norm)}, {"layers", layers}};
}

inline ModelSpec model_spec_from_json(const nlohmann::json& j) {
  try {
    ModelSpec s;
    s.kind = j.at("kind").get<std::string>();
    s.in_channels = j.at("in_channels").get<int>();
    s.levels = j.at("levels").get<int>();
    s.base_channels = j.at("base_channels").get<int>();
    s.norm = norm_from_name(j.at("norm").get<std::string>());
    for (const auto& lj : j.at("layers")) {
      LayerSpec l;
      l.op = op_from_name(lj.at("op").get<std::string>());
      if (lj.contains("in")) l.in = lj.at("in").get<int>();
      if (lj.contains("out")) l.out = lj.at("out").get<int>();
      if (lj.contains("channels")) l.in = l.out = lj.at("channels").get<int>();
      if (lj.contains("slot")) l.slot = lj.at("slot").get<int>();
      s.layers.push_back(l);
    }
    s.validate();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("model spec json: ") + e.what());
  } catch (const UsageError& e) {
    throw DataError(std::string("model spec json: ") + e.what());
  }
}

template <typename T>
struct Param {
  std::string name;
  std::vector<int> shape;
  std::vector<T> value, grad;
};

template <typename T>
T sigmoid_scalar(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
struct ForwardCache {
  std::vector<Tensor<T>> inputs;   // input of every layer, plus the final output
  std::vector<Tensor<T>> padded;   // conv3 layers: zero-padded input
  std::vector<std::vector<std::uint32_t>> argmax;
  std::vector<std::vector<T>> norm_inv_std;
  std::vector<int> concat_split;   // channels of the running tensor before concat
  const Tensor<T>& output() const { return inputs.back(); }
};

template <typename T>
class Network {
public:
  Network() = default;

  /// Parameters start at zero; call init() for the random initialization.
  explicit Network(ModelSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    param_of_layer_.assign(spec_.layers.size(), -1);
    for (std::size_t k = 0; k < spec_.layers.size(); ++k) {
      const LayerSpec& l = spec_.layers[k];
      const std::string base = "l" + std::to_string(k) + "." + op_name(l.op);
      switch (l.op) {
        case Op::conv3:
          param_of_layer_[k] = static_cast<int>(params_.size());
          add_param(base + ".w", {l.out, l.in, 3, 3, 3});
          add_param(base + ".b", {l.out});
          break;
        case Op::conv1:
          param_of_layer_[k] = static_cast<int>(params_.size());
          add_param(base + ".w", {l.out, l.in});
          add_param(base + ".b", {l.out});
          break;
        case Op::affine:
        case Op::instance_norm:
          param_of_layer_[k] = static_cast<int>(params_.size());
          add_param(base + ".scale", {l.in}, T(1));
          add_param(base + ".shift", {l.in});
          break;
        default: break;
      }
    }
  }

  const ModelSpec& spec() const { return spec_; }
  std::vector<Param<T>>& params() { return params_; }
  const std::vector<Param<T>>& params() const { return params_; }
  int threads = 1;

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  /// He fan-in initialization for conv weights; the last conv starts at zero
  /// so an untrained network outputs exactly 0.5.
  void init(Rng rng) {
    int last_conv = -1;
    for (std::size_t k = 0; k < spec_.layers.size(); ++k)
      if (spec_.layers[k].op == Op::conv3 || spec_.layers[k].op == Op::conv1) last_conv = static_cast<int>(k);
    for (std::size_t k = 0; k < spec_.layers.size(); ++k) {
      const LayerSpec& l = spec_.layers[k];
      if (l.op != Op::conv3 && l.op != Op::conv1) continue;
      Param<T>& w = params_[param_of_layer_[k]];
      Param<T>& b = params_[param_of_layer_[k] + 1];
      std::fill(b.value.begin(), b.value.end(), T(0));
      if (static_cast<int>(k) == last_conv) {
        std::fill(w.value.begin(), w.value.end(), T(0));
        continue;
      }
      const double fan_in = l.in * (l.op == Op::conv3 ? 27.0 : 1.0);
      const double sd = std::sqrt(2.0 / fan_in);
      for (auto& v : w.value) v = static_cast<T>(sd * rng.normal());
    }
  }

  void zero_grad() {
    for (auto& p : params_) std::fill(p.grad.begin(), p.grad.end(), T(0));
  }

  Tensor<T> forward(const Tensor<T>& input, ForwardCache<T>* cache = nullptr) const {
    if (input.c != spec_.in_channels)
      throw UsageError("model input has " + std::to_string(input.c) + " channels, expected " +
                       std::to_string(spec_.in_channels));
    const int m = spec_.spatial_multiple();
    if (input.nx % m || input.ny % m || input.nz % m)
      throw UsageError("model input " + input.shape_string() + " not divisible by " + std::to_string(m));
    ForwardCache<T> local;
    ForwardCache<T>& c = cache ? *cache : local;
    const std::size_t n = spec_.layers.size();
    c.inputs.assign(n + 1, Tensor<T>());
    c.padded.assign(n, Tensor<T>());
    c.argmax.assign(n, {});
    c.norm_inv_std.assign(n, {});
    c.concat_split.assign(n, 0);
    std::vector<Tensor<T>> slots;
    Tensor<T> x = input;
    for (std::size_t k = 0; k < n; ++k) {
      const LayerSpec& l = spec_.layers[k];
      Tensor<T> y;
      switch (l.op) {
        case Op::conv3: {
          Tensor<T> pad = kernels::pad1(x);
          kernels::conv3_forward_padded(pad, w(k), b(k), l.out, y, threads);
          if (cache) c.padded[k] = std::move(pad);
          break;
        }
        case Op::conv1: kernels::conv1_forward(x, w(k), b(k), l.out, y); break;
        case Op::leaky_relu:
          y = x;
          for (auto& v : y.data)
            if (v < 0) v *= static_cast<T>(kLeakySlope);
          break;
        case Op::affine:
          y = x;
          for (int ch = 0; ch < y.c; ++ch) {
            T* p = y.channel(ch);
            const T s = w(k)[ch], t = b(k)[ch];
            for (std::size_t v = 0; v < y.voxels(); ++v) p[v] = s * p[v] + t;
          }
          break;
        case Op::instance_norm: {
          y = x;
          auto& inv = c.norm_inv_std[k];
          inv.assign(y.c, T(0));
          const double nv = static_cast<double>(y.voxels());
          for (int ch = 0; ch < y.c; ++ch) {
            T* p = y.channel(ch);
            double mean = 0, var = 0;
            for (std::size_t v = 0; v < y.voxels(); ++v) mean += p[v];
            mean /= nv;
            for (std::size_t v = 0; v < y.voxels(); ++v) var += (p[v] - mean) * (p[v] - mean);
            var /= nv;
            const double is = 1.0 / std::sqrt(var + kNormEps);
            inv[ch] = static_cast<T>(is);
            const T s = w(k)[ch], t = b(k)[ch];
            for (std::size_t v = 0; v < y.voxels(); ++v)
              p[v] = s * static_cast<T>((p[v] - mean) * is) + t;
          }
          break;
        }
        case Op::downsample2: kernels::maxpool2_forward(x, y, c.argmax[k]); break;
        case Op::upsample2: kernels::upsample2_forward(x, y); break;
        case Op::save:
          if (slots.size() <= static_cast<std::size_t>(l.slot)) slots.resize(l.slot + 1);
          slots[l.slot] = x;
          y = x;
          break;
        case Op::concat: {
          const Tensor<T>& s = slots[l.slot];
          if (s.nx != x.nx || s.ny != x.ny || s.nz != x.nz)
            throw UsageError("concat: spatial mismatch " + s.shape_string() + " vs " + x.shape_string());
          y = Tensor<T>(x.c + s.c, x.nx, x.ny, x.nz);
          std::copy(x.data.begin(), x.data.end(), y.data.begin());
          std::copy(s.data.begin(), s.data.end(), y.data.begin() + x.size());
          c.concat_split[k] = x.c;
          break;
        }
        case Op::sigmoid:
          y = x;
          for (auto& v : y.data) v = sigmoid_scalar(v);
          break;
        case Op::global_avg:
          y = Tensor<T>(x.c, 1, 1, 1);
          for (int ch = 0; ch < x.c; ++ch) {
            double s = 0;
            const T* p = x.channel(ch);
            for (std::size_t v = 0; v < x.voxels(); ++v) s += p[v];
            y.data[ch] = static_cast<T>(s / static_cast<double>(x.voxels()));
          }
          break;
      }
      if (cache) c.inputs[k] = std::move(x);
      x = std::move(y);
    }
    if (cache) c.inputs[n] = x;
    return x;
  }

  /// Accumulates parameter gradients for dL/d(output) = gout. Returns the
  /// input gradient when requested.
  Tensor<T> backward(const ForwardCache<T>& c, const Tensor<T>& gout, bool want_input_grad = false) {
    const std::size_t n = spec_.layers.size();
    if (!gout.same_shape(c.inputs[n]))
      throw UsageError("backward: gradient shape " + gout.shape_string() + " != output " +
                       c.inputs[n].shape_string());
    std::vector<Tensor<T>> slot_grad;
    Tensor<T> g = gout;
    for (std::size_t k = n; k-- > 0;) {
      const LayerSpec& l = spec_.layers[k];
      const Tensor<T>& x = c.inputs[k];
      const bool need_dx = want_input_grad || k > 0;
      Tensor<T> dx;
      switch (l.op) {
        case Op::conv3:
          kernels::conv3_backward(c.padded[k], w(k), l.out, g, dw(k), db(k), need_dx ? &dx : nullptr, threads);
          break;
        case Op::conv1: kernels::conv1_backward(x, w(k), l.out, g, dw(k), db(k), need_dx ? &dx : nullptr); break;
        case Op::leaky_relu:
          dx = g;
          for (std::size_t v = 0; v < dx.size(); ++v)
            if (x.data[v] < 0) dx.data[v] *= static_cast<T>(kLeakySlope);
          break;
        case Op::affine:
          dx = g;
          for (int ch = 0; ch < x.c; ++ch) {
            const T* xp = x.channel(ch);
            const T* gp = g.channel(ch);
            T* dp = dx.channel(ch);
            T ds = 0, dt = 0;
            for (std::size_t v = 0; v < x.voxels(); ++v) {
              ds += gp[v] * xp[v];
              dt += gp[v];
              dp[v] = gp[v] * w(k)[ch];
            }
            dw(k)[ch] += ds;
            db(k)[ch] += dt;
          }
          break;
        case Op::instance_norm: {
          dx = Tensor<T>(x.c, x.nx, x.ny, x.nz);
          const double nv = static_cast<double>(x.voxels());
          for (int ch = 0; ch < x.c; ++ch) {
            const T* xp = x.channel(ch);
            const T* gp = g.channel(ch);
            T* dp = dx.channel(ch);
            double mean = 0;
            for (std::size_t v = 0; v < x.voxels(); ++v) mean += xp[v];
            mean /= nv;
            const double is = c.norm_inv_std[k][ch];
            const double s = w(k)[ch];
            double sum_g = 0, sum_gx = 0;
            for (std::size_t v = 0; v < x.voxels(); ++v) {
              const double xh = (xp[v] - mean) * is;
              sum_g += gp[v];
              sum_gx += gp[v] * xh;
            }
            dw(k)[ch] += static_cast<T>(sum_gx);
            db(k)[ch] += static_cast<T>(sum_g);
            for (std::size_t v = 0; v < x.voxels(); ++v) {
              const double xh = (xp[v] - mean) * is;
              dp[v] = static_cast<T>(s * is * (gp[v] - sum_g / nv - xh * sum_gx / nv));
            }
          }
          break;
        }
        case Op::downsample2: kernels::maxpool2_backward(x, c.argmax[k], g, dx); break;
        case Op::upsample2: kernels::upsample2_backward(g, dx); break;
        case Op::save:
          dx = std::move(g);
          if (static_cast<std::size_t>(l.slot) < slot_grad.size() && !slot_grad[l.slot].data.empty()) {
            const Tensor<T>& sg = slot_grad[l.slot];
            for (std::size_t v = 0; v < dx.size(); ++v) dx.data[v] += sg.data[v];
          }
          break;
        case Op::concat: {
          const int a = c.concat_split[k];
          dx = Tensor<T>(a, g.nx, g.ny, g.nz);
          std::copy_n(g.data.begin(), dx.size(), dx.data.begin());
          Tensor<T> sg(g.c - a, g.nx, g.ny, g.nz);
          std::copy(g.data.begin() + dx.size(), g.data.end(), sg.data.begin());
          if (slot_grad.size() <= static_cast<std::size_t>(l.slot)) slot_grad.resize(l.slot + 1);
          slot_grad[l.slot] = std::move(sg);
          break;
        }
        case Op::sigmoid: {
          const Tensor<T>& y = c.inputs[k + 1];
          dx = g;
          for (std::size_t v = 0; v < dx.size(); ++v) dx.data[v] *= y.data[v] * (T(1) - y.data[v]);
          break;
        }
        case Op::global_avg:
          dx = Tensor<T>(x.c, x.nx, x.ny, x.nz);
          for (int ch = 0; ch < x.c; ++ch) {
            const T v0 = g.data[ch] / static_cast<T>(x.voxels());
            std::fill_n(dx.channel(ch), x.voxels(), v0);
          }
          break;
      }
      g = std::move(dx);
    }
    return want_input_grad ? g : Tensor<T>();
  }

  /// Same spec and parameter values in another precision.
  template <typename U>
  Network<U> cast() const {
    Network<U> out(spec_);
    for (std::size_t p = 0; p < params_.size(); ++p)
      out.params()[p].value.assign(params_[p].value.begin(), params_[p].value.end());
    out.threads = threads;
    return out;
  }

private:
  void add_param(std::string name, std::vector<int> shape, T fill = T(0)) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    params_.push_back({std::move(name), std::move(shape), std::vector<T>(n, fill), std::vector<T>(n, T(0))});
  }
  const T* w(std::size_t k) const { return params_[param_of_layer_[k]].value.data(); }
  const T* b(std::size_t k) const { return params_[param_of_layer_[k] + 1].value.data(); }
  T* dw(std::size_t k) { return params_[param_of_layer_[k]].grad.data(); }
  T* db(std::size_t k) { return params_[param_of_layer_[k] + 1].grad.data(); }

  ModelSpec spec_;
  std::vector<Param<T>> params_;
  std::vector<int> param_of_layer_;
};

// ---------------------------------------------------------------- losses

/// Soft Dice loss -2 sum(y g) / (sum y + sum g) over the voxels where
/// mask != 0 (all voxels for an empty mask). Empty y and g give 0.
template <typename T>
double dice_loss(const Tensor<T>& y, const Tensor<T>& g, std::span<const std::uint8_t> mask = {}) {
  if (!y.same_shape(g)) throw UsageError("dice_loss: shape mismatch " + y.shape_string() + " vs " + g.shape_string());
  if (!mask.empty() && mask.size() != y.size()) throw UsageError("dice_loss: mask size mismatch");
  double syg = 0, sy = 0, sg = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (!mask.empty() && !mask[i]) continue;
    syg += static_cast<double>(y.data[i]) * g.data[i];
    sy += y.data[i];
    sg += g.data[i];
  }
  if (sy + sg == 0) return 0.0;
  return -2.0 * syg / (sy + sg);
}

template <typename T>
Tensor<T> dice_loss_backward(const Tensor<T>& y, const Tensor<T>& g, std::span<const std::uint8_t> mask = {}) {
  if (!y.same_shape(g)) throw UsageError("dice_loss_backward: shape mismatch");
  if (!mask.empty() && mask.size() != y.size()) throw UsageError("dice_loss_backward: mask size mismatch");
  double syg = 0, sy = 0, sg = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (!mask.empty() && !mask[i]) continue;
    syg += static_cast<double>(y.data[i]) * g.data[i];
    sy += y.data[i];
    sg += g.data[i];
  }
  const double den = sy + sg;
  if (den == 0) throw NumericalError("dice_loss_backward: sum(y) + sum(g) = 0");
  Tensor<T> d(y.c, y.nx, y.ny, y.nz);
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (!mask.empty() && !mask[i]) continue;
    d.data[i] = static_cast<T>(-(2.0 * g.data[i] * den - 2.0 * syg) / (den * den));
  }
  return d;
}

constexpr double kProbClamp = 1e-7;

struct AdversarialLosses {
  double adv = 0;        // mean log d_real + mean log(1 - d_fake)
  double disc = 0;       // -adv, minimized by the discriminator
  double gen = 0;        // generator adversarial term
  std::vector<double> disc_grad_real, disc_grad_fake;  // dL_disc / dd
  std::vector<double> gen_grad_fake;                   // dL_gen / dd_fake
};

/// Adversarial objective on discriminator probabilities. The
/// generator term is -mean log d_fake (non-saturating) or
/// mean log(1 - d_fake) (saturating). Probabilities are clamped to
/// [1e-7, 1 - 1e-7]; gradients are taken at the clamped value.
inline AdversarialLosses adversarial_losses(std::span<const double> d_real, std::span<const double> d_fake,
                                            bool non_saturating = true) {
  if (d_real.empty() || d_fake.empty()) throw UsageError("adversarial_losses: empty batch");
  auto clamp = [](double d) {
    if (!std::isfinite(d)) throw NumericalError("adversarial_losses: non-finite probability");
    return std::clamp(d, kProbClamp, 1.0 - kProbClamp);
  };
  AdversarialLosses r;
  const double nr = static_cast<double>(d_real.size()), nf = static_cast<double>(d_fake.size());
  double lr = 0, lf = 0, lg = 0;
  for (double d : d_real) {
    const double c = clamp(d);
    lr += std::log(c);
    r.disc_grad_real.push_back(-1.0 / (nr * c));
  }
  for (double d : d_fake) {
    const double c = clamp(d);
    lf += std::log(1.0 - c);
    r.disc_grad_fake.push_back(1.0 / (nf * (1.0 - c)));
    if (non_saturating) {
      lg -= std::log(c);
      r.gen_grad_fake.push_back(-1.0 / (nf * c));
    } else {
      lg += std::log(1.0 - c);
      r.gen_grad_fake.push_back(-1.0 / (nf * (1.0 - c)));
    }
  }
  r.adv = lr / nr + lf / nf;
  r.disc = -r.adv;
  r.gen = lg / nf;
  return r;
}

// ---------------------------------------------------------------- Adam

struct AdamConfig {
  double lr = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  AdamConfig config;
  long t = 0;
  std::vector<std::vector<T>> m, v;

  AdamState() = default;
  AdamState(const Network<T>& net, AdamConfig c) : config(c) {
    for (const auto& p : net.params()) {
      m.emplace_back(p.value.size(), T(0));
      v.emplace_back(p.value.size(), T(0));
    }
  }
};

/// One bias-corrected Adam update from the accumulated gradients.
template <typename T>
void adam_step(Network<T>& net, AdamState<T>& st) {
  auto& params = net.params();
  if (st.m.size() != params.size()) throw UsageError("adam_step: optimizer state does not match the network");
  for (const auto& p : params)
    for (T g : p.grad)
      if (!std::isfinite(static_cast<double>(g))) throw NumericalError("non-finite gradient in parameter " + p.name);
  ++st.t;
  const AdamConfig& c = st.config;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(st.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    auto& m = st.m[k];
    auto& v = st.v[k];
    if (m.size() != p.value.size()) throw UsageError("adam_step: moment shape mismatch for " + p.name);
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      m[i] = static_cast<T>(c.beta1 * m[i] + (1.0 - c.beta1) * g);
      v[i] = static_cast<T>(c.beta2 * v[i] + (1.0 - c.beta2) * g * g);
      const double mh = m[i] / bc1, vh = v[i] / bc2;
      p.value[i] = static_cast<T>(p.value[i] - c.lr * mh / (std::sqrt(vh) + c.eps));
    }
  }
}

// ---------------------------------------------------------------- gradient check

/// Loss on the network output: returns (value, dL/d output).
using LossFn = std::function<std::pair<double, Tensor<double>>(const Tensor<double>&)>;

struct GradCheckResult {
  double max_rel_error = 0;
  std::string worst;  // parameter name (or "input") of the worst entry
  std::size_t checked = 0;
};

/// Compares backprop gradients with central differences (h = 1e-4) for
/// every parameter entry, and for the input when `check_input` is set.
/// Relative error uses max(|a|, |b|, 1e-8) as the denominator.
inline GradCheckResult grad_check(Network<double>& net, const Tensor<double>& input, const LossFn& loss,
                                  bool check_input = false, double h = 1e-4) {
  GradCheckResult r;
  auto rel = [](double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); };
  auto note = [&](double e, const std::string& name) {
    ++r.checked;
    if (e > r.max_rel_error) {
      r.max_rel_error = e;
      r.worst = name;
    }
  };
  net.zero_grad();
  ForwardCache<double> cache;
  const Tensor<double> out = net.forward(input, &cache);
  const Tensor<double> din = net.backward(cache, loss(out).second, check_input);
  auto value_at = [&](const Tensor<double>& in) { return loss(net.forward(in)).first; };
  for (auto& p : net.params())
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double saved = p.value[i];
      p.value[i] = saved + h;
      const double up = value_at(input);
      p.value[i] = saved - h;
      const double down = value_at(input);
      p.value[i] = saved;
      note(rel(p.grad[i], (up - down) / (2 * h)), p.name);
    }
  if (check_input) {
    Tensor<double> x = input;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double saved = x.data[i];
      x.data[i] = saved + h;
      const double up = value_at(x);
      x.data[i] = saved - h;
      const double down = value_at(x);
      x.data[i] = saved;
      note(rel(din.data[i], (up - down) / (2 * h)), "input");
    }
  }
  return r;
}

// ---------------------------------------------------------------- checkpoints

namespace detail {

constexpr char kCheckpointMagic[8] = {'T', 'L', 'C', 'K', 'P', 'T', '0', '1'};

inline std::uint64_t fnv1a64(std::span<const char> bytes, std::uint64_t h = 0xcbf29ce484222325ull) {
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int k = 0; k < 8; ++k) out.push_back(static_cast<char>(v >> (8 * k)));
}

inline std::uint64_t get_u64(const std::string& in, std::size_t at) {
  std::uint64_t v = 0;
  for (int k = 0; k < 8; ++k) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + k])) << (8 * k);
  return v;
}

}  // namespace detail

/// Serializes spec + parameters: magic, u64 header length, JSON header,
/// u64 blob length, little-endian float32 blob, u64 FNV-1a of header+blob.
template <typename T>
std::string checkpoint_bytes(const Network<T>& net, const nlohmann::json& meta = nlohmann::json::object()) {
  nlohmann::json params = nlohmann::json::array();
  for (const auto& p : net.params()) params.push_back({{"name", p.name}, {"shape", p.shape}});
  const std::string header = nlohmann::json{{"spec", to_json(net.spec())}, {"params", params}, {"meta", meta}}.dump();
  std::string blob;
  blob.reserve(net.parameter_count() * 4);
  for (const auto& p : net.params())
    for (T v : p.value) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
      for (int k = 0; k < 4; ++k) blob.push_back(static_cast<char>(bits >> (8 * k)));
    }
  std::string out(detail::kCheckpointMagic, 8);
  detail::put_u64(out, header.size());
  out += header;
  detail::put_u64(out, blob.size());
  out += blob;
  const std::uint64_t sum = detail::fnv1a64(blob, detail::fnv1a64(header));
  detail::put_u64(out, sum);
  return out;
}

template <typename T>
void save_checkpoint(const std::string& path, const Network<T>& net, const nlohmann::json& meta = nlohmann::json::object()) {
  const std::string bytes = checkpoint_bytes(net, meta);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write checkpoint " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("failed writing checkpoint " + path);
}

struct LoadedCheckpoint {
  Network<float> net;
  nlohmann::json meta;
};

inline LoadedCheckpoint parse_checkpoint(const std::string& bytes, const std::string& what = "checkpoint") {
  auto fail = [&](const std::string& why) { return DataError(what + ": " + why); };
  if (bytes.size() < 8 + 8 || std::memcmp(bytes.data(), detail::kCheckpointMagic, 8) != 0)
    throw fail("not a treelab checkpoint");
  const std::uint64_t hlen = detail::get_u64(bytes, 8);
  if (hlen > bytes.size() - 16) throw fail("truncated header");
  const std::string header = bytes.substr(16, hlen);
  const std::size_t at = 16 + hlen;
  if (bytes.size() < at + 8) throw fail("truncated");
  const std::uint64_t blen = detail::get_u64(bytes, at);
  if (blen > bytes.size() - at - 8 || bytes.size() != at + 8 + blen + 8) throw fail("truncated or trailing bytes");
  const std::string blob = bytes.substr(at + 8, blen);
  if (detail::get_u64(bytes, at + 8 + blen) != detail::fnv1a64(blob, detail::fnv1a64(header)))
    throw fail("checksum mismatch");
  nlohmann::json hj;
  try {
    hj = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("bad header: ") + e.what());
  }
  LoadedCheckpoint out;
  out.net = Network<float>(model_spec_from_json(hj.at("spec")));
  out.meta = hj.value("meta", nlohmann::json::object());
  if (blen != out.net.parameter_count() * 4) throw fail("parameter blob size does not match the spec");
  std::size_t off = 0;
  for (auto& p : out.net.params())
    for (auto& v : p.value) {
      std::uint32_t bits = 0;
      for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(blob[off++])) << (8 * k);
      v = std::bit_cast<float>(bits);
      if (!std::isfinite(v)) throw fail("non-finite parameter in " + p.name);
    }
  return out;
}

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read checkpoint " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes, path);
}

}  // namespace treelab
