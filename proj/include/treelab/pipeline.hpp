#pragma once

// The label-refinement workflow: base segmentation network, synthetic
// error pool, label appearance network (adversarial), refinement network,
// evaluation, semi-supervised pseudo labels and the error-rate grid.

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "treelab/config.hpp"
#include "treelab/errorsynth.hpp"
#include "treelab/graph_io.hpp"
#include "treelab/metrics.hpp"
#include "treelab/mhd.hpp"
#include "treelab/model.hpp"
#include "treelab/patches.hpp"
#include "treelab/phantom.hpp"

namespace treelab {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- config

enum class RefineMode { lr, lr_syn_init, lr_syn, lr_syn_lasn };

inline const char* mode_name(RefineMode m) {
  switch (m) {
    case RefineMode::lr: return "LR";
    case RefineMode::lr_syn_init: return "LR+Syn(init)";
    case RefineMode::lr_syn: return "LR+Syn";
    case RefineMode::lr_syn_lasn: return "LR+Syn+LASN";
  }
  return "?";
}

inline RefineMode mode_from_name(const std::string& s) {
  for (RefineMode m : {RefineMode::lr, RefineMode::lr_syn_init, RefineMode::lr_syn, RefineMode::lr_syn_lasn})
    if (s == mode_name(m)) return m;
  throw UsageError("unknown refinement mode '" + s + "' (LR, LR+Syn(init), LR+Syn, LR+Syn+LASN)");
}

struct ModelConfig {
  int levels = 3;
  int base_channels = 8;
  Norm norm = Norm::instance;
};

struct DataConfig {
  // Either a directory of cases with explicit split lists...
  std::string dir;
  std::vector<std::string> train_ids, val_ids, test_ids, unlabeled_ids;
  // ...or phantoms generated on the fly.
  PhantomSpec phantom;
  int n_train = 8, n_val = 2, n_test = 4, n_unlabeled = 0;
  std::optional<std::uint64_t> seed;  // defaults to the master seed
};

/// Learning rate at `step` (1-based) of `steps`: constant, or polynomial
/// decay (power 0.9) from the initial rate.
struct LrSchedule {
  double initial = 1e-2;
  bool poly = true;

  double at(int step, int steps) const {
    if (!poly || steps <= 0) return initial;
    return initial * std::pow(1.0 - static_cast<double>(step - 1) / steps, 0.9);
  }
};

struct StepsConfig {
  int base = 2000;
  int lasn = 1000;
  int refine = 2000;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  DataConfig data;
  ModelConfig model;
  ModelConfig lasn_model;
  ModelConfig discriminator;
  int patch = 32;
  StepsConfig steps;
  int val_every = 250;
  double learning_rate = 1e-2;
  bool lr_poly = true;
  double lambda = 0.01;
  double threshold = 0.5;
  double mix_ratio = 0.5;
  double overlap = 0.5;
  bool non_saturating = true;
  RefineMode mode = RefineMode::lr_syn_lasn;
  ErrorParams errors = AirwayErrorParams{0.5, 0.5};
  int syn_per_case = 8;
  AugmentFlags augment;
  std::optional<float> image_pad;  // defaults to the phantom background
  int threads = 1;
  bool fidelity = false;

  LrSchedule schedule() const { return {learning_rate, lr_poly}; }

  float pad_value() const { return image_pad ? *image_pad : static_cast<float>(data.phantom.background_intensity); }

  /// Full-size options: 5 levels, 16 channels, rotations and scaling.
  void apply_fidelity() {
    fidelity = true;
    for (ModelConfig* m : {&model, &lasn_model}) *m = {5, 16, Norm::instance};
    discriminator.norm = Norm::instance;
    augment.rotate = augment.scale = true;
  }

  void validate() const {
    if (patch < 1) throw UsageError("config: patch must be >= 1");
    for (const ModelConfig* m : {&model, &lasn_model, &discriminator}) {
      if (m->levels < 1 || m->base_channels < 1) throw UsageError("config: model levels and channels must be >= 1");
      if (m != &discriminator && patch % (1 << (m->levels - 1)))
        throw UsageError("config: patch " + std::to_string(patch) + " not divisible by 2^(levels-1)");
    }
    if (patch % (1 << (discriminator.levels - 1))) throw UsageError("config: patch not divisible for the discriminator");
    if (steps.base < 0 || steps.lasn < 0 || steps.refine < 0) throw UsageError("config: steps must be >= 0");
    if (val_every < 1) throw UsageError("config: val_every must be >= 1");
    if (!(learning_rate > 0)) throw UsageError("config: learning_rate must be > 0");
    if (!(lambda >= 0)) throw UsageError("config: lambda must be >= 0");
    if (!(threshold > 0 && threshold < 1)) throw UsageError("config: threshold must lie in (0, 1)");
    if (!(mix_ratio >= 0 && mix_ratio <= 1)) throw UsageError("config: mix_ratio must lie in [0, 1]");
    if (!(overlap >= 0 && overlap < 1)) throw UsageError("config: overlap must lie in [0, 1)");
    if (syn_per_case < 1) throw UsageError("config: syn_per_case must be >= 1");
    if (threads < 1) throw UsageError("config: threads must be >= 1");
    std::visit([](const auto& e) { e.validate(); }, errors);
    if (data.dir.empty()) {
      data.phantom.validate();
      if (data.n_train < 1 || data.n_val < 0 || data.n_test < 0 || data.n_unlabeled < 0)
        throw UsageError("config: need >= 1 training case and non-negative split sizes");
    } else {
      if (data.train_ids.empty()) throw UsageError("config: data.train is empty");
      std::set<std::string> seen;
      for (const auto* ids : {&data.train_ids, &data.val_ids, &data.test_ids, &data.unlabeled_ids})
        for (const auto& id : *ids)
          if (!seen.insert(id).second) throw UsageError("config: case '" + id + "' appears in more than one split");
    }
  }
};

inline ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig m, const std::string& ctx) {
  ObjectReader r(j, ctx);
  std::string norm = norm_name(m.norm);
  r.optional("levels", m.levels);
  r.optional("base_channels", m.base_channels);
  r.optional("norm", norm);
  r.finish();
  m.norm = norm_from_name(norm);
  return m;
}

inline nlohmann::json to_json(const ModelConfig& m) {
  return {{"levels", m.levels}, {"base_channels", m.base_channels}, {"norm", norm_name(m.norm)}};
}

inline ErrorParams error_params_from_json(const nlohmann::json& j) {
  ObjectReader r(j, "errors");
  std::string type = "airway";
  r.optional("type", type);
  if (type == "airway") {
    AirwayErrorParams p;
    std::vector<int> excluded(p.excluded_generations.begin(), p.excluded_generations.end());
    r.optional("max_rate_terminal", p.max_rate_terminal);
    r.optional("max_rate_discontinuity", p.max_rate_discontinuity);
    r.optional("min_gap_len_vox", p.min_gap_len_vox);
    r.optional("mask_width_factor", p.mask_width_factor);
    r.optional("excluded_generations", excluded);
    r.finish();
    p.excluded_generations = std::set<int>(excluded.begin(), excluded.end());
    p.validate();
    return p;
  }
  if (type == "vessel") {
    VesselErrorParams p;
    auto table = [&](const char* key, GapTable& t) {
      std::array<int, 3> v{t.max_gaps, t.min_len, t.max_len};
      r.optional(key, v);
      t = {v[0], v[1], v[2]};
    };
    r.optional("max_rate", p.max_rate);
    table("long", p.long_group);
    table("medium", p.medium_group);
    table("short", p.short_group);
    r.finish();
    p.validate();
    return p;
  }
  throw UsageError("errors: unknown type '" + type + "' (airway, vessel)");
}

inline nlohmann::json to_json(const ErrorParams& e) {
  if (const auto* a = std::get_if<AirwayErrorParams>(&e))
    return {{"type", "airway"},
            {"max_rate_terminal", a->max_rate_terminal},
            {"max_rate_discontinuity", a->max_rate_discontinuity},
            {"min_gap_len_vox", a->min_gap_len_vox},
            {"mask_width_factor", a->mask_width_factor},
            {"excluded_generations", std::vector<int>(a->excluded_generations.begin(), a->excluded_generations.end())}};
  const auto& v = std::get<VesselErrorParams>(e);
  auto t = [](const GapTable& g) { return std::array<int, 3>{g.max_gaps, g.min_len, g.max_len}; };
  return {{"type", "vessel"},
          {"max_rate", v.max_rate},
          {"long", t(v.long_group)},
          {"medium", t(v.medium_group)},
          {"short", t(v.short_group)}};
}

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  ObjectReader r(j, "config");
  r.optional("seed", c.seed);
  if (const auto* d = r.child("data")) {
    ObjectReader dr(*d, "config.data");
    if (dr.has("dir")) {
      dr.required("dir", c.data.dir);
      dr.required("train", c.data.train_ids);
      dr.optional("val", c.data.val_ids);
      dr.optional("test", c.data.test_ids);
      dr.optional("unlabeled", c.data.unlabeled_ids);
      if (const auto* p = dr.child("phantom")) c.data.phantom = phantom_spec_from_json(*p);
    } else {
      if (const auto* p = dr.child("phantom")) c.data.phantom = phantom_spec_from_json(*p);
      dr.optional("train", c.data.n_train);
      dr.optional("val", c.data.n_val);
      dr.optional("test", c.data.n_test);
      dr.optional("unlabeled", c.data.n_unlabeled);
      if (dr.has("seed")) {
        std::uint64_t s = 0;
        dr.optional("seed", s);
        c.data.seed = s;
      }
    }
    dr.finish();
  }
  if (const auto* m = r.child("model")) c.model = model_config_from_json(*m, c.model, "config.model");
  if (const auto* m = r.child("lasn_model")) c.lasn_model = model_config_from_json(*m, c.lasn_model, "config.lasn_model");
  if (const auto* m = r.child("discriminator"))
    c.discriminator = model_config_from_json(*m, c.discriminator, "config.discriminator");
  r.optional("patch", c.patch);
  if (const auto* s = r.child("steps")) {
    ObjectReader sr(*s, "config.steps");
    sr.optional("base", c.steps.base);
    sr.optional("lasn", c.steps.lasn);
    sr.optional("refine", c.steps.refine);
    sr.finish();
  }
  r.optional("val_every", c.val_every);
  r.optional("learning_rate", c.learning_rate);
  std::string schedule = c.lr_poly ? "poly" : "constant";
  r.optional("lr_schedule", schedule);
  if (schedule != "poly" && schedule != "constant") throw UsageError("config: lr_schedule must be poly or constant");
  c.lr_poly = schedule == "poly";
  r.optional("lambda", c.lambda);
  r.optional("threshold", c.threshold);
  r.optional("mix_ratio", c.mix_ratio);
  r.optional("overlap", c.overlap);
  std::string gen = c.non_saturating ? "non_saturating" : "saturating";
  r.optional("generator_loss", gen);
  if (gen != "non_saturating" && gen != "saturating")
    throw UsageError("config: generator_loss must be non_saturating or saturating");
  c.non_saturating = gen == "non_saturating";
  std::string mode = mode_name(c.mode);
  r.optional("mode", mode);
  c.mode = mode_from_name(mode);
  if (const auto* e = r.child("errors")) c.errors = error_params_from_json(*e);
  r.optional("syn_per_case", c.syn_per_case);
  if (const auto* a = r.child("augment")) {
    ObjectReader ar(*a, "config.augment");
    ar.optional("flip", c.augment.flip);
    ar.optional("rot90", c.augment.rot90);
    ar.optional("rotate", c.augment.rotate);
    ar.optional("scale", c.augment.scale);
    ar.optional("max_rotation_deg", c.augment.max_rotation_deg);
    ar.optional("scale_min", c.augment.scale_min);
    ar.optional("scale_max", c.augment.scale_max);
    ar.finish();
  }
  if (r.has("image_pad")) {
    float v = 0;
    r.optional("image_pad", v);
    c.image_pad = v;
  }
  r.optional("threads", c.threads);
  bool fidelity = false;
  r.optional("fidelity", fidelity);
  r.finish();
  if (fidelity) c.apply_fidelity();
  c.validate();
  return c;
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json data;
  if (!c.data.dir.empty()) {
    data = {{"dir", c.data.dir}, {"train", c.data.train_ids}, {"val", c.data.val_ids}, {"test", c.data.test_ids},
            {"unlabeled", c.data.unlabeled_ids}, {"phantom", to_json(c.data.phantom)}};
  } else {
    data = {{"phantom", to_json(c.data.phantom)}, {"train", c.data.n_train}, {"val", c.data.n_val},
            {"test", c.data.n_test}, {"unlabeled", c.data.n_unlabeled}};
    if (c.data.seed) data["seed"] = *c.data.seed;
  }
  nlohmann::json j = {
      {"seed", c.seed},
      {"data", data},
      {"model", to_json(c.model)},
      {"lasn_model", to_json(c.lasn_model)},
      {"discriminator", to_json(c.discriminator)},
      {"patch", c.patch},
      {"steps", {{"base", c.steps.base}, {"lasn", c.steps.lasn}, {"refine", c.steps.refine}}},
      {"val_every", c.val_every},
      {"learning_rate", c.learning_rate},
      {"lr_schedule", c.lr_poly ? "poly" : "constant"},
      {"lambda", c.lambda},
      {"threshold", c.threshold},
      {"mix_ratio", c.mix_ratio},
      {"overlap", c.overlap},
      {"generator_loss", c.non_saturating ? "non_saturating" : "saturating"},
      {"mode", mode_name(c.mode)},
      {"errors", to_json(c.errors)},
      {"syn_per_case", c.syn_per_case},
      {"augment",
       {{"flip", c.augment.flip},
        {"rot90", c.augment.rot90},
        {"rotate", c.augment.rotate},
        {"scale", c.augment.scale},
        {"max_rotation_deg", c.augment.max_rotation_deg},
        {"scale_min", c.augment.scale_min},
        {"scale_max", c.augment.scale_max}}},
      {"threads", c.threads}};
  if (c.image_pad) j["image_pad"] = *c.image_pad;
  // Fidelity settings are already expanded into the fields above.
  return j;
}

inline ExperimentConfig load_experiment_config(const fs::path& path) {
  try {
    return experiment_config_from_json(read_json(path));
  } catch (const DataError& e) {
    throw UsageError(e.what());
  }
}

// ---------------------------------------------------------------- data

struct Case {
  std::string id;
  ScalarVolume image;
  BinaryMask gt, centerline, bounds;
  CenterlineGraph graph;
  bool labeled = true;
};

struct Dataset {
  std::vector<Case> train, val, test, unlabeled;
};

inline Case case_from_phantom(std::string id, const PhantomSample& p) {
  return {std::move(id), p.image, p.gt_mask, p.gt_centerline, p.bounding_mask, p.graph, true};
}

inline std::uint64_t phantom_case_seed(std::uint64_t data_seed, int index) {
  return mix64(data_seed ^ mix64(static_cast<std::uint64_t>(index) + 0x1000));
}

inline void write_case(const Case& c, const fs::path& dir) {
  fs::create_directories(dir);
  write_mhd(c.image, dir / "image.mhd", ElementType::float32);
  write_mhd(c.bounds, dir / "bounds.mhd");
  if (c.labeled) {
    write_mhd(c.gt, dir / "gt.mhd");
    write_mhd(c.centerline, dir / "centerline.mhd");
    write_graph(c.graph, dir / "graph.json");
  }
}

inline Case read_case(const fs::path& dir, std::string id, bool labeled) {
  Case c;
  c.id = std::move(id);
  c.labeled = labeled;
  c.image = read_mhd(dir / "image.mhd");
  c.bounds = read_mask(dir / "bounds.mhd");
  require_same_dims(c.image, c.bounds, "case bounds");
  if (labeled) {
    c.gt = read_mask(dir / "gt.mhd");
    c.centerline = read_mask(dir / "centerline.mhd");
    c.graph = read_graph(dir / "graph.json");
    require_same_dims(c.image, c.gt, "case gt");
    require_same_dims(c.image, c.centerline, "case centerline");
    if (!is_subset(c.centerline, c.gt)) throw DataError("case " + c.id + ": centerline not inside gt");
  }
  return c;
}

inline Dataset load_dataset(const ExperimentConfig& cfg) {
  Dataset ds;
  if (!cfg.data.dir.empty()) {
    const fs::path root = cfg.data.dir;
    for (const auto& id : cfg.data.train_ids) ds.train.push_back(read_case(root / id, id, true));
    for (const auto& id : cfg.data.val_ids) ds.val.push_back(read_case(root / id, id, true));
    for (const auto& id : cfg.data.test_ids) ds.test.push_back(read_case(root / id, id, true));
    for (const auto& id : cfg.data.unlabeled_ids) ds.unlabeled.push_back(read_case(root / id, id, false));
    return ds;
  }
  const std::uint64_t data_seed = cfg.data.seed.value_or(cfg.seed);
  int index = 0;
  auto make = [&](std::vector<Case>& out, int n, const char* prefix, bool labeled) {
    for (int k = 0; k < n; ++k, ++index) {
      PhantomSpec s = cfg.data.phantom;
      s.seed = phantom_case_seed(data_seed, index);
      char id[32];
      std::snprintf(id, sizeof id, "%s%03d", prefix, k);
      out.push_back(case_from_phantom(id, generate_tree(s)));
      out.back().labeled = labeled;
    }
  };
  make(ds.train, cfg.data.n_train, "train", true);
  make(ds.val, cfg.data.n_val, "val", true);
  make(ds.test, cfg.data.n_test, "test", true);
  make(ds.unlabeled, cfg.data.n_unlabeled, "unlabeled", false);
  return ds;
}

inline Voxel root_hint(const CenterlineGraph& g) {
  return g.nodes.empty() ? Voxel{0, 0, 0} : g.nodes[static_cast<std::size_t>(g.root)].xyz;
}

/// First foreground voxel in storage order (lowest z), used as the root
/// hint when no reference graph exists.
inline Voxel first_voxel(const BinaryMask& m) {
  for (std::size_t i = 0; i < m.size(); ++i)
    if (m[i]) return m.dims().voxel(i);
  return {0, 0, 0};
}

// ---------------------------------------------------------------- run log

class RunLog {
public:
  RunLog() = default;
  explicit RunLog(const fs::path& path) : out_(path, std::ios::app) {
    if (!out_) throw DataError("cannot open run log " + path.string());
  }
  void write(const nlohmann::json& j) {
    if (out_.is_open()) out_ << j.dump() << '\n';
  }

private:
  std::ofstream out_;
};

// ---------------------------------------------------------------- stages

/// Stream ids for Rng::split so that every stage has its own randomness.
enum Stream : std::uint64_t {
  kBaseInit = 1,
  kBaseSample = 2,
  kSynPool = 3,
  kLasnInitG = 4,
  kLasnInitD = 5,
  kLasnSample = 6,
  kRefineInit = 7,
  kRefineSample = 8,
  kGapProbe = 9,
  kSemiSyn = 10,
  kSemiInit = 11,
  kSemiSample = 12,
};

inline Network<float> make_network(const ModelSpec& spec, Rng rng, int threads) {
  Network<float> net(spec);
  net.init(rng);
  net.threads = threads;
  return net;
}

inline ScalarVolume mask_to_scalar(const BinaryMask& m) { return to_scalar(m); }

inline BinaryMask threshold_in(const ScalarVolume& y, double t, const BinaryMask& bounds) {
  return mask_and(threshold(y, t), bounds);
}

struct StageResult {
  Network<float> net;
  double best_val = -1;
  int best_step = -1;
};

using Sampler = std::function<Patch(Rng&)>;
using Validator = std::function<double(const Network<float>&)>;

/// Adam on the masked Dice loss over sampled patches; keeps the parameters
/// with the best validation score (earliest on ties).
inline StageResult train_segmenter(const std::string& stage, Network<float> net, int steps, int val_every,
                                   LrSchedule lr, const AugmentFlags& aug, Rng rng, const Sampler& sample,
                                   const Validator& validate, RunLog& log) {
  AdamState<float> opt(net, {.lr = lr.initial});
  StageResult r;
  r.net = net;
  auto check = [&](int step) {
    if (!validate) return;
    const double v = validate(net);
    log.write({{"stage", stage}, {"step", step}, {"val_dice", v}});
    if (v > r.best_val) {
      r.best_val = v;
      r.best_step = step;
      r.net = net;
    }
  };
  if (steps == 0) check(0);
  for (int step = 1; step <= steps; ++step) {
    const Patch p = augment(sample(rng), rng, aug);
    const Tensor<float> x = to_tensor<float>(p);
    const Tensor<float> g = to_tensor<float>({&p.target});
    ForwardCache<float> cache;
    const Tensor<float> y = net.forward(x, &cache);
    const std::span<const std::uint8_t> mask = p.mask.data();
    const double loss = dice_loss(y, g, mask);
    if (!std::isfinite(loss)) throw NumericalError(stage + ": non-finite loss at step " + std::to_string(step));
    double den = 0;
    for (std::size_t i = 0; i < y.size(); ++i)
      if (mask[i]) den += y.data[i] + g.data[i];
    if (den > 0) {
      net.zero_grad();
      net.backward(cache, dice_loss_backward(y, g, mask));
      opt.config.lr = lr.at(step, steps);
      adam_step(net, opt);
    }
    log.write({{"stage", stage}, {"step", step}, {"loss", loss}});
    if (step % val_every == 0 || step == steps) check(step);
  }
  if (!validate) r.net = net;
  return r;
}

inline Sampler image_label_sampler(const std::vector<Case>& cases, int patch, float pad) {
  return [&cases, patch, pad](Rng& rng) {
    const Case& c = cases[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(cases.size()) - 1))];
    const Voxel off = random_offset(c.image.dims(), patch, rng);
    Patch p;
    p.channels.push_back(crop(c.image, off, patch, pad));
    p.target = crop(mask_to_scalar(c.gt), off, patch, 0.0f);
    p.mask = crop(c.bounds, off, patch, std::uint8_t{0});
    p.offset = off;
    return p;
  };
}

/// n random training patches (image, gt, bounds) from one case.
inline std::vector<Patch> extract_patches(const Case& c, int patch, Rng& rng, int n, float pad = 0.0f) {
  std::vector<Case> one{c};
  const Sampler s = image_label_sampler(one, patch, pad);
  std::vector<Patch> out;
  for (int k = 0; k < n; ++k) out.push_back(s(rng));
  return out;
}

struct Prediction {
  ScalarVolume y;
  BinaryMask x;
};

inline Prediction predict_initial(const Network<float>& f1, const Case& c, const ExperimentConfig& cfg) {
  Prediction p;
  p.y = sliding_window_infer(f1, {&c.image}, cfg.patch, cfg.overlap, {cfg.pad_value()});
  p.x = threshold_in(p.y, cfg.threshold, c.bounds);
  return p;
}

inline Prediction refine(const Network<float>& f2, const Case& c, const ScalarVolume& label,
                         const ExperimentConfig& cfg) {
  Prediction p;
  p.y = sliding_window_infer(f2, {&c.image, &label}, cfg.patch, cfg.overlap, {cfg.pad_value(), 0.0f});
  p.x = threshold_in(p.y, cfg.threshold, c.bounds);
  return p;
}

inline double mean_dice(const std::vector<Case>& cases, const std::function<BinaryMask(const Case&)>& predict) {
  if (cases.empty()) return 0.0;
  double s = 0;
  for (const auto& c : cases) s += dice_coeff(predict(c), c.gt);
  return s / static_cast<double>(cases.size());
}

inline StageResult train_base(const ExperimentConfig& cfg, const Dataset& ds, RunLog& log) {
  const Rng master(cfg.seed);
  Network<float> net = make_network(unet_spec(1, cfg.model.levels, cfg.model.base_channels, cfg.model.norm),
                                    master.split(kBaseInit), cfg.threads);
  Validator val;
  if (!ds.val.empty())
    val = [&](const Network<float>& f) {
      return mean_dice(ds.val, [&](const Case& c) { return predict_initial(f, c, cfg).x; });
    };
  return train_segmenter("base", std::move(net), cfg.steps.base, cfg.val_every, cfg.schedule(), cfg.augment,
                         master.split(kBaseSample), image_label_sampler(ds.train, cfg.patch, cfg.pad_value()), val,
                         log);
}

/// One corrupted copy of a training label.
struct SynVariant {
  std::size_t case_index = 0;
  int k = 0;
  BinaryMask x_syn;
  ScalarVolume x_a;  // filled by apply_lasn for LR+Syn+LASN
  CorruptionRecord record;
};

/// Corrupts `label` with the configured errors. In vessel mode the input
/// to corrupt() is the centerline of `label`.
inline Corruption corrupt_label(const BinaryMask& label, const BinaryMask& centerline, const CenterlineGraph& g,
                                const ErrorParams& errors, Rng& rng) {
  if (std::holds_alternative<VesselErrorParams>(errors)) return corrupt(centerline, g, errors, rng);
  return corrupt(label, g, errors, rng);
}

/// `syn_per_case` corrupted variants per case. Labels come from `labels`
/// (gt, x1 or pseudo labels) with graphs from `graphs`; a case whose graph
/// is missing gets no variants.
inline std::vector<SynVariant> build_syn_pool(const std::vector<const BinaryMask*>& labels,
                                              const std::vector<const BinaryMask*>& centerlines,
                                              const std::vector<const CenterlineGraph*>& graphs,
                                              const ExperimentConfig& cfg, Rng stream) {
  std::vector<SynVariant> pool;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!graphs[i]) continue;
    for (int k = 0; k < cfg.syn_per_case; ++k) {
      Rng rng = stream.split(i * 1000003u + static_cast<std::uint64_t>(k));
      Corruption c = corrupt_label(*labels[i], *centerlines[i], *graphs[i], cfg.errors, rng);
      pool.push_back({i, k, std::move(c.label), {}, std::move(c.record)});
    }
  }
  return pool;
}

struct LasnResult {
  Network<float> fa, d;
};

/// Alternating adversarial training: D separates real initial
/// segmentations from f_a(x_syn); f_a minimizes the generator term plus
/// lambda * Dice(f_a(x_syn), x_syn).
inline LasnResult train_lasn(const std::vector<const BinaryMask*>& syn, const std::vector<const BinaryMask*>& real,
                             const ExperimentConfig& cfg, RunLog& log) {
  if (syn.empty() || real.empty()) throw DataError("train_lasn: need synthetic and real labels");
  const Rng master(cfg.seed);
  LasnResult r{make_network(unet_spec(1, cfg.lasn_model.levels, cfg.lasn_model.base_channels, cfg.lasn_model.norm),
                            master.split(kLasnInitG), cfg.threads),
               make_network(discriminator_spec(1, cfg.discriminator.levels, cfg.discriminator.base_channels,
                                               cfg.discriminator.norm),
                            master.split(kLasnInitD), cfg.threads)};
  AdamState<float> opt_g(r.fa, {.lr = cfg.learning_rate}), opt_d(r.d, {.lr = cfg.learning_rate});
  Rng rng = master.split(kLasnSample);
  auto draw = [&](const std::vector<const BinaryMask*>& set) {
    const BinaryMask& m = *set[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(set.size()) - 1))];
    Patch p;
    p.target = crop(mask_to_scalar(m), random_offset(m.dims(), cfg.patch, rng), cfg.patch, 0.0f);
    p.mask = BinaryMask(p.target.dims(), Spacing{}, std::uint8_t{1});
    p = augment(std::move(p), rng, cfg.augment);
    return to_tensor<float>({&p.target});
  };
  auto prob = [](const Tensor<float>& t) { return std::vector<double>{t.data[0]}; };
  for (int step = 1; step <= cfg.steps.lasn; ++step) {
    const Tensor<float> x_real = draw(real);
    const Tensor<float> x_syn = draw(syn);
    ForwardCache<float> cg;
    const Tensor<float> x_a = r.fa.forward(x_syn, &cg);

    // Discriminator step.
    ForwardCache<float> cr, cf;
    const Tensor<float> d_real = r.d.forward(x_real, &cr);
    const Tensor<float> d_fake = r.d.forward(x_a, &cf);
    const AdversarialLosses ld = adversarial_losses(prob(d_real), prob(d_fake), cfg.non_saturating);
    r.d.zero_grad();
    r.d.backward(cr, Tensor<float>(1, 1, 1, 1, static_cast<float>(ld.disc_grad_real[0])));
    r.d.backward(cf, Tensor<float>(1, 1, 1, 1, static_cast<float>(ld.disc_grad_fake[0])));
    opt_d.config.lr = opt_g.config.lr = cfg.schedule().at(step, cfg.steps.lasn);
    adam_step(r.d, opt_d);

    // Generator step against the updated discriminator.
    ForwardCache<float> cf2;
    const Tensor<float> d_fake2 = r.d.forward(x_a, &cf2);
    const AdversarialLosses lg = adversarial_losses(prob(d_real), prob(d_fake2), cfg.non_saturating);
    Tensor<float> grad = r.d.backward(cf2, Tensor<float>(1, 1, 1, 1, static_cast<float>(lg.gen_grad_fake[0])), true);
    r.d.zero_grad();
    const double identity = dice_loss(x_a, x_syn);
    if (cfg.lambda > 0) {
      const Tensor<float> gi = dice_loss_backward(x_a, x_syn);
      for (std::size_t i = 0; i < grad.size(); ++i) grad.data[i] += static_cast<float>(cfg.lambda) * gi.data[i];
    }
    const double loss_g = lg.gen + cfg.lambda * identity;
    if (!std::isfinite(ld.disc) || !std::isfinite(loss_g))
      throw NumericalError("lasn: non-finite loss at step " + std::to_string(step));
    r.fa.zero_grad();
    r.fa.backward(cg, grad);
    adam_step(r.fa, opt_g);
    log.write({{"stage", "lasn"},
               {"step", step},
               {"adv", ld.adv},
               {"loss_d", ld.disc},
               {"loss_g", loss_g},
               {"identity", identity},
               {"d_real", d_real.data[0]},
               {"d_fake", d_fake.data[0]}});
  }
  return r;
}

inline ScalarVolume apply_lasn(const Network<float>& fa, const BinaryMask& x_syn, const ExperimentConfig& cfg) {
  const ScalarVolume s = mask_to_scalar(x_syn);
  return sliding_window_infer(fa, {&s}, cfg.patch, cfg.overlap, {0.0f});
}

/// Source of the label channel for one refinement sample.
enum class LabelSource { initial, synthetic };

/// Draws refinement samples: a case, then x~ from x1 or (with probability
/// mix_ratio) from that case's synthetic variants.
class RefinementSampler {
public:
  RefinementSampler(const std::vector<const Case*>& cases, const std::vector<const ScalarVolume*>& x1,
                    const std::vector<SynVariant>& pool, RefineMode mode, const ExperimentConfig& cfg)
      : cases_(cases), x1_(x1), mode_(mode), cfg_(cfg) {
    if (cases.size() != x1.size()) throw DataError("refiner: every case needs an initial segmentation");
    by_case_.resize(cases.size());
    for (const auto& v : pool) {
      if (v.case_index >= cases.size()) throw DataError("refiner: synthetic variant for unknown case");
      if (mode == RefineMode::lr_syn_lasn && v.x_a.empty()) throw DataError("refiner: missing LASN output");
      by_case_[v.case_index].push_back(&v);
    }
  }

  std::pair<Patch, LabelSource> sample(Rng& rng) const {
    const auto ci = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(cases_.size()) - 1));
    const Case& c = *cases_[ci];
    const bool synthetic_possible = mode_ != RefineMode::lr && !by_case_[ci].empty();
    const bool synthetic = mode_ != RefineMode::lr && rng.bernoulli(cfg_.mix_ratio) && synthetic_possible;
    ScalarVolume label_storage;
    const ScalarVolume* label = x1_[ci];
    if (synthetic) {
      const auto& variants = by_case_[ci];
      const SynVariant& v = *variants[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(variants.size()) - 1))];
      if (mode_ == RefineMode::lr_syn_lasn) {
        label = &v.x_a;
      } else {
        label_storage = mask_to_scalar(v.x_syn);
        label = &label_storage;
      }
    }
    const Voxel off = random_offset(c.image.dims(), cfg_.patch, rng);
    Patch p;
    p.channels.push_back(crop(c.image, off, cfg_.patch, cfg_.pad_value()));
    p.channels.push_back(crop(*label, off, cfg_.patch, 0.0f));
    p.target = crop(mask_to_scalar(c.gt), off, cfg_.patch, 0.0f);
    p.mask = crop(c.bounds, off, cfg_.patch, std::uint8_t{0});
    p.offset = off;
    return {std::move(p), synthetic ? LabelSource::synthetic : LabelSource::initial};
  }

private:
  std::vector<const Case*> cases_;
  std::vector<const ScalarVolume*> x1_;
  std::vector<std::vector<const SynVariant*>> by_case_;
  RefineMode mode_;
  const ExperimentConfig& cfg_;
};

inline StageResult train_refiner(const ExperimentConfig& cfg, const RefinementSampler& sampler,
                                 const std::vector<Case>& val, const std::map<std::string, ScalarVolume>& x1_val,
                                 RunLog& log, std::uint64_t init_stream = kRefineInit,
                                 std::uint64_t sample_stream = kRefineSample, const std::string& stage = "refine") {
  const Rng master(cfg.seed);
  Network<float> net = make_network(unet_spec(2, cfg.model.levels, cfg.model.base_channels, cfg.model.norm),
                                    master.split(init_stream), cfg.threads);
  Validator vfn;
  if (!val.empty())
    vfn = [&](const Network<float>& f) {
      return mean_dice(val, [&](const Case& c) { return refine(f, c, x1_val.at(c.id), cfg).x; });
    };
  Sampler s = [&sampler](Rng& rng) { return sampler.sample(rng).first; };
  return train_segmenter(stage, std::move(net), cfg.steps.refine, cfg.val_every, cfg.schedule(), cfg.augment,
                         master.split(sample_stream), s, vfn, log);
}

// ---------------------------------------------------------------- evaluation

inline MetricsReport evaluate_split(const std::vector<Case>& cases, const std::map<std::string, BinaryMask>& pred) {
  MetricsReport r;
  for (const auto& c : cases) r.cases.push_back(evaluate_case(pred.at(c.id), c.gt, c.centerline, c.id));
  return r;
}

inline nlohmann::json paired_tests(const MetricsReport& a, const MetricsReport& b) {
  nlohmann::json out = nlohmann::json::object();
  for (const char* m : {"dice", "completeness", "leakage", "gaps"}) {
    try {
      const TTestResult t = paired_ttest(a.column(m), b.column(m));
      out[m] = {{"t", t.t}, {"p", t.p}, {"df", t.df}};
    } catch (const Error& e) {
      out[m] = {{"error", e.what()}};
    }
  }
  return out;
}

/// Fraction of centerline voxels removed by gap-type errors (discontinuity
/// or vessel gap) that a refiner fed (I, corrupted gt) puts back.
struct GapRecovery {
  std::size_t removed = 0, recovered = 0;
  double fraction() const { return removed ? static_cast<double>(recovered) / static_cast<double>(removed) : 0.0; }
};

inline GapRecovery gap_recovery(const Network<float>& f2, const std::vector<Case>& cases, const ExperimentConfig& cfg,
                                Rng stream) {
  GapRecovery r;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const Case& c = cases[i];
    Rng rng = stream.split(i);
    const Corruption cor = corrupt_label(c.gt, c.centerline, c.graph, cfg.errors, rng);
    BinaryMask gaps(c.gt.dims());
    for (const auto& rem : cor.record.removals)
      if (rem.type == ErrorType::discontinuity || rem.type == ErrorType::vessel_gap) paint_runs(gaps, rem.runs);
    const BinaryMask target = mask_and(gaps, c.centerline);
    if (count(target) == 0) continue;
    const ScalarVolume label = mask_to_scalar(cor.label);
    const BinaryMask x = refine(f2, c, label, cfg).x;
    r.removed += count(target);
    r.recovered += count(mask_and(target, x));
  }
  return r;
}

// ---------------------------------------------------------------- full runs

struct PipelineResult {
  Network<float> f1, fa, d, f2;
  std::map<std::string, Prediction> initial;  // every case
  std::map<std::string, Prediction> refined;  // test cases
  std::vector<SynVariant> pool;
  MetricsReport base, final;
  GapRecovery gaps;
  nlohmann::json metrics;
};

struct PipelineOptions {
  bool write_predictions = true;
  bool write_records = true;
  bool verbose = false;
};

inline void note(const PipelineOptions& o, const std::string& msg) {
  if (o.verbose) std::cerr << "[treelab] " << msg << std::endl;
}

inline std::map<std::string, BinaryMask> x_of(const std::map<std::string, Prediction>& p) {
  std::map<std::string, BinaryMask> out;
  for (const auto& [id, v] : p) out.emplace(id, v.x);
  return out;
}

/// Synthetic pool for the training split according to the refinement
/// mode: corrupted gt, or corrupted x1 with graphs extracted from x1.
inline std::vector<SynVariant> mode_pool(const ExperimentConfig& cfg, const std::vector<Case>& train,
                                         const std::map<std::string, Prediction>& initial, RunLog& log) {
  std::vector<const BinaryMask*> labels, cls;
  std::vector<const CenterlineGraph*> graphs;
  std::vector<BinaryMask> x1_cl(train.size());
  std::vector<std::optional<CenterlineGraph>> x1_graphs(train.size());
  for (std::size_t i = 0; i < train.size(); ++i) {
    const Case& c = train[i];
    if (cfg.mode == RefineMode::lr_syn_init) {
      const BinaryMask& x1 = initial.at(c.id).x;
      labels.push_back(&x1);
      try {
        x1_graphs[i] = extract_centerline_graph(x1, root_hint(c.graph));
        x1_cl[i] = skeletonize(x1);
      } catch (const DataError& e) {
        log.write({{"stage", "synth"}, {"case", c.id}, {"warning", std::string("no graph for x1: ") + e.what()}});
      }
      cls.push_back(&x1_cl[i]);
      graphs.push_back(x1_graphs[i] ? &*x1_graphs[i] : nullptr);
    } else {
      labels.push_back(&c.gt);
      cls.push_back(&c.centerline);
      graphs.push_back(&c.graph);
    }
  }
  return build_syn_pool(labels, cls, graphs, cfg, Rng(cfg.seed).split(kSynPool));
}

/// Runs base training, error synthesis, LASN and refinement on `ds` and
/// evaluates base and refined predictions on the test split. Writes
/// checkpoints/, predictions/, records/, metrics.json and run_log.jsonl
/// under `out` when it is non-empty.
inline PipelineResult run_pipeline(const ExperimentConfig& cfg, const Dataset& ds, const fs::path& out,
                                   const PipelineOptions& opt = {}) {
  cfg.validate();
  if (!out.empty()) {
    fs::create_directories(out / "checkpoints");
    fs::remove(out / "run_log.jsonl");
  }
  RunLog log = out.empty() ? RunLog() : RunLog(out / "run_log.jsonl");
  PipelineResult res;

  note(opt, "training base network");
  const StageResult base = train_base(cfg, ds, log);
  res.f1 = base.net;

  note(opt, "initial segmentations");
  for (const auto* split : {&ds.train, &ds.val, &ds.test})
    for (const auto& c : *split) res.initial.emplace(c.id, predict_initial(res.f1, c, cfg));

  std::vector<const BinaryMask*> x1_train;
  for (const auto& c : ds.train) x1_train.push_back(&res.initial.at(c.id).x);

  if (cfg.mode != RefineMode::lr) {
    note(opt, "synthesizing errors");
    res.pool = mode_pool(cfg, ds.train, res.initial, log);
  }
  if (cfg.mode == RefineMode::lr_syn_lasn) {
    note(opt, "training label appearance network");
    std::vector<const BinaryMask*> syn;
    for (const auto& v : res.pool) syn.push_back(&v.x_syn);
    LasnResult lasn = train_lasn(syn, x1_train, cfg, log);
    res.fa = std::move(lasn.fa);
    res.d = std::move(lasn.d);
    for (auto& v : res.pool) v.x_a = apply_lasn(res.fa, v.x_syn, cfg);
  }

  note(opt, "training refinement network");
  std::map<std::string, ScalarVolume> x1_scalar;
  for (const auto& [id, p] : res.initial) x1_scalar.emplace(id, mask_to_scalar(p.x));
  std::vector<const Case*> train_cases;
  std::vector<const ScalarVolume*> train_x1;
  for (const auto& c : ds.train) {
    train_cases.push_back(&c);
    train_x1.push_back(&x1_scalar.at(c.id));
  }
  const RefinementSampler sampler(train_cases, train_x1, res.pool, cfg.mode, cfg);
  const StageResult ref = train_refiner(cfg, sampler, ds.val, x1_scalar, log);
  res.f2 = ref.net;

  note(opt, "evaluating");
  for (const auto& c : ds.test) res.refined.emplace(c.id, refine(res.f2, c, x1_scalar.at(c.id), cfg));
  res.base = evaluate_split(ds.test, x_of(res.initial));
  res.final = evaluate_split(ds.test, x_of(res.refined));
  res.gaps = gap_recovery(res.f2, ds.test, cfg, Rng(cfg.seed).split(kGapProbe));

  auto agg = [](const MetricsReport& r) { return to_json(r); };
  res.metrics = {{"mode", mode_name(cfg.mode)},
                 {"seed", cfg.seed},
                 {"base", agg(res.base)},
                 {"refined", agg(res.final)},
                 {"paired_ttest_base_vs_refined", res.base.cases.size() >= 2 ? paired_tests(res.base, res.final)
                                                                            : nlohmann::json(nullptr)},
                 {"gap_recovery",
                  {{"removed_centerline_voxels", res.gaps.removed},
                   {"recovered", res.gaps.recovered},
                   {"fraction", res.gaps.fraction()}}},
                 {"validation",
                  {{"base_best_dice", base.best_val},
                   {"base_best_step", base.best_step},
                   {"refine_best_dice", ref.best_val},
                   {"refine_best_step", ref.best_step}}}};

  if (!out.empty()) {
    save_checkpoint((out / "checkpoints" / "f1.ckpt").string(), res.f1, {{"stage", "base"}, {"best_step", base.best_step}});
    save_checkpoint((out / "checkpoints" / "f2.ckpt").string(), res.f2,
                    {{"stage", "refine"}, {"mode", mode_name(cfg.mode)}, {"best_step", ref.best_step}});
    if (cfg.mode == RefineMode::lr_syn_lasn) {
      save_checkpoint((out / "checkpoints" / "fa.ckpt").string(), res.fa, {{"stage", "lasn"}});
      save_checkpoint((out / "checkpoints" / "d.ckpt").string(), res.d, {{"stage", "lasn"}});
    }
    if (opt.write_predictions) {
      fs::create_directories(out / "predictions");
      for (const auto& c : ds.test) {
        const fs::path p = out / "predictions";
        write_mhd(res.initial.at(c.id).y, p / (c.id + "_y1.mhd"), ElementType::float32);
        write_mhd(res.initial.at(c.id).x, p / (c.id + "_x1.mhd"));
        write_mhd(res.refined.at(c.id).y, p / (c.id + "_y2.mhd"), ElementType::float32);
        write_mhd(res.refined.at(c.id).x, p / (c.id + "_x2.mhd"));
      }
    }
    if (opt.write_records && !res.pool.empty()) {
      fs::create_directories(out / "records");
      for (const auto& v : res.pool) {
        char name[64];
        std::snprintf(name, sizeof name, "%s_%02d.json", ds.train[v.case_index].id.c_str(), v.k);
        write_json(to_json(v.record), out / "records" / name);
      }
    }
    write_json(to_json(cfg), out / "config.json");
    write_json(res.metrics, out / "metrics.json");
  }
  return res;
}

struct SemiResult {
  Network<float> f2;
  MetricsReport supervised, semi;
  std::size_t pseudo_cases = 0, pseudo_without_graph = 0;
  nlohmann::json metrics;
};

/// Pseudo-labels the unlabeled cases with the trained pipeline, corrupts
/// them like ground truth, and trains a new refiner on labeled + pseudo
/// labeled cases.
inline SemiResult run_semi_supervised(const ExperimentConfig& cfg, const Dataset& ds, const PipelineResult& sup,
                                      const fs::path& out, const PipelineOptions& opt = {}) {
  SemiResult res;
  res.supervised = sup.final;
  if (ds.unlabeled.empty()) {
    note(opt, "no unlabeled cases; keeping the supervised refiner");
    res.f2 = sup.f2;
    res.semi = sup.final;
    res.metrics = {{"notice", "no unlabeled cases; supervised refiner returned unchanged"},
                   {"supervised", to_json(res.supervised)},
                   {"semi", to_json(res.semi)}};
    if (!out.empty()) write_json(res.metrics, out / "semi_metrics.json");
    return res;
  }
  if (!out.empty()) fs::create_directories(out / "checkpoints");
  RunLog log = out.empty() ? RunLog() : RunLog(out / "run_log.jsonl");

  note(opt, "pseudo labels");
  std::vector<Case> pseudo;
  std::map<std::string, ScalarVolume> x1_scalar;
  for (const auto& [id, p] : sup.initial) x1_scalar.emplace(id, mask_to_scalar(p.x));
  for (const auto& u : ds.unlabeled) {
    const Prediction x1 = predict_initial(sup.f1, u, cfg);
    x1_scalar.emplace(u.id, mask_to_scalar(x1.x));
    Case c = u;
    c.gt = refine(sup.f2, u, x1_scalar.at(u.id), cfg).x;
    c.centerline = skeletonize(c.gt);
    c.labeled = true;
    try {
      c.graph = extract_centerline_graph(c.gt, first_voxel(c.gt));
    } catch (const DataError& e) {
      c.graph = {};
      ++res.pseudo_without_graph;
      log.write({{"stage", "semi"}, {"case", u.id}, {"warning", std::string("no graph for pseudo label: ") + e.what()}});
    }
    pseudo.push_back(std::move(c));
  }
  res.pseudo_cases = pseudo.size();

  std::vector<const Case*> cases;
  for (const auto& c : ds.train) cases.push_back(&c);
  for (const auto& c : pseudo) cases.push_back(&c);
  std::vector<SynVariant> pool = sup.pool;
  if (cfg.mode != RefineMode::lr) {
    std::vector<const BinaryMask*> labels, cls;
    std::vector<const CenterlineGraph*> graphs;
    for (const auto& c : pseudo) {
      const bool ok = !c.graph.branches.empty();
      labels.push_back(&c.gt);
      cls.push_back(&c.centerline);
      graphs.push_back(ok ? &c.graph : nullptr);
    }
    for (auto& v : build_syn_pool(labels, cls, graphs, cfg, Rng(cfg.seed).split(kSemiSyn))) {
      v.case_index += ds.train.size();
      if (cfg.mode == RefineMode::lr_syn_lasn) v.x_a = apply_lasn(sup.fa, v.x_syn, cfg);
      pool.push_back(std::move(v));
    }
  }
  std::vector<const ScalarVolume*> x1s;
  for (const auto* c : cases) x1s.push_back(&x1_scalar.at(c->id));
  note(opt, "training semi-supervised refiner");
  const RefinementSampler sampler(cases, x1s, pool, cfg.mode, cfg);
  const StageResult ref = train_refiner(cfg, sampler, ds.val, x1_scalar, log, kSemiInit, kSemiSample, "semi");
  res.f2 = ref.net;

  std::map<std::string, BinaryMask> x2;
  for (const auto& c : ds.test) x2.emplace(c.id, refine(res.f2, c, x1_scalar.at(c.id), cfg).x);
  res.semi = evaluate_split(ds.test, x2);
  res.metrics = {{"supervised", to_json(res.supervised)},
                 {"semi", to_json(res.semi)},
                 {"pseudo_cases", res.pseudo_cases},
                 {"pseudo_without_graph", res.pseudo_without_graph},
                 {"semi_best_val_dice", ref.best_val}};
  if (!out.empty()) {
    save_checkpoint((out / "checkpoints" / "f2_semi.ckpt").string(), res.f2, {{"stage", "semi"}});
    write_json(res.metrics, out / "semi_metrics.json");
  }
  return res;
}

struct GridRow {
  double rate = 0;
  double dice = 0, completeness = 0, leakage = 0, gaps = 0;
};

/// Sets one error rate and zeroes the others. `which` is terminal,
/// discontinuity (airway) or vessel.
inline ErrorParams with_single_rate(const ErrorParams& base, const std::string& which, double rate) {
  if (const auto* a = std::get_if<AirwayErrorParams>(&base)) {
    AirwayErrorParams p = *a;
    p.max_rate_terminal = p.max_rate_discontinuity = 0;
    if (which == "terminal") p.max_rate_terminal = rate;
    else if (which == "discontinuity") p.max_rate_discontinuity = rate;
    else throw UsageError("gridsearch: airway errors vary 'terminal' or 'discontinuity', not '" + which + "'");
    return p;
  }
  VesselErrorParams p = std::get<VesselErrorParams>(base);
  if (which != "vessel") throw UsageError("gridsearch: vessel errors vary 'vessel', not '" + which + "'");
  p.max_rate = rate;
  return p;
}

/// Trains one refiner per grid rate on top of a shared base network and
/// evaluates each on the test split.
inline std::vector<GridRow> run_gridsearch(const ExperimentConfig& cfg, const Dataset& ds, const std::vector<double>& rates,
                                           const std::string& which, const fs::path& out,
                                           const PipelineOptions& opt = {}) {
  if (rates.empty()) throw UsageError("gridsearch: empty rate grid");
  for (double r : rates)
    if (!(r >= 0 && r <= 1)) throw UsageError("gridsearch: rates must lie in [0, 1]");
  if (!out.empty()) fs::create_directories(out);
  RunLog log = out.empty() ? RunLog() : RunLog(out / "gridsearch_log.jsonl");
  note(opt, "training shared base network");
  const Network<float> f1 = train_base(cfg, ds, log).net;
  std::map<std::string, Prediction> initial;
  for (const auto* split : {&ds.train, &ds.val, &ds.test})
    for (const auto& c : *split) initial.emplace(c.id, predict_initial(f1, c, cfg));
  std::map<std::string, ScalarVolume> x1_scalar;
  for (const auto& [id, p] : initial) x1_scalar.emplace(id, mask_to_scalar(p.x));
  std::vector<const BinaryMask*> x1_train;
  std::vector<const Case*> train_cases;
  std::vector<const ScalarVolume*> train_x1;
  for (const auto& c : ds.train) {
    x1_train.push_back(&initial.at(c.id).x);
    train_cases.push_back(&c);
    train_x1.push_back(&x1_scalar.at(c.id));
  }
  std::vector<GridRow> rows;
  nlohmann::json table = nlohmann::json::array();
  for (double rate : rates) {
    note(opt, "grid rate " + std::to_string(rate));
    ExperimentConfig c = cfg;
    c.errors = with_single_rate(cfg.errors, which, rate);
    // Without errors the synthetic labels are copies of the reference, so
    // rate 0 is the plain LR baseline.
    if (rate == 0.0) c.mode = RefineMode::lr;
    std::vector<SynVariant> pool;
    if (c.mode != RefineMode::lr) pool = mode_pool(c, ds.train, initial, log);
    if (c.mode == RefineMode::lr_syn_lasn) {
      std::vector<const BinaryMask*> syn;
      for (const auto& v : pool) syn.push_back(&v.x_syn);
      const LasnResult lasn = train_lasn(syn, x1_train, c, log);
      for (auto& v : pool) v.x_a = apply_lasn(lasn.fa, v.x_syn, c);
    }
    const RefinementSampler sampler(train_cases, train_x1, pool, c.mode, c);
    const Network<float> f2 = train_refiner(c, sampler, ds.val, x1_scalar, log).net;
    std::map<std::string, BinaryMask> x2;
    for (const auto& tc : ds.test) x2.emplace(tc.id, refine(f2, tc, x1_scalar.at(tc.id), c).x);
    const MetricsReport rep = evaluate_split(ds.test, x2);
    GridRow row{rate, rep.aggregate("dice").mean, rep.aggregate("completeness").mean, rep.aggregate("leakage").mean,
                rep.aggregate("gaps").mean};
    rows.push_back(row);
    table.push_back({{"rate", rate},
                     {"dice", row.dice},
                     {"completeness", row.completeness},
                     {"leakage", row.leakage},
                     {"gaps", row.gaps},
                     {"cases", to_json(rep)["cases"]}});
  }
  if (!out.empty()) {
    write_json({{"varied", which}, {"mode", mode_name(cfg.mode)}, {"rows", table}}, out / "gridsearch.json");
    std::ofstream csv(out / "gridsearch.csv");
    csv << "rate,dice,completeness,leakage,gaps\n";
    for (const auto& r : rows) csv << r.rate << ',' << r.dice << ',' << r.completeness << ',' << r.leakage << ',' << r.gaps << '\n';
  }
  return rows;
}

}  // namespace treelab
