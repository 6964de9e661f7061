#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "treelab/pipeline.hpp"

using namespace treelab;
namespace fs = std::filesystem;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  int threads = 0;
  bool fidelity = false;
  bool quiet = false;
};

ExperimentConfig load_config(const Globals& g) {
  ExperimentConfig c = g.config.empty() ? ExperimentConfig{} : load_experiment_config(g.config);
  if (g.seed) c.seed = *g.seed;
  if (g.threads > 0) c.threads = g.threads;
  if (g.fidelity && !c.fidelity) c.apply_fidelity();
  c.validate();
  return c;
}

fs::path need_out(const Globals& g) {
  if (g.out.empty()) throw UsageError("--out is required");
  fs::create_directories(g.out);
  return g.out;
}

PipelineOptions options(const Globals& g) {
  PipelineOptions o;
  o.verbose = !g.quiet;
  return o;
}

Voxel parse_voxel(const std::string& s) {
  Voxel v;
  char c1 = 0, c2 = 0;
  std::istringstream in(s);
  if (!(in >> v.x >> c1 >> v.y >> c2 >> v.z) || c1 != ',' || c2 != ',')
    throw UsageError("expected a voxel as x,y,z, got '" + s + "'");
  return v;
}

void say(const Globals& g, const std::string& msg) {
  if (!g.quiet) std::cout << msg << '\n';
}

// ---------------------------------------------------------------- commands

void cmd_phantom(const Globals& g, const std::string& spec_path, int n) {
  if (n < 1) throw UsageError("--n must be >= 1");
  PhantomSpec spec = spec_path.empty() ? PhantomSpec{} : phantom_spec_from_json(read_json(spec_path));
  const std::uint64_t seed = g.seed.value_or(spec.seed);
  const fs::path out = need_out(g);
  nlohmann::json cases = nlohmann::json::array();
  for (int k = 0; k < n; ++k) {
    PhantomSpec s = spec;
    s.seed = phantom_case_seed(seed, k);
    char id[32];
    std::snprintf(id, sizeof id, "case%03d", k);
    const PhantomSample p = generate_tree(s);
    write_case(case_from_phantom(id, p), out / id);
    cases.push_back({{"id", id}, {"seed", s.seed}, {"attempts", p.attempts}, {"branches", p.graph.branches.size()}});
  }
  spec.seed = seed;
  write_json({{"spec", to_json(spec)}, {"cases", cases}}, out / "manifest.json");
  say(g, "wrote " + std::to_string(n) + " phantoms to " + out.string());
}

struct CorruptArgs {
  std::string label, graph, centerline, params, record;
};

void cmd_corrupt(const Globals& g, const CorruptArgs& a) {
  ExperimentConfig c = load_config(g);
  if (!a.params.empty()) {
    const nlohmann::json j = read_json(a.params);
    c.errors = error_params_from_json(j.contains("errors") ? j.at("errors") : j);
  }
  const BinaryMask label = read_mask(a.label);
  const CenterlineGraph graph = read_graph(a.graph);
  // --out names either a directory or the corrupted label itself.
  if (g.out.empty()) throw UsageError("--out is required");
  const bool to_file = fs::path(g.out).extension() == ".mhd";
  const fs::path image = to_file ? fs::path(g.out) : fs::path(g.out) / "x_syn.mhd";
  const fs::path record = !a.record.empty() ? fs::path(a.record) : image.parent_path() / "record.json";
  if (!image.parent_path().empty()) fs::create_directories(image.parent_path());
  if (!record.parent_path().empty()) fs::create_directories(record.parent_path());
  BinaryMask centerline;
  if (std::holds_alternative<VesselErrorParams>(c.errors)) {
    centerline = a.centerline.empty() ? skeletonize(label) : read_mask(a.centerline);
  }
  Rng rng = Rng(c.seed).split(kSynPool);
  const Corruption r = corrupt_label(label, centerline, graph, c.errors, rng);
  write_mhd(r.label, image);
  write_json(to_json(r.record), record);
  say(g, "removed " + std::to_string(r.record.removed_voxels_total) + " voxels");
}

void cmd_skeletonize(const Globals& g, const std::string& mask_path, const std::string& root) {
  const BinaryMask m = read_mask(mask_path);
  const fs::path out = need_out(g);
  const Voxel hint = root.empty() ? first_voxel(m) : parse_voxel(root);
  const CenterlineGraph graph = extract_centerline_graph(m, hint);
  write_mhd(skeletonize(m), out / "centerline.mhd");
  write_graph(graph, out / "graph.json");
  say(g, std::to_string(graph.branches.size()) + " branches, " + std::to_string(graph.bifurcation_count()) +
             " bifurcations");
}

Network<float> load_net(const std::string& path, const ExperimentConfig& c, int in_channels) {
  LoadedCheckpoint ck = load_checkpoint(path);
  if (ck.net.spec().in_channels != in_channels)
    throw DataError(path + ": expected a network with " + std::to_string(in_channels) + " input channels");
  ck.net.threads = c.threads;
  return std::move(ck.net);
}

void cmd_train_base(const Globals& g) {
  const ExperimentConfig c = load_config(g);
  const fs::path out = need_out(g);
  const Dataset ds = load_dataset(c);
  RunLog log(out / "run_log.jsonl");
  const StageResult r = train_base(c, ds, log);
  save_checkpoint((out / "f1.ckpt").string(), r.net, {{"stage", "base"}, {"best_step", r.best_step}});
  say(g, "best validation Dice " + std::to_string(r.best_val));
}

std::map<std::string, Prediction> initial_predictions(const Network<float>& f1, const Dataset& ds,
                                                      const ExperimentConfig& c) {
  std::map<std::string, Prediction> out;
  for (const auto* split : {&ds.train, &ds.val, &ds.test})
    for (const auto& k : *split) out.emplace(k.id, predict_initial(f1, k, c));
  return out;
}

void cmd_train_lasn(const Globals& g, const std::string& f1_path) {
  ExperimentConfig c = load_config(g);
  const fs::path out = need_out(g);
  const Dataset ds = load_dataset(c);
  const Network<float> f1 = load_net(f1_path, c, 1);
  RunLog log(out / "run_log.jsonl");
  const auto initial = initial_predictions(f1, ds, c);
  if (c.mode == RefineMode::lr_syn_init) c.mode = RefineMode::lr_syn;  // LASN always learns from corrupted gt
  const auto pool = mode_pool(c, ds.train, initial, log);
  std::vector<const BinaryMask*> syn, real;
  for (const auto& v : pool) syn.push_back(&v.x_syn);
  for (const auto& k : ds.train) real.push_back(&initial.at(k.id).x);
  const LasnResult r = train_lasn(syn, real, c, log);
  save_checkpoint((out / "fa.ckpt").string(), r.fa, {{"stage", "lasn"}});
  save_checkpoint((out / "d.ckpt").string(), r.d, {{"stage", "lasn"}});
  say(g, "wrote " + (out / "fa.ckpt").string());
}

void cmd_train_refine(const Globals& g, const std::string& f1_path, const std::string& fa_path) {
  const ExperimentConfig c = load_config(g);
  const fs::path out = need_out(g);
  const Dataset ds = load_dataset(c);
  const Network<float> f1 = load_net(f1_path, c, 1);
  RunLog log(out / "run_log.jsonl");
  const auto initial = initial_predictions(f1, ds, c);
  std::vector<SynVariant> pool;
  if (c.mode != RefineMode::lr) pool = mode_pool(c, ds.train, initial, log);
  if (c.mode == RefineMode::lr_syn_lasn) {
    if (fa_path.empty()) throw UsageError("mode LR+Syn+LASN needs --fa");
    const Network<float> fa = load_net(fa_path, c, 1);
    for (auto& v : pool) v.x_a = apply_lasn(fa, v.x_syn, c);
  }
  std::map<std::string, ScalarVolume> x1;
  for (const auto& [id, p] : initial) x1.emplace(id, to_scalar(p.x));
  std::vector<const Case*> cases;
  std::vector<const ScalarVolume*> x1s;
  for (const auto& k : ds.train) {
    cases.push_back(&k);
    x1s.push_back(&x1.at(k.id));
  }
  const RefinementSampler sampler(cases, x1s, pool, c.mode, c);
  const StageResult r = train_refiner(c, sampler, ds.val, x1, log);
  save_checkpoint((out / "f2.ckpt").string(), r.net,
                  {{"stage", "refine"}, {"mode", mode_name(c.mode)}, {"best_step", r.best_step}});
  say(g, "best validation Dice " + std::to_string(r.best_val));
}

void cmd_infer(const Globals& g, const std::string& ckpt, const std::string& image_path,
               const std::string& label_path, const std::string& bounds_path) {
  const ExperimentConfig c = load_config(g);
  const fs::path out = need_out(g);
  LoadedCheckpoint ck = load_checkpoint(ckpt);
  ck.net.threads = c.threads;
  const ScalarVolume image = read_mhd(image_path);
  std::vector<const ScalarVolume*> inputs{&image};
  std::vector<float> pads{c.pad_value()};
  ScalarVolume label;
  if (ck.net.spec().in_channels == 2) {
    if (label_path.empty()) throw UsageError("this checkpoint takes a label channel; pass --label");
    label = to_scalar(read_mask(label_path));
    require_same_dims(image, label, "infer");
    inputs.push_back(&label);
    pads.push_back(0.0f);
  } else if (!label_path.empty()) {
    throw UsageError("this checkpoint takes only an image");
  }
  const ScalarVolume y = sliding_window_infer(ck.net, inputs, c.patch, c.overlap, pads);
  BinaryMask x = threshold(y, c.threshold);
  if (!bounds_path.empty()) {
    const BinaryMask b = read_mask(bounds_path);
    require_same_dims(image, b, "infer bounds");
    x = mask_and(x, b);
  }
  write_mhd(y, out / "y.mhd", ElementType::float32);
  write_mhd(x, out / "x.mhd");
  say(g, "wrote " + (out / "x.mhd").string());
}

/// Resolves <dir>/<id>.mhd or <dir>/<id>/<name>.mhd.
fs::path case_file(const fs::path& dir, const std::string& id, const char* name) {
  const fs::path flat = dir / (id + ".mhd");
  if (fs::exists(flat)) return flat;
  const fs::path nested = dir / id / (std::string(name) + ".mhd");
  if (fs::exists(nested)) return nested;
  throw DataError("no " + std::string(name) + " for case '" + id + "' under " + dir.string());
}

void cmd_evaluate(const Globals& g, const std::string& pred, std::string gt, std::string cl) {
  if (gt.empty()) throw UsageError("--gt is required");
  if (cl.empty()) cl = gt;
  std::vector<std::pair<std::string, fs::path>> preds;
  if (fs::is_regular_file(pred)) {
    preds.emplace_back(fs::path(pred).stem().string(), pred);
  } else if (fs::is_directory(pred)) {
    for (const auto& e : fs::directory_iterator(pred))
      if (e.path().extension() == ".mhd") preds.emplace_back(e.path().stem().string(), e.path());
    std::sort(preds.begin(), preds.end());
  } else {
    throw DataError("prediction path " + pred + " does not exist");
  }
  if (preds.empty()) throw DataError("no .mhd predictions under " + pred);
  MetricsReport r;
  for (const auto& [id, path] : preds) {
    const bool single = fs::is_regular_file(gt);
    const BinaryMask g_mask = read_mask(single ? fs::path(gt) : case_file(gt, id, "gt"));
    const BinaryMask g_cl = read_mask(fs::is_regular_file(cl) ? fs::path(cl) : case_file(cl, id, "centerline"));
    r.cases.push_back(evaluate_case(read_mask(path), g_mask, g_cl, id));
  }
  const nlohmann::json j = to_json(r);
  if (g.out.empty()) {
    std::cout << j.dump(2) << '\n';
  } else {
    const fs::path out(g.out);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    write_json(j, out);
    say(g, "mean Dice " + std::to_string(r.aggregate("dice").mean));
  }
}

void cmd_pipeline(const Globals& g) {
  const ExperimentConfig c = load_config(g);
  const fs::path out = need_out(g);
  const PipelineResult r = run_pipeline(c, load_dataset(c), out, options(g));
  say(g, "base Dice " + std::to_string(r.base.aggregate("dice").mean) + ", refined Dice " +
             std::to_string(r.final.aggregate("dice").mean));
}

void cmd_semi(const Globals& g) {
  const ExperimentConfig c = load_config(g);
  const fs::path out = need_out(g);
  const Dataset ds = load_dataset(c);
  const PipelineResult sup = run_pipeline(c, ds, out, options(g));
  const SemiResult s = run_semi_supervised(c, ds, sup, out, options(g));
  say(g, "supervised Dice " + std::to_string(s.supervised.aggregate("dice").mean) + ", semi-supervised Dice " +
             std::to_string(s.semi.aggregate("dice").mean));
}

void cmd_gridsearch(const Globals& g, const std::vector<double>& rates, const std::string& vary) {
  const ExperimentConfig c = load_config(g);
  const fs::path out = need_out(g);
  for (const auto& row : run_gridsearch(c, load_dataset(c), rates, vary, out, options(g)))
    say(g, "rate " + std::to_string(row.rate) + ": Dice " + std::to_string(row.dice) + ", completeness " +
               std::to_string(row.completeness));
}

int run(int argc, char** argv) {
  CLI::App app{"treelab: label refinement for tubular tree segmentation"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "experiment config (JSON)");
  app.add_option("--seed", g.seed, "master seed (overrides the config)");
  app.add_option("--out", g.out, "output directory (file for evaluate)");
  app.add_option("--threads", g.threads, "worker threads")->check(CLI::PositiveNumber);
  app.add_flag("--fidelity", g.fidelity, "5-level model, instance norm, rotation and scaling augmentation");
  app.add_flag("-q,--quiet", g.quiet, "no progress output");

  std::string spec_path;
  int n = 1;
  auto* phantom = app.add_subcommand("phantom", "generate synthetic trees");
  phantom->add_option("--spec", spec_path, "phantom spec (JSON)");
  phantom->add_option("--n", n, "number of cases");

  std::string label;
  auto* corrupt_cmd = app.add_subcommand("corrupt", "inject synthetic errors into a label");
  CorruptArgs ca;
  corrupt_cmd->add_option("--label,--in", ca.label)->required();
  corrupt_cmd->add_option("--graph", ca.graph)->required();
  corrupt_cmd->add_option("--centerline", ca.centerline, "vessel mode; skeletonized from --label if omitted");
  corrupt_cmd->add_option("--params", ca.params, "error parameters JSON (overrides the config's errors)");
  corrupt_cmd->add_option("--record", ca.record, "record path (default: record.json next to the output)");

  std::string mask, root;
  auto* skel = app.add_subcommand("skeletonize", "centerline and branch graph of a mask");
  skel->add_option("--mask", mask)->required();
  skel->add_option("--root", root, "root hint x,y,z (default: first foreground voxel)");

  auto* train_base_cmd = app.add_subcommand("train-base", "train the base segmentation network");

  std::string f1, fa;
  auto* train_lasn_cmd = app.add_subcommand("train-lasn", "train the label appearance network");
  train_lasn_cmd->add_option("--f1", f1, "base checkpoint")->required();

  auto* train_refine_cmd = app.add_subcommand("train-refine", "train the refinement network");
  train_refine_cmd->add_option("--f1", f1, "base checkpoint")->required();
  train_refine_cmd->add_option("--fa", fa, "label appearance checkpoint");

  std::string ckpt, image, bounds;
  auto* infer = app.add_subcommand("infer", "sliding-window inference with a checkpoint");
  infer->add_option("--checkpoint", ckpt)->required();
  infer->add_option("--image", image)->required();
  infer->add_option("--label", label, "label channel for refinement networks");
  infer->add_option("--bounds", bounds, "mask applied after thresholding");

  std::string pred, gt, centerlines;
  auto* evaluate = app.add_subcommand("evaluate", "Dice, completeness, leakage and gaps");
  evaluate->add_option("--pred", pred, "prediction .mhd or directory of <id>.mhd")->required();
  evaluate->add_option("--gt", gt, "reference .mhd or directory");
  evaluate->add_option("--centerlines", centerlines, "reference centerline .mhd or directory (default: --gt)");

  auto* pipeline = app.add_subcommand("pipeline", "base, synthesis, LASN, refinement and evaluation");
  auto* semi = app.add_subcommand("semi", "pipeline followed by pseudo-label training");

  std::vector<double> rates{0.0, 0.25, 0.5, 0.75, 1.0};
  std::string vary = "discontinuity";
  auto* grid = app.add_subcommand("gridsearch", "refinement quality against the maximum error rate");
  grid->add_option("--rates", rates, "rate grid")->delimiter(',');
  grid->add_option("--vary", vary, "terminal, discontinuity or vessel");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  if (*phantom) cmd_phantom(g, spec_path, n);
  else if (*corrupt_cmd) cmd_corrupt(g, ca);
  else if (*skel) cmd_skeletonize(g, mask, root);
  else if (*train_base_cmd) cmd_train_base(g);
  else if (*train_lasn_cmd) cmd_train_lasn(g, f1);
  else if (*train_refine_cmd) cmd_train_refine(g, f1, fa);
  else if (*infer) cmd_infer(g, ckpt, image, label, bounds);
  else if (*evaluate) cmd_evaluate(g, pred, gt, centerlines);
  else if (*pipeline) cmd_pipeline(g);
  else if (*semi) cmd_semi(g);
  else if (*grid) cmd_gridsearch(g, rates, vary);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return 3;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  }
}
