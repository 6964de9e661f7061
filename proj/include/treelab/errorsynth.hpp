#pragma once

// Synthetic structural errors for tree-shaped labels.
//
// Airway mode removes (parts of) terminal branches and cuts gaps into
// higher-generation branches with cylindrical masks. Vessel mode cuts gaps
// into a 1-voxel centerline and dilates the result with a 3x3x3 cube.
// Every removal is recorded so the corrupted label can be audited.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "treelab/error.hpp"
#include "treelab/rng.hpp"
#include "treelab/skeleton.hpp"
#include "treelab/volume.hpp"

namespace treelab {

struct AirwayErrorParams {
  double max_rate_terminal = 0.0;       // upper bound for the terminal-branch rate
  double max_rate_discontinuity = 0.0;  // upper bound for the discontinuity rate
  int min_gap_len_vox = 10;
  double mask_width_factor = 3.0;  // mask diameter / branch diameter
  std::set<int> excluded_generations = {0, 1, 2};

  void validate() const {
    auto rate_ok = [](double r) { return r >= 0.0 && r <= 1.0; };
    if (!rate_ok(max_rate_terminal) || !rate_ok(max_rate_discontinuity))
      throw UsageError("airway error rates must lie in [0, 1]");
    if (min_gap_len_vox < 1) throw UsageError("min_gap_len_vox must be >= 1");
    if (!(mask_width_factor > 0.0)) throw UsageError("mask_width_factor must be > 0");
  }
};

struct GapTable {
  int max_gaps = 0;
  int min_len = 1;
  int max_len = 1;
};

struct VesselErrorParams {
  double max_rate = 0.0;
  GapTable long_group{6, 10, 35};
  GapTable medium_group{4, 10, 20};
  GapTable short_group{2, 6, 15};

  const GapTable& table(int group) const {
    return group == 2 ? long_group : group == 1 ? medium_group : short_group;
  }

  void validate() const {
    if (!(max_rate >= 0.0 && max_rate <= 1.0)) throw UsageError("vessel error rate must lie in [0, 1]");
    for (const GapTable* t : {&long_group, &medium_group, &short_group})
      if (t->max_gaps < 0 || t->min_len < 1 || t->min_len > t->max_len)
        throw UsageError("vessel gap table entries need max_gaps >= 0 and 1 <= min_len <= max_len");
  }
};

using ErrorParams = std::variant<AirwayErrorParams, VesselErrorParams>;

enum class ErrorType { terminal, discontinuity, vessel_gap };

inline const char* to_string(ErrorType t) {
  switch (t) {
    case ErrorType::terminal: return "terminal";
    case ErrorType::discontinuity: return "discontinuity";
    case ErrorType::vessel_gap: return "vessel_gap";
  }
  return "?";
}

/// Run-length encoded voxel set: (first linear index, run length) pairs.
using VoxelRuns = std::vector<std::pair<std::uint64_t, std::uint64_t>>;

inline VoxelRuns encode_runs(const BinaryMask& m) {
  VoxelRuns runs;
  for (std::size_t i = 0; i < m.size();) {
    if (!m[i]) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < m.size() && m[j]) ++j;
    runs.emplace_back(i, j - i);
    i = j;
  }
  return runs;
}

inline void paint_runs(BinaryMask& m, const VoxelRuns& runs) {
  for (const auto& [start, len] : runs) {
    if (start + len > m.size()) throw DataError("voxel run exceeds volume size");
    std::fill_n(m.data().begin() + static_cast<std::ptrdiff_t>(start), len, std::uint8_t{1});
  }
}

struct Gap {
  int start = 0;   // first removed path index
  int length = 0;  // removed path voxels (clipped to the path)
  int center = 0;
  int sampled_length = 0;
};

struct Removal {
  ErrorType type = ErrorType::terminal;
  int branch_id = 0;
  VoxelRuns runs;
  std::uint64_t removed_voxels = 0;
  int start_index = -1;  // terminal: mask start along the path
  int gap_start = -1;    // discontinuity: first masked path index
  int gap_length = -1;   // discontinuity: masked path length after clipping
  int gap_center = -1;
  int gap_sampled_length = -1;
  int group = -1;        // vessel: 0 short, 1 medium, 2 long
  std::vector<Gap> gaps; // vessel gaps
};

struct CorruptionRecord {
  std::uint64_t seed = 0;
  Dims dims;
  std::map<std::string, double> sampled_rates;
  std::map<std::string, std::vector<int>> affected;
  std::vector<Removal> removals;
  std::uint64_t removed_voxels_total = 0;
  std::vector<std::string> warnings;

  /// Union of every removal mask.
  BinaryMask removal_union() const {
    BinaryMask m(dims);
    for (const auto& r : removals) paint_runs(m, r.runs);
    return m;
  }

  void merge(CorruptionRecord other) {
    for (auto& [k, v] : other.sampled_rates) sampled_rates[k] = v;
    for (auto& [k, v] : other.affected) affected[k] = std::move(v);
    for (auto& r : other.removals) removals.push_back(std::move(r));
    for (auto& w : other.warnings) warnings.push_back(std::move(w));
  }
};

struct Corruption {
  BinaryMask label;
  CorruptionRecord record;
};

// ---------------------------------------------------------------------------

/// Uniform rate in [0, upper].
inline double sample_error_rate(double upper, Rng& rng) {
  if (!(upper >= 0.0 && upper <= 1.0)) throw UsageError("error-rate upper bound must lie in [0, 1]");
  return upper * rng.uniform();
}

inline std::size_t selection_count(double rate, std::size_t n) {
  return std::min(n, static_cast<std::size_t>(std::llround(rate * static_cast<double>(n))));
}

/// Draws round(rate * N) distinct ids without replacement, each draw with
/// probability proportional to its weight among the remaining candidates.
/// Once all positive-weight candidates are taken, the rest are drawn uniformly.
inline std::vector<int> select_branches_weighted(const std::vector<std::pair<int, double>>& candidates,
                                                 double rate, Rng& rng) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw UsageError("selection rate must lie in [0, 1]");
  double total = 0.0;
  for (const auto& [id, w] : candidates) {
    if (!(w >= 0.0)) throw UsageError("selection weights must be non-negative");
    total += w;
  }
  if (rate > 0.0 && !candidates.empty() && total <= 0.0)
    throw UsageError("all selection weights are zero");
  const std::size_t k = selection_count(rate, candidates.size());
  std::vector<std::pair<int, double>> pool = candidates;
  std::vector<int> chosen;
  while (chosen.size() < k) {
    double sum = 0.0;
    for (const auto& c : pool) sum += c.second;
    std::size_t pick = 0;
    if (sum > 0.0) {
      const double u = rng.uniform() * sum;
      double acc = 0.0;
      pick = pool.size();
      for (std::size_t i = 0; i < pool.size(); ++i) {
        if (pool[i].second <= 0.0) continue;
        acc += pool[i].second;
        if (u < acc) {
          pick = i;
          break;
        }
      }
      if (pick == pool.size()) {  // rounding at the top end
        for (std::size_t i = pool.size(); i-- > 0;)
          if (pool[i].second > 0.0) {
            pick = i;
            break;
          }
      }
    } else {
      pick = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(pool.size()) - 1));
    }
    chosen.push_back(pool[pick].first);
    pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(pick));
  }
  return chosen;
}

/// round(rate * N) distinct ids, uniformly without replacement.
inline std::vector<int> select_uniform(const std::vector<int>& ids, double rate, Rng& rng) {
  std::vector<std::pair<int, double>> c;
  for (const int id : ids) c.emplace_back(id, 1.0);
  return select_branches_weighted(c, rate, rng);
}

/// Voxels whose centers lie within width/2 of any segment voxel center.
inline BinaryMask cylinder_mask(const std::vector<Voxel>& segment, double width_vox, Dims dims) {
  if (segment.empty()) throw UsageError("cylinder_mask: empty segment");
  if (!(width_vox > 0.0)) throw UsageError("cylinder_mask: width must be > 0");
  BinaryMask m(dims);
  const double r = width_vox / 2.0;
  const double r2 = r * r;
  const int reach = static_cast<int>(std::floor(r));
  for (const Voxel& c : segment) {
    if (!dims.contains(c)) throw UsageError("cylinder_mask: segment voxel outside the volume");
    for (int z = std::max(0, c.z - reach); z <= std::min(dims.nz - 1, c.z + reach); ++z)
      for (int y = std::max(0, c.y - reach); y <= std::min(dims.ny - 1, c.y + reach); ++y)
        for (int x = std::max(0, c.x - reach); x <= std::min(dims.nx - 1, c.x + reach); ++x)
          if (static_cast<double>(squared_distance({x, y, z}, c)) <= r2) m(x, y, z) = 1;
  }
  return m;
}

namespace detail {

inline void check_graph_matches(const BinaryMask& label, const CenterlineGraph& g) {
  if (!(label.dims() == g.dims)) throw DataError("graph/label mismatch: dimensions differ");
  for (const auto& b : g.branches) {
    for (const Voxel& v : b.path)
      if (!label.dims().contains(v) || !label(v))
        throw DataError("graph/label mismatch: branch " + std::to_string(b.id) +
                        " leaves the label foreground");
    if (!(b.mean_diameter_vox > 0.0))
      throw DataError("graph/label mismatch: branch " + std::to_string(b.id) + " has no diameter");
  }
}

// Path indices [start, start + length) of a span of `length` centered on
// `center`, clipped to a path of `path_len` voxels.
inline std::pair<int, int> centered_span(int center, int length, int path_len) {
  const int lo = std::max(0, center - length / 2);
  const int hi = std::min(path_len, center - length / 2 + length);
  return {lo, hi - lo};
}

inline Removal make_removal(ErrorType type, int branch, const BinaryMask& removed) {
  Removal r;
  r.type = type;
  r.branch_id = branch;
  r.runs = encode_runs(removed);
  r.removed_voxels = count(removed);
  return r;
}

inline void finalize(CorruptionRecord& rec, const BinaryMask& original, const BinaryMask& corrupted) {
  rec.removed_voxels_total = count(mask_minus(original, corrupted));
}

}  // namespace detail

/// Partially or totally removes round(rate * |terminal branches|) terminal
/// branches. Each mask starts at a uniform path position in the proximal
/// half and runs to the branch end.
inline Corruption inject_airway_terminal_errors(const BinaryMask& label, const CenterlineGraph& g,
                                                double rate, const AirwayErrorParams& params,
                                                Rng& rng) {
  params.validate();
  detail::check_graph_matches(label, g);
  Corruption out{label, {}};
  out.record.seed = rng.seed();
  out.record.dims = label.dims();
  out.record.sampled_rates["terminal"] = rate;
  const std::vector<int> chosen = select_uniform(terminal_branches(g), rate, rng);
  out.record.affected["terminal"] = chosen;
  BinaryMask removed_all(label.dims());
  for (const int id : chosen) {
    const Branch& b = g.branch(id);
    const int len = static_cast<int>(b.length_vox());
    const int start = len > 0 ? static_cast<int>(rng.uniform_int(0, (len - 1) / 2)) : 0;
    std::vector<Voxel> segment(b.path.begin() + start, b.path.end());
    segment.push_back(g.nodes[b.node_to].xyz);
    const BinaryMask cut =
        mask_and(cylinder_mask(segment, params.mask_width_factor * b.mean_diameter_vox, label.dims()),
                 label);
    Removal r = detail::make_removal(ErrorType::terminal, id, cut);
    r.start_index = start;
    out.record.removals.push_back(std::move(r));
    removed_all = mask_or(removed_all, cut);
  }
  out.label = mask_minus(label, removed_all);
  detail::finalize(out.record, label, out.label);
  return out;
}

/// Cuts a gap into round(rate * N_c) branches drawn with probability
/// proportional to their generation from all branches outside
/// `excluded_generations`.
inline Corruption inject_airway_discontinuities(const BinaryMask& label, const CenterlineGraph& g,
                                                double rate, const AirwayErrorParams& params,
                                                Rng& rng) {
  params.validate();
  detail::check_graph_matches(label, g);
  Corruption out{label, {}};
  out.record.seed = rng.seed();
  out.record.dims = label.dims();
  out.record.sampled_rates["discontinuity"] = rate;

  std::vector<std::pair<int, double>> candidates;
  for (const auto& b : g.branches)
    if (!params.excluded_generations.count(b.generation))
      candidates.emplace_back(b.id, static_cast<double>(b.generation));
  std::vector<int> chosen;
  if (candidates.empty()) {
    if (rate > 0.0) out.record.warnings.push_back("discontinuity: no eligible branches");
  } else {
    chosen = select_branches_weighted(candidates, rate, rng);
  }
  out.record.affected["discontinuity"] = chosen;

  BinaryMask removed_all(label.dims());
  for (const int id : chosen) {
    const Branch& b = g.branch(id);
    const int len = static_cast<int>(b.length_vox());
    if (len == 0) {
      out.record.warnings.push_back("discontinuity: branch " + std::to_string(id) +
                                    " has an empty path");
      continue;
    }
    const int sampled = static_cast<int>(rng.uniform_int(std::min(params.min_gap_len_vox, len), len));
    const int center = static_cast<int>(rng.uniform_int(0, len - 1));
    const auto [start, gap] = detail::centered_span(center, sampled, len);
    const std::vector<Voxel> segment(b.path.begin() + start, b.path.begin() + start + gap);
    const BinaryMask cut =
        mask_and(cylinder_mask(segment, params.mask_width_factor * b.mean_diameter_vox, label.dims()),
                 label);
    Removal r = detail::make_removal(ErrorType::discontinuity, id, cut);
    r.gap_start = start;
    r.gap_length = gap;
    r.gap_center = center;
    r.gap_sampled_length = sampled;
    out.record.removals.push_back(std::move(r));
    removed_all = mask_or(removed_all, cut);
  }
  out.label = mask_minus(label, removed_all);
  detail::finalize(out.record, label, out.label);
  return out;
}

/// Length group per branch: 0 short, 1 medium, 2 long, from terciles of
/// length rank (ties broken by id).
inline std::map<int, int> vessel_length_groups(const CenterlineGraph& g) {
  std::vector<int> order;
  for (const auto& b : g.branches) order.push_back(b.id);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    const auto la = g.branch(a).length_vox(), lb = g.branch(b).length_vox();
    return la != lb ? la < lb : a < b;
  });
  std::map<int, int> group;
  const std::size_t n = order.size();
  for (std::size_t r = 0; r < n; ++r) group[order[r]] = static_cast<int>(3 * r / n);
  return group;
}

/// Removes random gaps from the centerline of round(rate * N) branches and
/// dilates the result with a 3x3x3 cube.
inline Corruption inject_vessel_gaps(const BinaryMask& centerline, const CenterlineGraph& g,
                                     const VesselErrorParams& params, double rate, Rng& rng) {
  params.validate();
  if (!(centerline.dims() == g.dims)) throw DataError("graph/centerline mismatch: dimensions differ");
  for (const auto& b : g.branches)
    for (const Voxel& v : b.path)
      if (!centerline.dims().contains(v) || !centerline(v))
        throw DataError("graph/centerline mismatch: branch " + std::to_string(b.id));

  Corruption out{{}, {}};
  out.record.seed = rng.seed();
  out.record.dims = centerline.dims();
  out.record.sampled_rates["vessel"] = rate;
  const auto groups = vessel_length_groups(g);
  std::vector<int> ids;
  for (const auto& b : g.branches) ids.push_back(b.id);
  const std::vector<int> chosen = select_uniform(ids, rate, rng);
  out.record.affected["vessel"] = chosen;

  BinaryMask cut_centerline = centerline;
  std::vector<std::pair<Removal, BinaryMask>> per_branch;
  for (const int id : chosen) {
    const Branch& b = g.branch(id);
    const int len = static_cast<int>(b.length_vox());
    Removal r;
    r.type = ErrorType::vessel_gap;
    r.branch_id = id;
    r.group = groups.at(id);
    const GapTable& t = params.table(r.group);
    BinaryMask gap_voxels(centerline.dims());
    const int n_gaps = static_cast<int>(rng.uniform_int(0, t.max_gaps));
    for (int k = 0; k < n_gaps && len > 0; ++k) {
      const int sampled = static_cast<int>(rng.uniform_int(t.min_len, t.max_len));
      const int center = static_cast<int>(rng.uniform_int(0, len - 1));
      const auto [start, gap] = detail::centered_span(center, std::min(sampled, len), len);
      r.gaps.push_back({start, gap, center, sampled});
      for (int i = start; i < start + gap; ++i) {
        gap_voxels(b.path[i]) = 1;
        cut_centerline(b.path[i]) = 0;
      }
    }
    per_branch.emplace_back(std::move(r), std::move(gap_voxels));
  }
  const BinaryMask original = dilate_cube3(centerline);
  out.label = dilate_cube3(cut_centerline);
  const BinaryMask removed = mask_minus(original, out.label);
  for (auto& [r, gap_voxels] : per_branch) {
    const BinaryMask mine = mask_and(dilate_cube3(gap_voxels), removed);
    r.runs = encode_runs(mine);
    r.removed_voxels = count(mine);
    out.record.removals.push_back(std::move(r));
  }
  detail::finalize(out.record, original, out.label);
  return out;
}

/// Samples per-type rates from their upper bounds and applies the
/// injectors (airway: terminal, then discontinuity). In vessel mode `label`
/// is the 1-voxel centerline and the result is the dilated corrupted label.
inline Corruption corrupt(const BinaryMask& label, const CenterlineGraph& g, const ErrorParams& params,
                          Rng& rng) {
  if (const auto* airway = std::get_if<AirwayErrorParams>(&params)) {
    airway->validate();
    const double rate_terminal = sample_error_rate(airway->max_rate_terminal, rng);
    const double rate_disc = sample_error_rate(airway->max_rate_discontinuity, rng);
    Corruption first = inject_airway_terminal_errors(label, g, rate_terminal, *airway, rng);
    Corruption second = inject_airway_discontinuities(label, g, rate_disc, *airway, rng);
    Corruption out{mask_and(first.label, second.label), std::move(first.record)};
    out.record.merge(std::move(second.record));
    detail::finalize(out.record, label, out.label);
    return out;
  }
  const auto& vessel = std::get<VesselErrorParams>(params);
  vessel.validate();
  const double rate = sample_error_rate(vessel.max_rate, rng);
  return inject_vessel_gaps(label, g, vessel, rate, rng);
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const CorruptionRecord& rec) {
  nlohmann::json removals = nlohmann::json::array();
  for (const auto& r : rec.removals) {
    nlohmann::json runs = nlohmann::json::array();
    for (const auto& [s, l] : r.runs) runs.push_back({s, l});
    nlohmann::json j = {{"type", to_string(r.type)},
                        {"branch_id", r.branch_id},
                        {"removed_voxels", r.removed_voxels},
                        {"runs", std::move(runs)}};
    if (r.type == ErrorType::terminal) j["start_index"] = r.start_index;
    if (r.type == ErrorType::discontinuity) {
      j["gap_start"] = r.gap_start;
      j["gap_length"] = r.gap_length;
      j["gap_center"] = r.gap_center;
      j["gap_sampled_length"] = r.gap_sampled_length;
    }
    if (r.type == ErrorType::vessel_gap) {
      j["group"] = r.group == 2 ? "long" : r.group == 1 ? "medium" : "short";
      nlohmann::json gaps = nlohmann::json::array();
      for (const auto& gp : r.gaps) gaps.push_back({{"start", gp.start},
                        {"length", gp.length},
                        {"center", gp.center},
                        {"sampled_length", gp.sampled_length}});
      j["gaps"] = std::move(gaps);
    }
    removals.push_back(std::move(j));
  }
  return {{"seed", rec.seed},
          {"dims", {rec.dims.nx, rec.dims.ny, rec.dims.nz}},
          {"sampled_rates", rec.sampled_rates},
          {"affected", rec.affected},
          {"removals", std::move(removals)},
          {"removed_voxels_total", rec.removed_voxels_total},
          {"warnings", rec.warnings}};
}

inline CorruptionRecord record_from_json(const nlohmann::json& j) {
  try {
    CorruptionRecord rec;
    rec.seed = j.at("seed").get<std::uint64_t>();
    const auto& d = j.at("dims");
    rec.dims = {d.at(0).get<int>(), d.at(1).get<int>(), d.at(2).get<int>()};
    rec.sampled_rates = j.at("sampled_rates").get<std::map<std::string, double>>();
    rec.affected = j.at("affected").get<std::map<std::string, std::vector<int>>>();
    rec.removed_voxels_total = j.at("removed_voxels_total").get<std::uint64_t>();
    rec.warnings = j.at("warnings").get<std::vector<std::string>>();
    for (const auto& rj : j.at("removals")) {
      Removal r;
      const auto type = rj.at("type").get<std::string>();
      r.type = type == "terminal"        ? ErrorType::terminal
               : type == "discontinuity" ? ErrorType::discontinuity
                                         : ErrorType::vessel_gap;
      r.branch_id = rj.at("branch_id").get<int>();
      r.removed_voxels = rj.at("removed_voxels").get<std::uint64_t>();
      for (const auto& run : rj.at("runs"))
        r.runs.emplace_back(run.at(0).get<std::uint64_t>(), run.at(1).get<std::uint64_t>());
      r.start_index = rj.value("start_index", -1);
      r.gap_start = rj.value("gap_start", -1);
      r.gap_length = rj.value("gap_length", -1);
      r.gap_center = rj.value("gap_center", -1);
      r.gap_sampled_length = rj.value("gap_sampled_length", -1);
      if (rj.contains("group")) {
        const auto g = rj["group"].get<std::string>();
        r.group = g == "long" ? 2 : g == "medium" ? 1 : 0;
      }
      if (rj.contains("gaps"))
        for (const auto& gp : rj["gaps"])
          r.gaps.push_back({gp.at("start").get<int>(), gp.at("length").get<int>(),
                            gp.at("center").get<int>(), gp.at("sampled_length").get<int>()});
      rec.removals.push_back(std::move(r));
    }
    return rec;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed corruption record: ") + e.what());
  }
}

}  // namespace treelab
