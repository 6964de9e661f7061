#pragma once

// Overlap and topology metrics for tree segmentations, their aggregation,
// and a paired two-sided t-test.

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "treelab/error.hpp"
#include "treelab/skeleton.hpp"
#include "treelab/volume.hpp"

namespace treelab {

/// 2|Y ∩ G| / (|Y| + |G|); two empty masks agree perfectly (1.0).
inline double dice_coeff(const BinaryMask& y, const BinaryMask& g) {
  require_same_dims(y, g, "dice_coeff");
  std::size_t both = 0, ny = 0, ng = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    ny += y[i] != 0;
    ng += g[i] != 0;
    both += y[i] && g[i];
  }
  if (ny + ng == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(ny + ng);
}

/// Fraction of reference centerline voxels inside Y.
inline double completeness(const BinaryMask& y, const BinaryMask& g_cl) {
  require_same_dims(y, g_cl, "completeness");
  const std::size_t n = count(g_cl);
  if (n == 0) throw DataError("completeness: empty reference centerline");
  return static_cast<double>(count(mask_and(y, g_cl))) / static_cast<double>(n);
}

/// Predicted centerline length outside G, relative to the reference
/// centerline length, for an already skeletonized prediction.
inline double leakage_from_centerline(const BinaryMask& y_cl, const BinaryMask& g, const BinaryMask& g_cl) {
  require_same_dims(y_cl, g, "leakage");
  require_same_dims(y_cl, g_cl, "leakage");
  const std::size_t n = count(g_cl);
  if (n == 0) throw DataError("leakage: empty reference centerline");
  return static_cast<double>(count(mask_minus(y_cl, g))) / static_cast<double>(n);
}

inline double leakage(const BinaryMask& y, const BinaryMask& g, const BinaryMask& g_cl) {
  return leakage_from_centerline(skeletonize(y), g, g_cl);
}

/// NCC26(Y ∩ G_cl) - NCC26(G_cl). Negative when whole reference components
/// are missed.
inline int gaps(const BinaryMask& y, const BinaryMask& g_cl) {
  require_same_dims(y, g_cl, "gaps");
  return count_components(mask_and(y, g_cl), Connectivity::twenty_six) -
         count_components(g_cl, Connectivity::twenty_six);
}

struct CaseMetrics {
  std::string id;
  double dice = 0;
  double completeness = 0;
  double leakage = 0;
  int gaps = 0;
  int detected_components = 0;  // NCC26(Y ∩ G_cl)
};

inline CaseMetrics evaluate_case(const BinaryMask& y, const BinaryMask& g, const BinaryMask& g_cl,
                                 std::string id = {}) {
  require_same_dims(y, g, "evaluate_case");
  require_same_dims(y, g_cl, "evaluate_case");
  if (!is_subset(g_cl, g)) throw DataError("evaluate_case: reference centerline leaves the reference mask");
  CaseMetrics m;
  m.id = std::move(id);
  m.dice = dice_coeff(y, g);
  m.completeness = completeness(y, g_cl);
  m.leakage = leakage(y, g, g_cl);
  m.detected_components = count_components(mask_and(y, g_cl), Connectivity::twenty_six);
  m.gaps = m.detected_components - count_components(g_cl, Connectivity::twenty_six);
  return m;
}

struct MeanStd {
  double mean = 0;
  double std = 0;  // sample standard deviation (n - 1), 0 for a single case
};

inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd r;
  if (v.empty()) return r;
  for (double x : v) r.mean += x;
  r.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0;
    for (double x : v) ss += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return r;
}

struct MetricsReport {
  std::vector<CaseMetrics> cases;

  std::vector<double> column(const std::string& metric) const {
    std::vector<double> out;
    for (const auto& c : cases) {
      if (metric == "dice") out.push_back(c.dice);
      else if (metric == "completeness") out.push_back(c.completeness);
      else if (metric == "leakage") out.push_back(c.leakage);
      else if (metric == "gaps") out.push_back(c.gaps);
      else if (metric == "detected_components") out.push_back(c.detected_components);
      else throw UsageError("unknown metric " + metric);
    }
    return out;
  }

  MeanStd aggregate(const std::string& metric) const { return mean_std(column(metric)); }
};

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json cases = nlohmann::json::array();
  for (const auto& c : r.cases)
    cases.push_back({{"id", c.id},
                     {"dice", c.dice},
                     {"completeness", c.completeness},
                     {"leakage", c.leakage},
                     {"gaps", c.gaps},
                     {"detected_components", c.detected_components}});
  nlohmann::json agg = nlohmann::json::object();
  for (const char* m : {"dice", "completeness", "leakage", "gaps"}) {
    const MeanStd s = r.aggregate(m);
    agg[m] = {{"mean", s.mean}, {"std", s.std}};
  }
  return {{"cases", std::move(cases)}, {"aggregate", std::move(agg)}};
}

// ---------------------------------------------------------------------------
// Paired t-test

namespace detail {

// Continued fraction for the incomplete beta function (modified Lentz).
inline double beta_continued_fraction(double a, double b, double x) {
  constexpr double tiny = 1e-300;
  constexpr double eps = 1e-16;
  double c = 1.0;
  double d = 1.0 - (a + b) * x / (a + 1.0);
  if (std::abs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 10000; ++m) {
    const double m2 = 2.0 * m;
    double num = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
    d = 1.0 + num * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + num / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    num = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
    d = 1.0 + num * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + num / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < eps) return h;
  }
  throw NumericalError("incomplete beta: continued fraction did not converge");
}

}  // namespace detail

/// Regularized incomplete beta I_x(a, b).
inline double incomplete_beta(double a, double b, double x) {
  if (!(a > 0 && b > 0)) throw NumericalError("incomplete beta: parameters must be positive");
  if (x <= 0) return 0.0;
  if (x >= 1) return 1.0;
  const double log_front =
      std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * detail::beta_continued_fraction(b, a, 1.0 - x) / b;
}

/// Two-sided tail probability of Student's t with `df` degrees of freedom.
inline double student_t_two_sided_p(double t, double df) {
  if (!std::isfinite(t)) return 0.0;
  return incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
}

struct TTestResult {
  double t = 0;
  double p = 1;
  int df = 0;
};

/// Paired two-sided Student's t-test on a - b.
inline TTestResult paired_ttest(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw UsageError("paired_ttest: samples differ in length");
  if (a.size() < 2) throw UsageError("paired_ttest: need at least 2 pairs");
  std::vector<double> diff(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!std::isfinite(a[i]) || !std::isfinite(b[i])) throw NumericalError("paired_ttest: non-finite value");
    diff[i] = a[i] - b[i];
  }
  const MeanStd s = mean_std(diff);
  TTestResult r;
  r.df = static_cast<int>(diff.size()) - 1;
  bool all_zero = true;
  for (double d : diff) all_zero = all_zero && d == 0.0;
  if (all_zero) return r;  // identical samples: no evidence of a difference
  if (s.std == 0.0) throw NumericalError("paired_ttest: degenerate test (constant nonzero differences)");
  r.t = s.mean / (s.std / std::sqrt(static_cast<double>(diff.size())));
  r.p = student_t_two_sided_p(r.t, r.df);
  return r;
}

}  // namespace treelab
