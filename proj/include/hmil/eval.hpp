#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "hmil/matrix.hpp"
#include "hmil/rng.hpp"

namespace hmil {

struct ClassStat {
  double value = 0.0;
  bool defined = false;
};

struct ConfusionMetrics {
  double accuracy = 0.0;
  std::vector<ClassStat> sensitivity, specificity, f1;
  double macro_sensitivity = 0.0, macro_specificity = 0.0, macro_f1 = 0.0;
  bool macro_sensitivity_defined = false, macro_specificity_defined = false,
       macro_f1_defined = false;
};

namespace detail {
inline void macro_over_defined(const std::vector<ClassStat>& per, double& macro, bool& defined) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const ClassStat& c : per)
    if (c.defined) {
      sum += c.value;
      ++n;
    }
  defined = n > 0;
  macro = defined ? sum / double(n) : 0.0;
}
}  // namespace detail

// One-vs-rest counting metrics. Classes with no true members have undefined
// sensitivity and F1 and are excluded from the macro averages.
inline ConfusionMetrics confusion_metrics(const std::vector<std::size_t>& y_true,
                                          const std::vector<std::size_t>& y_pred,
                                          std::size_t K) {
  if (y_true.empty()) throw DegenerateInputError("confusion_metrics: empty input");
  if (y_true.size() != y_pred.size())
    throw ShapeError("confusion_metrics: " + std::to_string(y_true.size()) + " labels vs " +
                     std::to_string(y_pred.size()) + " predictions");
  for (std::size_t v : y_true)
    if (v >= K) throw DomainError("confusion_metrics: label " + std::to_string(v) + " >= K");
  for (std::size_t v : y_pred)
    if (v >= K) throw DomainError("confusion_metrics: prediction " + std::to_string(v) + " >= K");

  const std::size_t n = y_true.size();
  ConfusionMetrics out;
  out.sensitivity.resize(K);
  out.specificity.resize(K);
  out.f1.resize(K);

  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (y_true[i] == y_pred[i]) ++correct;
  out.accuracy = double(correct) / double(n);

  for (std::size_t k = 0; k < K; ++k) {
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const bool t = y_true[i] == k, p = y_pred[i] == k;
      if (t && p) ++tp;
      else if (!t && p) ++fp;
      else if (t && !p) ++fn;
      else ++tn;
    }
    if (tp + fn > 0) {
      out.sensitivity[k] = {double(tp) / double(tp + fn), true};
      out.f1[k] = {double(2 * tp) / double(2 * tp + fp + fn), true};
    }
    if (tn + fp > 0) out.specificity[k] = {double(tn) / double(tn + fp), true};
  }
  detail::macro_over_defined(out.sensitivity, out.macro_sensitivity, out.macro_sensitivity_defined);
  detail::macro_over_defined(out.specificity, out.macro_specificity, out.macro_specificity_defined);
  detail::macro_over_defined(out.f1, out.macro_f1, out.macro_f1_defined);
  return out;
}

struct AucResult {
  std::vector<ClassStat> per_class;
  double macro = 0.0;
  bool macro_defined = false;
};

namespace detail {

// Rank-statistic AUC with average ranks for ties; equals the pairwise
// [s_p > s_n] + 0.5 [s_p = s_n] mean exactly (all intermediates are dyadic).
inline AucResult auc_ovr_noexcept(const std::vector<std::size_t>& y_true, const Matrix& scores) {
  const std::size_t n = y_true.size();
  const std::size_t K = scores.cols();
  AucResult out;
  out.per_class.resize(K);

  std::vector<std::size_t> order(n);
  for (std::size_t k = 0; k < K; ++k) {
    std::size_t pos = 0;
    for (std::size_t v : y_true)
      if (v == k) ++pos;
    const std::size_t neg = n - pos;
    if (pos == 0 || neg == 0) continue;

    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return scores.at(a, k) < scores.at(b, k);
    });
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < n) {
      std::size_t j = i;
      while (j + 1 < n && scores.at(order[j + 1], k) == scores.at(order[i], k)) ++j;
      const double avg_rank = (double(i + 1) + double(j + 1)) / 2.0;  // 1-based
      for (std::size_t q = i; q <= j; ++q)
        if (y_true[order[q]] == k) rank_sum_pos += avg_rank;
      i = j + 1;
    }
    const double auc =
        (rank_sum_pos - double(pos) * double(pos + 1) / 2.0) / (double(pos) * double(neg));
    out.per_class[k] = {auc, true};
  }
  macro_over_defined(out.per_class, out.macro, out.macro_defined);
  return out;
}

}  // namespace detail

inline AucResult auc_ovr(const std::vector<std::size_t>& y_true, const Matrix& scores) {
  if (y_true.size() < 2) throw DegenerateInputError("auc_ovr: need at least 2 samples");
  if (y_true.size() != scores.rows())
    throw ShapeError("auc_ovr: " + std::to_string(y_true.size()) + " labels vs " +
                     scores.shape_str() + " scores");
  for (std::size_t v : y_true)
    if (v >= scores.cols())
      throw DomainError("auc_ovr: label " + std::to_string(v) + " >= K");
  AucResult out = detail::auc_ovr_noexcept(y_true, scores);
  if (!out.macro_defined)
    throw DegenerateInputError("auc_ovr: every class lacks positives or negatives");
  return out;
}

// Lowest index wins ties.
inline std::size_t argmax_row(const Matrix& m, std::size_t row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < m.cols(); ++j)
    if (m.at(row, j) > m.at(row, best)) best = j;
  return best;
}

// Fraction of samples whose projected fine prediction agrees with the coarse
// head: argmax(P p_f) == argmax(p_c).
inline double hierarchy_consistency(const Matrix& p_c, const Matrix& p_f, const Matrix& p) {
  if (p_c.rows() != p_f.rows())
    throw ShapeError("hierarchy_consistency: " + std::to_string(p_c.rows()) + " coarse rows vs " +
                     std::to_string(p_f.rows()) + " fine rows");
  if (p_c.rows() == 0) throw DegenerateInputError("hierarchy_consistency: empty batch");
  if (p_c.cols() != p.rows() || p_f.cols() != p.cols())
    throw ShapeError("hierarchy_consistency: projection " + p.shape_str() +
                     " does not match batches " + p_c.shape_str() + ", " + p_f.shape_str());
  const Matrix projected = multiply(p_f, transposed(p));  // [n x K_c]
  std::size_t agree = 0;
  for (std::size_t i = 0; i < p_c.rows(); ++i)
    if (argmax_row(projected, i) == argmax_row(p_c, i)) ++agree;
  return double(agree) / double(p_c.rows());
}

struct BootstrapStat {
  double mean = 0.0;
  double sd = 0.0;
  double lo = 0.0;   // 2.5th percentile
  double hi = 0.0;   // 97.5th percentile
  std::size_t used = 0;  // replicates where the metric was defined
};

namespace detail {

inline double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  if (v.size() == 1) return v[0];
  const double idx = q * double(v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(idx));
  const std::size_t hi = static_cast<std::size_t>(std::ceil(idx));
  const double w = idx - double(lo);
  return v[lo] * (1.0 - w) + v[hi] * w;
}

inline BootstrapStat summarize(const std::vector<double>& vals) {
  BootstrapStat s;
  s.used = vals.size();
  if (vals.empty()) return s;
  double sum = 0.0;
  for (double v : vals) sum += v;
  s.mean = sum / double(vals.size());
  double ss = 0.0;
  for (double v : vals) ss += (v - s.mean) * (v - s.mean);
  s.sd = vals.size() > 1 ? std::sqrt(ss / double(vals.size() - 1)) : 0.0;
  s.lo = percentile(vals, 0.025);
  s.hi = percentile(vals, 0.975);
  return s;
}

}  // namespace detail

// Nonparametric bootstrap over samples. Replicate r resamples n indices with
// a generator seeded by (seed, r); metrics undefined in a replicate are
// skipped for that metric. force_identity keeps the original indices (test
// hook for the degenerate-resample contract).
inline std::map<std::string, BootstrapStat> bootstrap_ci(
    const std::vector<std::size_t>& y_true, const std::vector<std::size_t>& y_pred,
    const Matrix& scores, std::size_t K, std::size_t replicates, std::uint64_t seed,
    bool force_identity = false) {
  if (replicates < 1) throw ConfigError("bootstrap_ci: replicates must be >= 1");
  if (y_true.size() != y_pred.size() || y_true.size() != scores.rows())
    throw ShapeError("bootstrap_ci: input sizes disagree");
  const std::size_t n = y_true.size();
  if (n == 0) throw DegenerateInputError("bootstrap_ci: empty input");

  std::map<std::string, std::vector<double>> samples;
  std::vector<std::size_t> bt(n), bp(n);
  Matrix bs(n, scores.cols());
  for (std::size_t r = 0; r < replicates; ++r) {
    Rng rng(mix_seed(seed, r));
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t idx =
          force_identity ? i
                         : static_cast<std::size_t>(rng.uniform_int(0, std::int64_t(n) - 1));
      bt[i] = y_true[idx];
      bp[i] = y_pred[idx];
      for (std::size_t j = 0; j < scores.cols(); ++j) bs.at(i, j) = scores.at(idx, j);
    }
    const ConfusionMetrics cm = confusion_metrics(bt, bp, K);
    samples["accuracy"].push_back(cm.accuracy);
    if (cm.macro_sensitivity_defined) samples["macro_sensitivity"].push_back(cm.macro_sensitivity);
    if (cm.macro_specificity_defined) samples["macro_specificity"].push_back(cm.macro_specificity);
    if (cm.macro_f1_defined) samples["macro_f1"].push_back(cm.macro_f1);
    const AucResult ar = detail::auc_ovr_noexcept(bt, bs);
    if (ar.macro_defined) samples["macro_auc"].push_back(ar.macro);
  }
  std::map<std::string, BootstrapStat> out;
  for (const auto& [name, vals] : samples) out[name] = detail::summarize(vals);
  return out;
}

// Full report for one label level.
struct MetricsReport {
  std::size_t n = 0;
  double accuracy = 0.0;
  ConfusionMetrics confusion;
  AucResult auc;
  std::map<std::string, BootstrapStat> bootstrap;  // empty when not requested
};

inline MetricsReport compute_report(const std::vector<std::size_t>& y_true,
                                    const std::vector<std::size_t>& y_pred,
                                    const Matrix& scores, std::size_t K,
                                    std::size_t bootstrap_replicates = 0,
                                    std::uint64_t seed = 0, bool force_identity = false) {
  MetricsReport rep;
  rep.n = y_true.size();
  rep.confusion = confusion_metrics(y_true, y_pred, K);
  rep.accuracy = rep.confusion.accuracy;
  rep.auc = auc_ovr(y_true, scores);
  if (bootstrap_replicates > 0)
    rep.bootstrap =
        bootstrap_ci(y_true, y_pred, scores, K, bootstrap_replicates, seed, force_identity);
  return rep;
}

}  // namespace hmil
