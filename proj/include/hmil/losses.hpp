#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "hmil/autodiff.hpp"
#include "hmil/matrix.hpp"

namespace hmil {

struct LossBreakdown {
  double ce_c = 0.0;
  double ce_f = 0.0;
  double ia = 0.0;
  double ba = 0.0;
  double reg = 0.0;
  double beta = 0.0;
  double total = 0.0;
};

struct LossMode {
  enum Kind { kDynamic, kStatic, kCoarseFocus };
  Kind kind = kDynamic;
  double a = 1.0;  // static weights (Eq. 7)
  double b = 1.0;

  // Accepts "dynamic", "static:a,b", "coarse".
  static LossMode parse(const std::string& s) {
    LossMode m;
    if (s == "dynamic") {
      m.kind = kDynamic;
    } else if (s == "coarse" || s == "coarse_focus") {
      m.kind = kCoarseFocus;
    } else if (s.rfind("static:", 0) == 0) {
      m.kind = kStatic;
      const std::string rest = s.substr(7);
      const std::size_t comma = rest.find(',');
      if (comma == std::string::npos)
        throw ConfigError("loss mode '" + s + "': expected static:a,b");
      try {
        std::size_t used = 0;
        m.a = std::stod(rest.substr(0, comma), &used);
        if (used != comma) throw std::invalid_argument("");
        m.b = std::stod(rest.substr(comma + 1), &used);
        if (used != rest.size() - comma - 1) throw std::invalid_argument("");
      } catch (const std::exception&) {
        throw ConfigError("loss mode '" + s + "': could not parse static weights");
      }
      if (m.a < 0.0 || m.b < 0.0) throw ConfigError("static loss weights must be >= 0");
    } else {
      throw ConfigError("unknown loss mode '" + s + "' (expected dynamic|static:a,b|coarse)");
    }
    return m;
  }

  std::string str() const {
    switch (kind) {
      case kDynamic: return "dynamic";
      case kCoarseFocus: return "coarse";
      case kStatic:
        return "static:" + std::to_string(a) + "," + std::to_string(b);
    }
    return "dynamic";
  }
};

// beta = 1 - e/E, evaluated as (E-e)/E so the endpoints {1, 0.5, 1/E} are
// exact in floating point.
inline double beta_schedule(std::size_t e, std::size_t E) {
  if (E < 1) throw ScheduleError("total epochs must be >= 1");
  if (e >= E)
    throw ScheduleError("epoch index " + std::to_string(e) + " out of range for E=" +
                        std::to_string(E));
  return double(E - e) / double(E);
}

inline LossBreakdown combine(double ce_c, double ce_f, double ia, double ba, double reg,
                             std::size_t e, std::size_t E, const LossMode& mode) {
  LossBreakdown lb;
  lb.ce_c = ce_c;
  lb.ce_f = ce_f;
  lb.ia = ia;
  lb.ba = ba;
  lb.reg = reg;
  lb.beta = beta_schedule(e, E);
  switch (mode.kind) {
    case LossMode::kDynamic:
      lb.total = lb.beta * (ce_c + ia + ba) + (1.0 - lb.beta) * reg + ce_f;
      break;
    case LossMode::kStatic:
      lb.total = mode.a * (ce_f + ia + ba) + mode.b * reg + ce_c;
      break;
    case LossMode::kCoarseFocus:
      lb.total = lb.beta * (ce_f + ia + ba) + (1.0 - lb.beta) * reg + ce_c;
      break;
  }
  return lb;
}

namespace graph {

using ad::Tape;
using ad::Value;

// -log softmax(logits)[y] via log-sum-exp; logits is [K x 1].
inline Value cross_entropy(Tape& t, const Value& logits, std::size_t y) {
  const Matrix& lv = logits.value();
  if (lv.cols() != 1) throw ShapeError("cross_entropy: logits must be [K x 1], got " + lv.shape_str());
  if (y >= lv.rows())
    throw DomainError("cross_entropy: label " + std::to_string(y) + " out of range for K=" +
                      std::to_string(lv.rows()));
  Matrix sel(1, lv.rows());
  sel.at(0, y) = 1.0;
  Value row = ad::transpose(logits);
  Value lse = ad::logsumexp_rows(row);
  Value pick = ad::matmul(t.constant(sel), logits);
  return ad::sub(lse, pick);
}

// (1/N_i) sum_i (1 - cos(a_c(i), P a_f(i))); cosines clamped into [-1, 1]
// so the result stays in [0, 2] under roundoff.
inline Value instance_alignment(Tape& t, const Value& a_c, const Value& a_f, const Matrix& p) {
  const Matrix& ac = a_c.value();
  const Matrix& af = a_f.value();
  if (ac.cols() != af.cols())
    throw ShapeError("instance_alignment: instance counts disagree: " + ac.shape_str() +
                     " vs " + af.shape_str());
  if (p.rows() != ac.rows() || p.cols() != af.rows())
    throw ShapeError("instance_alignment: projection " + p.shape_str() +
                     " does not map " + af.shape_str() + " to " + ac.shape_str());

  Value paf = ad::matmul(t.constant(p), a_f);
  const Matrix& pafv = paf.value();
  const std::size_t n = ac.cols();
  for (std::size_t i = 0; i < n; ++i) {
    double s1 = 0.0, s2 = 0.0;
    for (std::size_t k = 0; k < ac.rows(); ++k) s1 += ac.at(k, i) * ac.at(k, i);
    for (std::size_t k = 0; k < pafv.rows(); ++k) s2 += pafv.at(k, i) * pafv.at(k, i);
    if (s1 == 0.0 || s2 == 0.0)
      throw DegenerateInputError("instance_alignment: instance " + std::to_string(i) +
                                 " has an all-zero attention column");
  }

  Value num = ad::sum_cols(ad::hadamard(a_c, paf));                       // [1 x N]
  Value na = ad::sqrt(ad::sum_cols(ad::hadamard(a_c, a_c)));              // [1 x N]
  Value nb = ad::sqrt(ad::sum_cols(ad::hadamard(paf, paf)));              // [1 x N]
  Value cosv = ad::clamp(ad::div(num, ad::hadamard(na, nb)), -1.0, 1.0);  // [1 x N]
  Value ones = t.constant(Matrix::full(1, n, 1.0));
  return ad::scale(ad::sum_all(ad::sub(ones, cosv)), 1.0 / double(n));
}

// -log((P p_f)[y_c]), argument clamped into [1e-12, 1].
inline Value bag_alignment(Tape& t, const Value& p_f, std::size_t y_c, const Matrix& p) {
  const Matrix& pf = p_f.value();
  if (pf.rows() != 1 || pf.cols() != p.cols())
    throw ShapeError("bag_alignment: p_f must be [1 x " + std::to_string(p.cols()) + "], got " +
                     pf.shape_str());
  if (y_c >= p.rows())
    throw DomainError("bag_alignment: coarse label " + std::to_string(y_c) +
                      " out of range for K_c=" + std::to_string(p.rows()));
  Value q = ad::matmul(t.constant(p), ad::transpose(p_f));  // [K_c x 1]
  Matrix sel(1, p.rows());
  sel.at(0, y_c) = 1.0;
  Value picked = ad::matmul(t.constant(sel), q);
  return ad::scale(ad::log(ad::clamp(picked, 1e-12, 1.0)), -1.0);
}

// Eq. 5: positives averaged per anchor, denominator over all other bags in
// the batch; anchors without positives are skipped and excluded from the
// anchor average, which keeps the scale independent of batch size.
inline Value supcon(Tape& t, const std::vector<Value>& b_fs,
                    const std::vector<std::size_t>& labels, double tau) {
  if (!(tau > 0.0)) throw ConfigError("supcon: tau must be > 0");
  if (b_fs.empty()) throw ShapeError("supcon: empty batch");
  if (b_fs.size() != labels.size())
    throw ShapeError("supcon: batch has " + std::to_string(b_fs.size()) + " features but " +
                     std::to_string(labels.size()) + " labels");

  const std::size_t b = b_fs.size();
  const std::size_t dim = b_fs[0].value().size();
  std::vector<Value> flat;
  flat.reserve(b);
  for (const Value& v : b_fs) {
    if (v.value().size() != dim) throw ShapeError("supcon: feature sizes disagree across batch");
    flat.push_back(ad::reshape(v, 1, dim));
  }
  Value z = ad::l2_normalize_rows(ad::concat_rows(flat));
  Value s = ad::scale(ad::matmul(z, ad::transpose(z)), 1.0 / tau);

  Matrix diag_mask(b, b);
  for (std::size_t i = 0; i < b; ++i) diag_mask.at(i, i) = -1e30;
  Value denom = ad::logsumexp_rows(ad::add(s, t.constant(diag_mask)));  // [b x 1]

  Matrix pos(b, b);
  std::size_t anchors = 0;
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t cnt = 0;
    for (std::size_t j = 0; j < b; ++j)
      if (j != i && labels[j] == labels[i]) ++cnt;
    if (cnt == 0) continue;
    ++anchors;
    for (std::size_t j = 0; j < b; ++j)
      if (j != i && labels[j] == labels[i]) pos.at(i, j) = 1.0 / double(cnt);
  }
  if (anchors == 0) return t.constant(Matrix(1, 1));  // every positive set empty

  Value diff = ad::add_colvec(s, ad::scale(denom, -1.0));
  return ad::scale(ad::sum_all(ad::hadamard(t.constant(pos), diff)), -1.0 / double(anchors));
}

// Weighted sum of scalar loss nodes per the selected combination scheme;
// mirrors combine() bit-for-bit (same association order).
inline Value combine_graph(Tape& t, const Value& ce_c, const Value& ce_f, const Value& ia,
                           const Value& ba, const Value& reg, std::size_t e, std::size_t E,
                           const LossMode& mode) {
  (void)t;
  const double beta = beta_schedule(e, E);
  switch (mode.kind) {
    case LossMode::kDynamic:
      return ad::add(ad::add(ad::scale(ad::add(ad::add(ce_c, ia), ba), beta),
                             ad::scale(reg, 1.0 - beta)),
                     ce_f);
    case LossMode::kStatic:
      return ad::add(ad::add(ad::scale(ad::add(ad::add(ce_f, ia), ba), mode.a),
                             ad::scale(reg, mode.b)),
                     ce_c);
    case LossMode::kCoarseFocus:
      return ad::add(ad::add(ad::scale(ad::add(ad::add(ce_f, ia), ba), beta),
                             ad::scale(reg, 1.0 - beta)),
                     ce_c);
  }
  throw ConfigError("combine_graph: unknown loss mode");
}

}  // namespace graph

// ---- plain-number wrappers (single code path through the graph builders) ----

inline double cross_entropy_from_logits(const std::vector<double>& logits, std::size_t y) {
  ad::Tape t;
  return graph::cross_entropy(t, t.constant(Matrix(logits.size(), 1, logits)), y)
      .value()
      .at(0, 0);
}

// -log p[y] for a probability vector already on the simplex.
inline double cross_entropy(const Matrix& p, std::size_t y) {
  if (p.rows() != 1 && p.cols() != 1)
    throw ShapeError("cross_entropy: expected a vector, got " + p.shape_str());
  if (y >= p.size()) throw DomainError("cross_entropy: label " + std::to_string(y) + " out of range");
  return -std::log(std::max(1e-12, p[y]));
}

inline double instance_alignment(const Matrix& a_c, const Matrix& a_f, const Matrix& p) {
  ad::Tape t;
  return graph::instance_alignment(t, t.constant(a_c), t.constant(a_f), p).value().at(0, 0);
}

inline double bag_alignment(const Matrix& p_f, std::size_t y_c, const Matrix& p) {
  ad::Tape t;
  Matrix row = p_f.rows() == 1 ? p_f : transposed(p_f);
  return graph::bag_alignment(t, t.constant(row), y_c, p).value().at(0, 0);
}

inline double supcon(const std::vector<Matrix>& b_fs, const std::vector<std::size_t>& labels,
                     double tau) {
  ad::Tape t;
  std::vector<ad::Value> vals;
  vals.reserve(b_fs.size());
  for (const Matrix& m : b_fs) vals.push_back(t.constant(m));
  return graph::supcon(t, vals, labels, tau).value().at(0, 0);
}

}  // namespace hmil
