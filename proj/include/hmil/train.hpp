#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "hmil/baselines.hpp"
#include "hmil/data.hpp"
#include "hmil/eval.hpp"
#include "hmil/losses.hpp"
#include "hmil/model.hpp"

namespace hmil {

enum class SelectMetric { fine_macro_auc, fine_f1 };

inline const char* select_metric_name(SelectMetric m) {
  return m == SelectMetric::fine_macro_auc ? "fine_macro_auc" : "fine_f1";
}

inline SelectMetric parse_select_metric(const std::string& s) {
  if (s == "fine_macro_auc") return SelectMetric::fine_macro_auc;
  if (s == "fine_f1") return SelectMetric::fine_f1;
  throw ConfigError("unknown select metric '" + s + "'");
}

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 512;
  double lr = 1e-3;
  double weight_decay = 1e-5;
  LossMode loss_mode{};
  double tau = 0.1;
  std::uint64_t seed = 0;
  SelectMetric select_metric = SelectMetric::fine_macro_auc;
  double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
  bool decoupled_wd = false;  // default is the classic coupled-L2 form
  bool use_ham = true, use_hba = true, use_scl = true;
};

inline void validate_train_config(const TrainConfig& cfg) {
  if (cfg.epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (cfg.batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (!(cfg.lr > 0.0)) throw ConfigError("train: learning rate must be > 0");
  if (cfg.weight_decay < 0.0) throw ConfigError("train: weight decay must be >= 0");
  if (!(cfg.tau > 0.0)) throw ConfigError("train: tau must be > 0");
  if (cfg.adam_beta1 < 0.0 || cfg.adam_beta1 >= 1.0 || cfg.adam_beta2 < 0.0 ||
      cfg.adam_beta2 >= 1.0)
    throw ConfigError("train: adam betas must lie in [0, 1)");
  if (!(cfg.adam_eps > 0.0)) throw ConfigError("train: adam eps must be > 0");
}

// ---- Adam -------------------------------------------------------------------

struct AdamState {
  std::vector<Matrix> m, v;
  std::size_t step = 0;
};

inline AdamState init_adam(const std::vector<Matrix*>& params) {
  AdamState st;
  for (const Matrix* p : params) {
    st.m.emplace_back(p->rows(), p->cols());
    st.v.emplace_back(p->rows(), p->cols());
  }
  return st;
}

// Classic Adam with bias correction. Weight decay folds into the gradient
// (coupled L2) unless decoupled, in which case it is applied directly to the
// parameter after the moment update.
inline void adam_step(const std::vector<Matrix*>& params, const std::vector<Matrix>& grads,
                      AdamState& st, double lr, double wd, double beta1, double beta2,
                      double eps, bool decoupled = false) {
  if (params.size() != grads.size() || params.size() != st.m.size())
    throw ShapeError("adam_step: parameter/gradient/state counts disagree");
  ++st.step;
  const double bc1 = 1.0 - std::pow(beta1, double(st.step));
  const double bc2 = 1.0 - std::pow(beta2, double(st.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Matrix& p = *params[k];
    const Matrix& g0 = grads[k];
    if (!p.same_shape(g0))
      throw ShapeError("adam_step: parameter " + std::to_string(k) + " is " + p.shape_str() +
                       " but gradient is " + g0.shape_str());
    Matrix& m = st.m[k];
    Matrix& v = st.v[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double g = decoupled ? g0[i] : g0[i] + wd * p[i];
      m[i] = beta1 * m[i] + (1.0 - beta1) * g;
      v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      double delta = lr * mhat / (std::sqrt(vhat) + eps);
      if (decoupled) delta += lr * wd * p[i];
      p[i] -= delta;
    }
  }
}

// ---- history ------------------------------------------------------------------

struct EpochRecord {
  std::size_t epoch = 0;
  LossBreakdown loss;  // batch-mean components; total recombined from them
  double val_metric = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> records;
  std::size_t best_epoch = 0;
  double best_metric = 0.0;
  bool hierarchical = true;
};

// ---- batch losses ---------------------------------------------------------------

struct BatchLoss {
  ad::Value total;
  LossBreakdown lb;
};

namespace detail {

template <typename Fn>
ad::Value guard_component(const char* name, Fn&& fn) {
  try {
    return fn();
  } catch (const NumericError& err) {
    throw NumericError(std::string("while computing ") + name + ": " + err.what());
  }
}

inline ad::Value acc(ad::Tape& t, ad::Value sum, const ad::Value& term) {
  (void)t;
  return sum.valid() ? ad::add(sum, term) : term;
}

}  // namespace detail

inline BatchLoss hmil_batch_loss(ad::Tape& t, const BoundModel& bm, const Dataset& ds,
                                 const std::vector<std::size_t>& batch, const Matrix& P,
                                 std::size_t e, const TrainConfig& cfg) {
  if (batch.empty()) throw ShapeError("hmil_batch_loss: empty batch");
  const double inv = 1.0 / double(batch.size());
  ad::Value ce_c_sum, ce_f_sum, ia_sum, ba_sum;
  std::vector<ad::Value> bfs;
  std::vector<std::size_t> fine_labels;
  for (std::size_t idx : batch) {
    const FeatureBag& bag = ds.bags[idx];
    ForwardGraph fg = forward_graph(t, bm, bag.features);
    ce_c_sum = detail::acc(t, ce_c_sum, detail::guard_component("ce_c", [&] {
                             return graph::cross_entropy(t, fg.logits_c, bag.y_c);
                           }));
    ce_f_sum = detail::acc(t, ce_f_sum, detail::guard_component("ce_f", [&] {
                             return graph::cross_entropy(t, fg.logits_f, bag.y_f);
                           }));
    if (cfg.use_ham)
      ia_sum = detail::acc(t, ia_sum, detail::guard_component("ia", [&] {
                             return graph::instance_alignment(t, fg.A_c, fg.A_f, P);
                           }));
    if (cfg.use_hba)
      ba_sum = detail::acc(t, ba_sum, detail::guard_component("ba", [&] {
                             return graph::bag_alignment(t, fg.p_f, bag.y_c, P);
                           }));
    bfs.push_back(fg.B_f);
    fine_labels.push_back(bag.y_f);
  }
  ad::Value zero = t.constant(Matrix(1, 1));
  ad::Value ce_c = ad::scale(ce_c_sum, inv);
  ad::Value ce_f = ad::scale(ce_f_sum, inv);
  ad::Value ia = cfg.use_ham ? ad::scale(ia_sum, inv) : zero;
  ad::Value ba = cfg.use_hba ? ad::scale(ba_sum, inv) : zero;
  ad::Value reg = cfg.use_scl ? detail::guard_component("reg", [&] {
                                  return graph::supcon(t, bfs, fine_labels, cfg.tau);
                                })
                              : zero;
  BatchLoss out;
  out.total = graph::combine_graph(t, ce_c, ce_f, ia, ba, reg, e, cfg.epochs, cfg.loss_mode);
  out.lb = combine(ce_c.value().at(0, 0), ce_f.value().at(0, 0), ia.value().at(0, 0),
                   ba.value().at(0, 0), reg.value().at(0, 0), e, cfg.epochs, cfg.loss_mode);
  return out;
}

inline BatchLoss flat_batch_loss(ad::Tape& t, const BoundFlat& bm, const Dataset& ds,
                                 const std::vector<std::size_t>& batch, std::size_t e,
                                 const TrainConfig& cfg) {
  if (batch.empty()) throw ShapeError("flat_batch_loss: empty batch");
  ad::Value ce_sum;
  for (std::size_t idx : batch) {
    const FeatureBag& bag = ds.bags[idx];
    const std::size_t y = bm.cfg->label_level == LabelLevel::coarse ? bag.y_c : bag.y_f;
    FlatForwardGraph fg = flat_forward_graph(t, bm, bag.features);
    ce_sum = detail::acc(t, ce_sum, detail::guard_component("ce", [&] {
                           return graph::cross_entropy(t, fg.logits, y);
                         }));
  }
  BatchLoss out;
  out.total = ad::scale(ce_sum, 1.0 / double(batch.size()));
  out.lb = LossBreakdown{};
  out.lb.ce_f = out.total.value().at(0, 0);
  out.lb.beta = beta_schedule(e, cfg.epochs);
  out.lb.total = out.lb.ce_f;
  return out;
}

// ---- validation scoring -----------------------------------------------------------

namespace detail {

inline double metric_from_scores(const std::vector<std::size_t>& y_true, const Matrix& scores,
                                 SelectMetric sm) {
  if (sm == SelectMetric::fine_macro_auc) return auc_ovr(y_true, scores).macro;
  std::vector<std::size_t> preds(y_true.size());
  for (std::size_t i = 0; i < scores.rows(); ++i) preds[i] = argmax_row(scores, i);
  const ConfusionMetrics cm = confusion_metrics(y_true, preds, scores.cols());
  return cm.macro_f1;
}

}  // namespace detail

inline double validation_metric(HmilModel& model, const Dataset& ds,
                                const std::vector<std::size_t>& val_idx, SelectMetric sm) {
  Matrix scores(val_idx.size(), model.cfg.K_f);
  std::vector<std::size_t> y(val_idx.size());
  for (std::size_t i = 0; i < val_idx.size(); ++i) {
    const FeatureBag& bag = ds.bags[val_idx[i]];
    const ForwardOutput out = forward(model, bag.features);
    for (std::size_t j = 0; j < model.cfg.K_f; ++j) scores.at(i, j) = out.p_f.at(0, j);
    y[i] = bag.y_f;
  }
  return detail::metric_from_scores(y, scores, sm);
}

inline double validation_metric_flat(FlatModel& model, const Dataset& ds,
                                     const std::vector<std::size_t>& val_idx, SelectMetric sm) {
  Matrix scores(val_idx.size(), model.cfg.K);
  std::vector<std::size_t> y(val_idx.size());
  for (std::size_t i = 0; i < val_idx.size(); ++i) {
    const FeatureBag& bag = ds.bags[val_idx[i]];
    const Matrix p = flat_forward(model, bag.features);
    for (std::size_t j = 0; j < model.cfg.K; ++j) scores.at(i, j) = p.at(0, j);
    y[i] = model.cfg.label_level == LabelLevel::coarse ? bag.y_c : bag.y_f;
  }
  return detail::metric_from_scores(y, scores, sm);
}

// ---- training loops -----------------------------------------------------------------

namespace detail {

inline std::vector<std::vector<std::size_t>> make_batches(std::vector<std::size_t>& order,
                                                          Rng& rng, std::size_t batch_size) {
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    const std::size_t end = std::min(order.size(), i + batch_size);
    batches.emplace_back(order.begin() + std::ptrdiff_t(i), order.begin() + std::ptrdiff_t(end));
  }
  return batches;
}

// mean of per-batch components, total recombined so the breakdown identity
// holds for the epoch record too
inline LossBreakdown mean_breakdown(const std::vector<LossBreakdown>& per_batch, std::size_t e,
                                    std::size_t E, const LossMode& mode) {
  double ce_c = 0, ce_f = 0, ia = 0, ba = 0, reg = 0;
  for (const LossBreakdown& lb : per_batch) {
    ce_c += lb.ce_c;
    ce_f += lb.ce_f;
    ia += lb.ia;
    ba += lb.ba;
    reg += lb.reg;
  }
  const double inv = per_batch.empty() ? 0.0 : 1.0 / double(per_batch.size());
  return combine(ce_c * inv, ce_f * inv, ia * inv, ba * inv, reg * inv, e, E, mode);
}

}  // namespace detail

// Trains in place; on return the model holds the parameters of best_epoch
// (highest validation select_metric, latest epoch on ties).
inline TrainHistory train(HmilModel& model, const Dataset& ds, const TrainConfig& cfg) {
  validate_train_config(cfg);
  const std::vector<std::size_t> train_idx = ds.split_indices(Split::train);
  const std::vector<std::size_t> val_idx = ds.split_indices(Split::val);
  if (train_idx.empty()) throw ConfigError("train: dataset has no train split");
  if (val_idx.empty()) throw ConfigError("train: dataset has no val split");
  if (ds.d_c != model.cfg.d_c)
    throw IncompatibilityError("train: dataset width d=" + std::to_string(ds.d_c) +
                               " but model d_c=" + std::to_string(model.cfg.d_c));
  if (ds.taxonomy.num_coarse() != model.cfg.K_c || ds.taxonomy.num_fine() != model.cfg.K_f)
    throw IncompatibilityError("train: taxonomy size does not match model class counts");

  const Matrix P = projection_matrix(ds.taxonomy);
  auto named = model.params();
  std::vector<Matrix*> params;
  for (auto& [name, mat] : named) params.push_back(mat);
  AdamState adam = init_adam(params);
  Rng shuffle_rng(mix_seed(cfg.seed, 0x7241ULL));
  std::vector<std::size_t> order = train_idx;

  TrainHistory hist;
  hist.hierarchical = true;
  double best = -std::numeric_limits<double>::infinity();
  std::vector<Matrix> best_params;

  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    std::vector<LossBreakdown> per_batch;
    for (const auto& batch : detail::make_batches(order, shuffle_rng, cfg.batch_size)) {
      ad::Tape t;
      BoundModel bm = bind(t, model);
      BatchLoss bl = hmil_batch_loss(t, bm, ds, batch, P, e, cfg);
      ad::Gradients grads = t.backward(bl.total, bm.param_ids);
      std::vector<Matrix> gs;
      gs.reserve(bm.param_ids.size());
      for (std::size_t id : bm.param_ids) gs.push_back(grads.at(id));
      adam_step(params, gs, adam, cfg.lr, cfg.weight_decay, cfg.adam_beta1, cfg.adam_beta2,
                cfg.adam_eps, cfg.decoupled_wd);
      per_batch.push_back(bl.lb);
    }
    EpochRecord rec;
    rec.epoch = e;
    rec.loss = detail::mean_breakdown(per_batch, e, cfg.epochs, cfg.loss_mode);
    rec.val_metric = validation_metric(model, ds, val_idx, cfg.select_metric);
    hist.records.push_back(rec);
    if (rec.val_metric >= best) {
      best = rec.val_metric;
      hist.best_epoch = e;
      best_params.clear();
      for (const Matrix* p : params) best_params.push_back(*p);
    }
  }
  hist.best_metric = best;
  for (std::size_t k = 0; k < params.size(); ++k) *params[k] = best_params[k];
  return hist;
}

inline TrainHistory train_flat(FlatModel& model, const Dataset& ds, const TrainConfig& cfg) {
  validate_train_config(cfg);
  const std::vector<std::size_t> train_idx = ds.split_indices(Split::train);
  const std::vector<std::size_t> val_idx = ds.split_indices(Split::val);
  if (train_idx.empty()) throw ConfigError("train: dataset has no train split");
  if (val_idx.empty()) throw ConfigError("train: dataset has no val split");
  if (ds.d_c != model.cfg.d)
    throw IncompatibilityError("train: dataset width d=" + std::to_string(ds.d_c) +
                               " but model d=" + std::to_string(model.cfg.d));
  const std::size_t want_k = model.cfg.label_level == LabelLevel::coarse
                                 ? ds.taxonomy.num_coarse()
                                 : ds.taxonomy.num_fine();
  if (model.cfg.K != want_k)
    throw IncompatibilityError("train: model K=" + std::to_string(model.cfg.K) +
                               " but taxonomy has " + std::to_string(want_k) + " classes");

  auto named = model.params();
  std::vector<Matrix*> params;
  for (auto& [name, mat] : named) params.push_back(mat);
  AdamState adam = init_adam(params);
  Rng shuffle_rng(mix_seed(cfg.seed, 0x7241ULL));
  std::vector<std::size_t> order = train_idx;

  TrainHistory hist;
  hist.hierarchical = false;
  double best = -std::numeric_limits<double>::infinity();
  std::vector<Matrix> best_params;

  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    std::vector<LossBreakdown> per_batch;
    for (const auto& batch : detail::make_batches(order, shuffle_rng, cfg.batch_size)) {
      ad::Tape t;
      BoundFlat bm = bind_flat(t, model);
      BatchLoss bl = flat_batch_loss(t, bm, ds, batch, e, cfg);
      ad::Gradients grads = t.backward(bl.total, bm.param_ids);
      std::vector<Matrix> gs;
      gs.reserve(bm.param_ids.size());
      for (std::size_t id : bm.param_ids) gs.push_back(grads.at(id));
      adam_step(params, gs, adam, cfg.lr, cfg.weight_decay, cfg.adam_beta1, cfg.adam_beta2,
                cfg.adam_eps, cfg.decoupled_wd);
      per_batch.push_back(bl.lb);
    }
    EpochRecord rec;
    rec.epoch = e;
    for (const LossBreakdown& lb : per_batch) rec.loss.ce_f += lb.ce_f;
    if (!per_batch.empty()) rec.loss.ce_f /= double(per_batch.size());
    rec.loss.total = rec.loss.ce_f;
    rec.loss.beta = beta_schedule(e, cfg.epochs);
    rec.val_metric = validation_metric_flat(model, ds, val_idx, cfg.select_metric);
    hist.records.push_back(rec);
    if (rec.val_metric >= best) {
      best = rec.val_metric;
      hist.best_epoch = e;
      best_params.clear();
      for (const Matrix* p : params) best_params.push_back(*p);
    }
  }
  hist.best_metric = best;
  for (std::size_t k = 0; k < params.size(); ++k) *params[k] = best_params[k];
  return hist;
}

}  // namespace hmil
