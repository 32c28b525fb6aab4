#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "hmil/autodiff.hpp"
#include "hmil/matrix.hpp"
#include "hmil/model.hpp"

namespace hmil {

enum class FlatVariant { mean, max, abmil };

inline const char* flat_variant_name(FlatVariant v) {
  switch (v) {
    case FlatVariant::mean: return "mean";
    case FlatVariant::max: return "max";
    case FlatVariant::abmil: return "abmil";
  }
  return "mean";
}

inline FlatVariant parse_flat_variant(const std::string& s) {
  if (s == "mean") return FlatVariant::mean;
  if (s == "max") return FlatVariant::max;
  if (s == "abmil") return FlatVariant::abmil;
  throw ConfigError("unknown flat MIL variant '" + s + "'");
}

enum class LabelLevel { fine, coarse };

struct FlatConfig {
  FlatVariant variant = FlatVariant::abmil;
  std::size_t d = 0;
  std::size_t K = 0;
  LabelLevel label_level = LabelLevel::fine;
  std::uint64_t seed = 0;
};

// Single-head flat MIL model: pooled bag vector -> linear head -> softmax.
struct FlatModel {
  FlatConfig cfg;
  Matrix v1, v2, w;        // abmil gated attention, single head
  Matrix head_w, head_b;   // [K x d], [K x 1]

  std::vector<std::pair<std::string, Matrix*>> params() {
    std::vector<std::pair<std::string, Matrix*>> out;
    if (cfg.variant == FlatVariant::abmil) {
      out.emplace_back("attn.v1", &v1);
      out.emplace_back("attn.v2", &v2);
      out.emplace_back("attn.w", &w);
    }
    out.emplace_back("head.w", &head_w);
    out.emplace_back("head.b", &head_b);
    return out;
  }
};

inline FlatModel init_flat(const FlatConfig& cfg) {
  if (cfg.d < 1) throw ConfigError("flat model: d must be >= 1");
  if (cfg.K < 1) throw ConfigError("flat model: K must be >= 1");
  FlatModel m;
  m.cfg = cfg;
  Rng rng(cfg.seed);
  if (cfg.variant == FlatVariant::abmil) {
    const std::size_t d4 = attention_hidden(cfg.d);
    m.v1 = detail::init_uniform(rng, cfg.d, d4, cfg.d, d4);
    m.v2 = detail::init_uniform(rng, cfg.d, d4, cfg.d, d4);
    m.w = detail::init_uniform(rng, d4, 1, d4, 1);
  }
  m.head_w = detail::init_uniform(rng, cfg.K, cfg.d, cfg.d, cfg.K);
  m.head_b = Matrix(cfg.K, 1);
  return m;
}

struct BoundFlat {
  const FlatConfig* cfg = nullptr;
  ad::Value v1, v2, w, head_w, head_b;
  std::vector<std::size_t> param_ids;
};

inline BoundFlat bind_flat(ad::Tape& t, FlatModel& m) {
  BoundFlat b;
  b.cfg = &m.cfg;
  std::vector<ad::Value*> slots;
  if (m.cfg.variant == FlatVariant::abmil) slots = {&b.v1, &b.v2, &b.w};
  slots.push_back(&b.head_w);
  slots.push_back(&b.head_b);
  auto ps = m.params();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    *slots[i] = t.leaf(*ps[i].second, "param");
    b.param_ids.push_back(slots[i]->id());
  }
  return b;
}

struct FlatForwardGraph {
  ad::Value bag;     // [1 x d]
  ad::Value logits;  // [K x 1]
  ad::Value p;       // [1 x K]
};

inline FlatForwardGraph flat_forward_graph(ad::Tape& t, const BoundFlat& m, const Matrix& h) {
  if (h.rows() < 1) throw ShapeError("flat_forward: bag must contain at least one instance");
  if (h.cols() != m.cfg->d)
    throw ShapeError("flat_forward: bag width " + std::to_string(h.cols()) +
                     " does not match d=" + std::to_string(m.cfg->d));
  FlatForwardGraph g;
  ad::Value hv = t.constant(h);
  switch (m.cfg->variant) {
    case FlatVariant::mean:
      g.bag = ad::scale(ad::sum_cols(hv), 1.0 / double(h.rows()));
      break;
    case FlatVariant::max:
      g.bag = ad::colwise_max(hv);
      break;
    case FlatVariant::abmil: {
      ad::Value gate =
          ad::hadamard(ad::tanh(ad::matmul(hv, m.v1)), ad::sigmoid(ad::matmul(hv, m.v2)));
      ad::Value a = ad::rowwise_softmax(ad::transpose(ad::matmul(gate, m.w)));  // [1 x N]
      g.bag = ad::matmul(a, hv);
      break;
    }
  }
  g.logits = ad::add(ad::matmul(m.head_w, ad::transpose(g.bag)), m.head_b);
  g.p = ad::rowwise_softmax(ad::transpose(g.logits));
  return g;
}

// Probabilities [1 x K] for one bag.
inline Matrix flat_forward(FlatModel& m, const Matrix& h) {
  ad::Tape t;
  BoundFlat bm = bind_flat(t, m);
  return flat_forward_graph(t, bm, h).p.value();
}

}  // namespace hmil
