#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "hmil/autodiff.hpp"
#include "hmil/matrix.hpp"
#include "hmil/rng.hpp"

namespace hmil {

struct HmilConfig {
  std::size_t d_c = 0;
  std::size_t d_f = 0;        // 0 = derive as d_c/4
  std::size_t K_c = 0;
  std::size_t K_f = 0;
  std::size_t ofr_hidden = 0; // 0 = derive as d_c/2
  bool use_ofr = true;        // off: fine branch consumes h_c directly, d_f = d_c
  std::uint64_t seed = 0;
};

inline HmilConfig resolve(HmilConfig cfg) {
  if (cfg.d_c < 1) throw ConfigError("d_c must be >= 1");
  if (cfg.K_c < 1) throw ConfigError("K_c must be >= 1");
  if (cfg.K_f < cfg.K_c)
    throw ConfigError("K_f (" + std::to_string(cfg.K_f) + ") must be >= K_c (" +
                      std::to_string(cfg.K_c) + ")");
  if (!cfg.use_ofr) {
    if (cfg.d_f != 0 && cfg.d_f != cfg.d_c)
      throw ConfigError("d_f must equal d_c when the re-embedder is disabled");
    cfg.d_f = cfg.d_c;
    cfg.ofr_hidden = 0;
    return cfg;
  }
  if (cfg.d_f == 0) {
    if (cfg.d_c % 4 != 0)
      throw ConfigError("d_c (" + std::to_string(cfg.d_c) + ") must be divisible by 4 to default d_f");
    cfg.d_f = cfg.d_c / 4;
  }
  if (cfg.d_f < 1) throw ConfigError("d_f must be >= 1");
  if (cfg.ofr_hidden == 0) cfg.ofr_hidden = std::max<std::size_t>(1, cfg.d_c / 2);
  return cfg;
}

inline std::size_t attention_hidden(std::size_t d) { return std::max<std::size_t>(1, d / 4); }

// All learnable parameters of both branches. Enumeration order of params()
// is the canonical order for initialization, optimizer state, checkpoints.
struct HmilModel {
  HmilConfig cfg;
  Matrix ofr_w1, ofr_b1, ofr_w2, ofr_b2;        // d_c->hidden->d_f, tanh hidden
  Matrix v_c1, v_c2, w_c;                       // coarse gated attention
  Matrix v_f1, v_f2, w_f;                       // fine gated attention
  Matrix head_w_c, head_b_c;                    // [K_c x d_c], [K_c x 1]
  Matrix head_w_f, head_b_f;                    // [K_f x d_f], [K_f x 1]

  std::vector<std::pair<std::string, Matrix*>> params() {
    std::vector<std::pair<std::string, Matrix*>> out;
    if (cfg.use_ofr) {
      out.emplace_back("ofr.w1", &ofr_w1);
      out.emplace_back("ofr.b1", &ofr_b1);
      out.emplace_back("ofr.w2", &ofr_w2);
      out.emplace_back("ofr.b2", &ofr_b2);
    }
    out.emplace_back("attn_c.v1", &v_c1);
    out.emplace_back("attn_c.v2", &v_c2);
    out.emplace_back("attn_c.w", &w_c);
    out.emplace_back("attn_f.v1", &v_f1);
    out.emplace_back("attn_f.v2", &v_f2);
    out.emplace_back("attn_f.w", &w_f);
    out.emplace_back("head_c.w", &head_w_c);
    out.emplace_back("head_c.b", &head_b_c);
    out.emplace_back("head_f.w", &head_w_f);
    out.emplace_back("head_f.b", &head_b_f);
    return out;
  }
};

namespace detail {
inline Matrix init_uniform(Rng& rng, std::size_t rows, std::size_t cols, std::size_t fan_in,
                           std::size_t fan_out) {
  const double s = std::sqrt(6.0 / double(fan_in + fan_out));
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = rng.uniform(-s, s);
  return m;
}
}  // namespace detail

inline HmilModel init_model(HmilConfig raw) {
  HmilConfig cfg = resolve(raw);
  HmilModel m;
  m.cfg = cfg;
  Rng rng(cfg.seed);
  const std::size_t dc4 = attention_hidden(cfg.d_c);
  const std::size_t df4 = attention_hidden(cfg.d_f);
  if (cfg.use_ofr) {
    m.ofr_w1 = detail::init_uniform(rng, cfg.d_c, cfg.ofr_hidden, cfg.d_c, cfg.ofr_hidden);
    m.ofr_b1 = Matrix(1, cfg.ofr_hidden);
    m.ofr_w2 = detail::init_uniform(rng, cfg.ofr_hidden, cfg.d_f, cfg.ofr_hidden, cfg.d_f);
    m.ofr_b2 = Matrix(1, cfg.d_f);
  }
  m.v_c1 = detail::init_uniform(rng, cfg.d_c, dc4, cfg.d_c, dc4);
  m.v_c2 = detail::init_uniform(rng, cfg.d_c, dc4, cfg.d_c, dc4);
  m.w_c = detail::init_uniform(rng, dc4, cfg.K_c, dc4, cfg.K_c);
  m.v_f1 = detail::init_uniform(rng, cfg.d_f, df4, cfg.d_f, df4);
  m.v_f2 = detail::init_uniform(rng, cfg.d_f, df4, cfg.d_f, df4);
  m.w_f = detail::init_uniform(rng, df4, cfg.K_f, df4, cfg.K_f);
  m.head_w_c = detail::init_uniform(rng, cfg.K_c, cfg.d_c, cfg.d_c, cfg.K_c);
  m.head_b_c = Matrix(cfg.K_c, 1);
  m.head_w_f = detail::init_uniform(rng, cfg.K_f, cfg.d_f, cfg.d_f, cfg.K_f);
  m.head_b_f = Matrix(cfg.K_f, 1);
  return m;
}

// Model parameters bound to a tape as leaves, ids matching params() order.
struct BoundModel {
  const HmilConfig* cfg = nullptr;
  ad::Value ofr_w1, ofr_b1, ofr_w2, ofr_b2;
  ad::Value v_c1, v_c2, w_c, v_f1, v_f2, w_f;
  ad::Value head_w_c, head_b_c, head_w_f, head_b_f;
  std::vector<std::size_t> param_ids;
};

// Wires already-created leaves (in params() order) into a BoundModel.
inline BoundModel bind_leaves(const HmilConfig& cfg, const std::vector<ad::Value>& leaves) {
  BoundModel b;
  b.cfg = &cfg;
  std::vector<ad::Value*> slots;
  if (cfg.use_ofr) slots = {&b.ofr_w1, &b.ofr_b1, &b.ofr_w2, &b.ofr_b2};
  for (ad::Value* v : std::vector<ad::Value*>{&b.v_c1, &b.v_c2, &b.w_c, &b.v_f1, &b.v_f2,
                                              &b.w_f, &b.head_w_c, &b.head_b_c, &b.head_w_f,
                                              &b.head_b_f})
    slots.push_back(v);
  if (leaves.size() != slots.size())
    throw GraphError("bind_leaves: expected " + std::to_string(slots.size()) + " leaves, got " +
                     std::to_string(leaves.size()));
  for (std::size_t i = 0; i < slots.size(); ++i) {
    *slots[i] = leaves[i];
    b.param_ids.push_back(leaves[i].id());
  }
  return b;
}

inline BoundModel bind(ad::Tape& t, HmilModel& m) {
  std::vector<ad::Value> leaves;
  for (auto& [name, mat] : m.params()) leaves.push_back(t.leaf(*mat, "param"));
  return bind_leaves(m.cfg, leaves);
}

// ---- graph-building blocks --------------------------------------------------

inline ad::Value graph_ofr(const BoundModel& m, const ad::Value& h_c) {
  ad::Value hidden = ad::tanh(ad::add_rowvec(ad::matmul(h_c, m.ofr_w1), m.ofr_b1));
  return ad::add_rowvec(ad::matmul(hidden, m.ofr_w2), m.ofr_b2);
}

// A = rowwise_softmax_over_instances( transpose( (tanh(hV1) .* sigmoid(hV2)) W ) )
inline ad::Value graph_gated_attention(const ad::Value& h, const ad::Value& v1,
                                       const ad::Value& v2, const ad::Value& w) {
  ad::Value gate = ad::hadamard(ad::tanh(ad::matmul(h, v1)), ad::sigmoid(ad::matmul(h, v2)));
  return ad::rowwise_softmax(ad::transpose(ad::matmul(gate, w)));
}

inline ad::Value graph_attention_pool(const ad::Value& a, const ad::Value& h) {
  return ad::matmul(a, h);
}

// logits[k] = w_k . B[k] + bias_k, shape [K x 1]
inline ad::Value graph_classify(const ad::Value& b, const ad::Value& head_w,
                                const ad::Value& head_b) {
  return ad::add(ad::sum_rows(ad::hadamard(head_w, b)), head_b);
}

struct ForwardGraph {
  ad::Value h_f;            // [N_i x d_f]
  ad::Value A_c, A_f;       // [K x N_i]
  ad::Value B_c, B_f;       // [K x d]
  ad::Value logits_c, logits_f;  // [K x 1]
  ad::Value p_c, p_f;       // [1 x K]
};

inline ForwardGraph forward_graph(ad::Tape& t, const BoundModel& m, const Matrix& h_c) {
  if (h_c.rows() < 1) throw ShapeError("forward: bag must contain at least one instance");
  if (h_c.cols() != m.cfg->d_c)
    throw ShapeError("forward: bag width " + std::to_string(h_c.cols()) +
                     " does not match d_c=" + std::to_string(m.cfg->d_c));
  ForwardGraph g;
  ad::Value hc = t.constant(h_c);
  g.h_f = m.cfg->use_ofr ? graph_ofr(m, hc) : hc;
  g.A_c = graph_gated_attention(hc, m.v_c1, m.v_c2, m.w_c);
  g.A_f = graph_gated_attention(g.h_f, m.v_f1, m.v_f2, m.w_f);
  g.B_c = graph_attention_pool(g.A_c, hc);
  g.B_f = graph_attention_pool(g.A_f, g.h_f);
  g.logits_c = graph_classify(g.B_c, m.head_w_c, m.head_b_c);
  g.logits_f = graph_classify(g.B_f, m.head_w_f, m.head_b_f);
  g.p_c = ad::rowwise_softmax(ad::transpose(g.logits_c));
  g.p_f = ad::rowwise_softmax(ad::transpose(g.logits_f));
  return g;
}

struct ForwardOutput {
  Matrix A_c, A_f;  // [K x N_i]
  Matrix B_c, B_f;  // [K x d]
  Matrix p_c, p_f;  // [1 x K]
};

inline ForwardOutput forward(HmilModel& m, const Matrix& h_c) {
  ad::Tape t;
  BoundModel bm = bind(t, m);
  ForwardGraph g = forward_graph(t, bm, h_c);
  return ForwardOutput{g.A_c.value(), g.A_f.value(), g.B_c.value(),
                       g.B_f.value(), g.p_c.value(), g.p_f.value()};
}

// Plain-matrix views of the building blocks (single code path via the tape).
inline Matrix ofr_forward(HmilModel& m, const Matrix& h_c) {
  if (!m.cfg.use_ofr) return h_c;
  if (h_c.cols() != m.cfg.d_c)
    throw ShapeError("ofr_forward: input width " + std::to_string(h_c.cols()) +
                     " does not match d_c=" + std::to_string(m.cfg.d_c));
  ad::Tape t;
  BoundModel bm = bind(t, m);
  return graph_ofr(bm, t.constant(h_c)).value();
}

inline Matrix gated_attention(const Matrix& h, const Matrix& v1, const Matrix& v2,
                              const Matrix& w) {
  ad::Tape t;
  return graph_gated_attention(t.constant(h), t.constant(v1), t.constant(v2), t.constant(w))
      .value();
}

inline Matrix attention_pool(const Matrix& a, const Matrix& h) {
  if (a.cols() != h.rows())
    throw ShapeError("attention_pool: " + a.shape_str() + " vs " + h.shape_str());
  return multiply(a, h);
}

inline std::vector<double> classify(const Matrix& b, const Matrix& head_w,
                                    const Matrix& head_b) {
  if (!b.same_shape(head_w) || head_b.rows() != b.rows() || head_b.cols() != 1)
    throw ShapeError("classify: B is " + b.shape_str() + ", heads are " + head_w.shape_str() +
                     " and " + head_b.shape_str());
  std::vector<double> logits(b.rows());
  for (std::size_t k = 0; k < b.rows(); ++k) {
    double s = head_b.at(k, 0);
    for (std::size_t j = 0; j < b.cols(); ++j) s += head_w.at(k, j) * b.at(k, j);
    logits[k] = s;
  }
  return logits;
}

}  // namespace hmil
