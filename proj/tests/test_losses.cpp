#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "hmil/error.hpp"
#include "hmil/losses.hpp"
#include "hmil/taxonomy.hpp"

#include "helpers.hpp"

using namespace hmil;
using testutil::rand_matrix;
using testutil::rand_rowstoch;

namespace {

Matrix demo_projection() {
  return Matrix(2, 4, {1, 1, 0, 0, 0, 0, 1, 1});
}

double naive_ce(const std::vector<double>& logits, std::size_t y) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double denom = 0.0;
  for (double v : logits) denom += std::exp(v - mx);
  const double p = std::exp(logits[y] - mx) / denom;
  return -std::log(p);
}

double naive_ia(const Matrix& a_c, const Matrix& a_f, const Matrix& p) {
  const std::size_t n = a_c.cols();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> proj(p.rows(), 0.0);
    for (std::size_t r = 0; r < p.rows(); ++r)
      for (std::size_t c = 0; c < p.cols(); ++c) proj[r] += p.at(r, c) * a_f.at(c, i);
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t r = 0; r < p.rows(); ++r) {
      dot += a_c.at(r, i) * proj[r];
      na += a_c.at(r, i) * a_c.at(r, i);
      nb += proj[r] * proj[r];
    }
    double cos = dot / (std::sqrt(na) * std::sqrt(nb));
    cos = std::min(1.0, std::max(-1.0, cos));
    total += 1.0 - cos;
  }
  return total / double(n);
}

double naive_supcon(const std::vector<Matrix>& b_fs, const std::vector<std::size_t>& labels,
                    double tau) {
  const std::size_t b = b_fs.size();
  std::vector<std::vector<double>> z;
  for (const Matrix& m : b_fs) {
    std::vector<double> flat;
    for (std::size_t i = 0; i < m.size(); ++i) flat.push_back(m[i]);
    double norm = 0.0;
    for (double v : flat) norm += v * v;
    norm = std::sqrt(norm);
    for (double& v : flat) v /= norm;
    z.push_back(flat);
  }
  const auto sim = [&](std::size_t i, std::size_t j) {
    double s = 0.0;
    for (std::size_t k = 0; k < z[i].size(); ++k) s += z[i][k] * z[j][k];
    return s / tau;
  };
  double loss = 0.0;
  std::size_t anchors = 0;
  for (std::size_t i = 0; i < b; ++i) {
    std::vector<std::size_t> pos;
    for (std::size_t j = 0; j < b; ++j)
      if (j != i && labels[j] == labels[i]) pos.push_back(j);
    if (pos.empty()) continue;
    ++anchors;
    double mx = -1e300;
    for (std::size_t v = 0; v < b; ++v)
      if (v != i) mx = std::max(mx, sim(i, v));
    double denom = 0.0;
    for (std::size_t v = 0; v < b; ++v)
      if (v != i) denom += std::exp(sim(i, v) - mx);
    const double lse = mx + std::log(denom);
    double inner = 0.0;
    for (std::size_t p : pos) inner += sim(i, p) - lse;
    loss -= inner / double(pos.size());
  }
  return anchors == 0 ? 0.0 : loss / double(anchors);
}

}  // namespace

TEST_CASE("cross entropy against the softmax oracle") {
  Rng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t k = rng.uniform_int(2, 8);
    std::vector<double> logits(k);
    for (double& v : logits) v = rng.uniform(-6.0, 6.0);
    const std::size_t y = rng.uniform_int(0, k - 1);
    const double got = cross_entropy_from_logits(logits, y);
    REQUIRE(std::fabs(got - naive_ce(logits, y)) <= 1e-10);
    REQUIRE(got >= 0.0);
  }

  REQUIRE(cross_entropy_from_logits({0.0, 0.0}, 0) ==
          Catch::Approx(std::log(2.0)).margin(1e-15));
  REQUIRE_THROWS_AS(cross_entropy_from_logits({0.0, 0.0}, 2), DomainError);
}

TEST_CASE("cross entropy is shift-invariant") {
  std::vector<double> logits = {1.2, -0.4, 3.3, 0.0};
  std::vector<double> shifted = logits;
  for (double& v : shifted) v += 11.5;
  REQUIRE(std::fabs(cross_entropy_from_logits(logits, 2) -
                    cross_entropy_from_logits(shifted, 2)) <= 1e-12);
}

TEST_CASE("softmax cross entropy toy gradient") {
  const Matrix logits(3, 1, {0.2, -1.1, 0.7});
  const double err = ad::grad_check(
      [&](ad::Tape& t, const std::vector<ad::Value>& l) {
        return graph::cross_entropy(t, l[0], 1);
      },
      {logits}, 1e-5);
  REQUIRE(err <= 1e-6);
}

TEST_CASE("instance alignment against the cosine loop oracle") {
  Rng rng(33);
  const Matrix p = demo_projection();
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = rng.uniform_int(1, 9);
    const Matrix a_c = rand_rowstoch(rng, 2, n);
    const Matrix a_f = rand_rowstoch(rng, 4, n);
    const double got = instance_alignment(a_c, a_f, p);
    REQUIRE(std::fabs(got - naive_ia(a_c, a_f, p)) <= 1e-10);
    REQUIRE(got >= 0.0);
    REQUIRE(got <= 2.0);
  }
}

TEST_CASE("instance alignment vanishes when attentions agree") {
  Rng rng(34);
  const Matrix p = demo_projection();
  const Matrix a_f = rand_rowstoch(rng, 4, 6);
  const Matrix a_c = multiply(p, a_f);
  REQUIRE(instance_alignment(a_c, a_f, p) <= 1e-12);
}

TEST_CASE("instance alignment rejects a dead column") {
  const Matrix p = demo_projection();
  Matrix a_c(2, 2);
  a_c.at(0, 0) = 1.0;  // second column all zero
  const Matrix a_f = Matrix::full(4, 2, 0.25);
  REQUIRE_THROWS_AS(instance_alignment(a_c, a_f, p), DegenerateInputError);
}

TEST_CASE("bag alignment values") {
  const Matrix p = demo_projection();

  const Matrix uniform(1, 4, {0.25, 0.25, 0.25, 0.25});
  REQUIRE(bag_alignment(uniform, 0, p) == Catch::Approx(std::log(2.0)).margin(1e-12));

  // one-hot on a child of the correct coarse class
  const Matrix onehot(1, 4, {0.0, 1.0, 0.0, 0.0});
  REQUIRE(bag_alignment(onehot, 0, p) == 0.0);

  // all mass on the wrong branch: clamped at 1e-12
  const Matrix wrong(1, 4, {0.0, 0.0, 1.0, 0.0});
  REQUIRE(bag_alignment(wrong, 0, p) ==
          Catch::Approx(-std::log(1e-12)).margin(1e-9));

  Rng rng(35);
  for (int trial = 0; trial < 200; ++trial) {
    const Matrix p_f = rand_rowstoch(rng, 1, 4);
    const std::size_t y = rng.uniform_int(0, 1);
    REQUIRE(bag_alignment(p_f, y, p) >= 0.0);
  }
}

TEST_CASE("supcon against the double-loop oracle") {
  Rng rng(36);
  const std::vector<std::size_t> spec_labels = {0, 0, 1, 1};
  std::vector<Matrix> b_fs;
  for (int i = 0; i < 4; ++i) b_fs.push_back(rand_matrix(rng, 4, 4));
  REQUIRE(std::fabs(supcon(b_fs, spec_labels, 0.1) -
                    naive_supcon(b_fs, spec_labels, 0.1)) <= 1e-10);

  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t b = rng.uniform_int(2, 7);
    std::vector<Matrix> batch;
    std::vector<std::size_t> labels;
    for (std::size_t i = 0; i < b; ++i) {
      batch.push_back(rand_matrix(rng, 3, 5));
      labels.push_back(rng.uniform_int(0, 2));
    }
    const double got = supcon(batch, labels, 0.5);
    REQUIRE(std::fabs(got - naive_supcon(batch, labels, 0.5)) <= 1e-10);
    REQUIRE(got >= -1e-12);
  }
}

TEST_CASE("supcon degenerate batches are exactly zero") {
  Rng rng(37);
  const Matrix one = rand_matrix(rng, 4, 4);

  REQUIRE(supcon({one, one}, {3, 3}, 0.1) == 0.0);
  REQUIRE(supcon({one, rand_matrix(rng, 4, 4), rand_matrix(rng, 4, 4)}, {0, 1, 2}, 0.1) ==
          0.0);
  REQUIRE(supcon({one}, {0}, 0.1) == 0.0);
}

TEST_CASE("beta schedule endpoints are exact") {
  REQUIRE(beta_schedule(0, 200) == 1.0);
  REQUIRE(beta_schedule(100, 200) == 0.5);
  REQUIRE(beta_schedule(199, 200) == 1.0 / 200.0);
  REQUIRE_THROWS_AS(beta_schedule(200, 200), ScheduleError);
  REQUIRE_THROWS_AS(beta_schedule(0, 0), ScheduleError);
}

TEST_CASE("combine weights the regularizer by 1 - beta") {
  for (std::size_t e : {std::size_t{0}, std::size_t{37}, std::size_t{199}}) {
    const LossBreakdown lb = combine(0.0, 0.0, 0.0, 0.0, 1.0, e, 200, LossMode{});
    REQUIRE(lb.total == 1.0 - lb.beta);
  }
}

TEST_CASE("static unit weights reduce to a plain sum") {
  const LossMode mode = LossMode::parse("static:1,1");
  const double ce_c = 0.37, ce_f = 1.21, ia = 0.054, ba = 0.61, reg = 2.75;
  const LossBreakdown lb = combine(ce_c, ce_f, ia, ba, reg, 5, 10, mode);
  REQUIRE(lb.total == ce_f + ia + ba + reg + ce_c);
}

TEST_CASE("loss mode parsing") {
  REQUIRE(LossMode::parse("dynamic").kind == LossMode::kDynamic);
  REQUIRE(LossMode::parse("coarse").kind == LossMode::kCoarseFocus);
  REQUIRE(LossMode::parse("coarse_focus").kind == LossMode::kCoarseFocus);
  const LossMode st = LossMode::parse("static:0.3,0.7");
  REQUIRE(st.a == 0.3);
  REQUIRE(st.b == 0.7);
  REQUIRE_THROWS_AS(LossMode::parse("static:1"), ConfigError);
  REQUIRE_THROWS_AS(LossMode::parse("static:x,y"), ConfigError);
  REQUIRE_THROWS_AS(LossMode::parse("static:-1,1"), ConfigError);
  REQUIRE_THROWS_AS(LossMode::parse("banana"), ConfigError);
}

TEST_CASE("graph combination matches the scalar combination bitwise") {
  Rng rng(38);
  const std::vector<LossMode> modes = {LossMode::parse("dynamic"),
                                       LossMode::parse("static:0.4,1.3"),
                                       LossMode::parse("coarse")};
  for (int trial = 0; trial < 100; ++trial) {
    const double ce_c = rng.uniform(0.0, 3.0);
    const double ce_f = rng.uniform(0.0, 3.0);
    const double ia = rng.uniform(0.0, 2.0);
    const double ba = rng.uniform(0.0, 3.0);
    const double reg = rng.uniform(0.0, 50.0);
    const std::size_t E = rng.uniform_int(2, 300);
    const std::size_t e = rng.uniform_int(0, E - 1);
    for (const LossMode& mode : modes) {
      const LossBreakdown lb = combine(ce_c, ce_f, ia, ba, reg, e, E, mode);
      ad::Tape t;
      const auto c = [&](double v) { return t.constant(Matrix::full(1, 1, v)); };
      const ad::Value total =
          graph::combine_graph(t, c(ce_c), c(ce_f), c(ia), c(ba), c(reg), e, E, mode);
      REQUIRE(total.value().at(0, 0) == lb.total);
    }
  }
}
