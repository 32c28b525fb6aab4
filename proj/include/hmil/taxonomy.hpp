#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "hmil/matrix.hpp"

namespace hmil {

// Two-level label taxonomy: K_f fine classes, each owned by one of K_c
// coarse classes. Immutable once built.
struct Taxonomy {
  std::vector<std::string> coarse_names;
  std::vector<std::string> fine_names;
  std::vector<std::size_t> parent;  // fine index -> coarse index

  std::size_t num_coarse() const { return coarse_names.size(); }
  std::size_t num_fine() const { return fine_names.size(); }

  std::size_t coarse_index(const std::string& name) const {
    for (std::size_t i = 0; i < coarse_names.size(); ++i)
      if (coarse_names[i] == name) return i;
    throw TaxonomyError("unknown coarse class '" + name + "'");
  }
  std::size_t fine_index(const std::string& name) const {
    for (std::size_t i = 0; i < fine_names.size(); ++i)
      if (fine_names[i] == name) return i;
    throw TaxonomyError("unknown fine class '" + name + "'");
  }
};

inline Taxonomy build_taxonomy(std::vector<std::string> coarse,
                               std::vector<std::string> fine,
                               const std::vector<std::pair<std::string, std::string>>& parents) {
  if (coarse.empty()) throw TaxonomyError("no coarse classes");
  if (fine.size() < coarse.size())
    throw TaxonomyError("fewer fine classes (" + std::to_string(fine.size()) +
                        ") than coarse classes (" + std::to_string(coarse.size()) + ")");
  for (std::size_t i = 0; i < coarse.size(); ++i)
    for (std::size_t j = i + 1; j < coarse.size(); ++j)
      if (coarse[i] == coarse[j]) throw TaxonomyError("duplicate coarse name '" + coarse[i] + "'");
  for (std::size_t i = 0; i < fine.size(); ++i)
    for (std::size_t j = i + 1; j < fine.size(); ++j)
      if (fine[i] == fine[j]) throw TaxonomyError("duplicate fine name '" + fine[i] + "'");

  Taxonomy t;
  t.coarse_names = std::move(coarse);
  t.fine_names = std::move(fine);
  t.parent.assign(t.fine_names.size(), static_cast<std::size_t>(-1));

  for (const auto& [f, c] : parents) {
    std::size_t fi = t.fine_index(f);
    std::size_t ci = t.coarse_index(c);
    if (t.parent[fi] != static_cast<std::size_t>(-1))
      throw TaxonomyError("fine class '" + f + "' assigned more than one parent");
    t.parent[fi] = ci;
  }
  for (std::size_t fi = 0; fi < t.fine_names.size(); ++fi)
    if (t.parent[fi] == static_cast<std::size_t>(-1))
      throw TaxonomyError("fine class '" + t.fine_names[fi] + "' has no parent");

  std::vector<std::size_t> children(t.coarse_names.size(), 0);
  for (std::size_t p : t.parent) ++children[p];
  for (std::size_t ci = 0; ci < children.size(); ++ci)
    if (children[ci] == 0)
      throw TaxonomyError("coarse class '" + t.coarse_names[ci] + "' has no children");
  return t;
}

// P in {0,1}^{K_c x K_f}; P[c][f] = 1 iff parent(f) = c. Each column sums
// to 1, so P applied to a fine probability column preserves total mass.
inline Matrix projection_matrix(const Taxonomy& t) {
  Matrix p(t.num_coarse(), t.num_fine());
  for (std::size_t f = 0; f < t.num_fine(); ++f) p.at(t.parent[f], f) = 1.0;
  return p;
}

inline Matrix project_fine_to_coarse(const Matrix& p, const Matrix& v) {
  if (v.rows() != p.cols())
    throw ShapeError("project_fine_to_coarse: P is " + p.shape_str() + " but input is " +
                     v.shape_str());
  return multiply(p, v);
}

}  // namespace hmil
