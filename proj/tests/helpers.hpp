#pragma once

#include <unistd.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include "hmil/matrix.hpp"
#include "hmil/rng.hpp"

namespace testutil {

inline hmil::Matrix rand_matrix(hmil::Rng& rng, std::size_t r, std::size_t c,
                                double lo = -2.0, double hi = 2.0) {
  hmil::Matrix m(r, c);
  for (double& v : m.data()) v = rng.uniform(lo, hi);
  return m;
}

// Row-stochastic matrix built by softmaxing uniform draws.
inline hmil::Matrix rand_rowstoch(hmil::Rng& rng, std::size_t r, std::size_t c) {
  hmil::Matrix m = rand_matrix(rng, r, c, -3.0, 3.0);
  for (std::size_t i = 0; i < r; ++i) {
    double mx = m.at(i, 0);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, m.at(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(m.at(i, j) - mx);
    for (std::size_t j = 0; j < c; ++j) m.at(i, j) = std::exp(m.at(i, j) - mx) / s;
  }
  return m;
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::uint64_t counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("hmil_test_" + tag + "_" + std::to_string(::getpid()) + "_" +
             std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline void spit(const std::filesystem::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary);
  os << text;
}

inline bool same_bytes(const std::filesystem::path& a, const std::filesystem::path& b) {
  return slurp(a) == slurp(b);
}

}  // namespace testutil
