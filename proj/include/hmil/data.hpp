#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "hmil/matrix.hpp"
#include "hmil/rng.hpp"
#include "hmil/taxonomy.hpp"

namespace hmil {

enum class Split { unassigned, train, val, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    case Split::unassigned: return "unassigned";
  }
  return "unassigned";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  if (s == "unassigned") return Split::unassigned;
  throw FormatError("unknown split tag '" + s + "'");
}

struct FeatureBag {
  std::string bag_id;
  Matrix features;  // [N_i x d_c]
  std::size_t y_f = 0;
  std::size_t y_c = 0;
  Split split = Split::unassigned;
};

struct Dataset {
  Taxonomy taxonomy;
  std::vector<FeatureBag> bags;
  std::size_t d_c = 0;

  std::vector<std::size_t> split_indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < bags.size(); ++i)
      if (bags[i].split == s) out.push_back(i);
    return out;
  }
};

struct SyntheticConfig {
  Taxonomy taxonomy;
  std::size_t d_c = 32;
  std::size_t bags_per_fine_class = 100;
  std::size_t instances_min = 30;
  std::size_t instances_max = 60;
  double witness_rate = 0.1;
  double class_sep_coarse = 6.0;
  double class_sep_fine = 1.5;
  double noise_sigma = 1.0;
  std::uint64_t seed = 0;
};

namespace detail {

inline std::vector<double> random_unit(Rng& rng, std::size_t d) {
  std::vector<double> v(d);
  double norm = 0.0;
  do {
    norm = 0.0;
    for (double& x : v) {
      x = rng.normal();
      norm += x * x;
    }
  } while (norm < 1e-12);
  norm = std::sqrt(norm);
  for (double& x : v) x /= norm;
  return v;
}

// Round through 32-bit so generated features survive the on-disk format
// bit-exactly.
inline double f32(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace detail

// Witness/background mixture bags. Per coarse class an orthogonal center at
// radius class_sep_coarse; fine centers offset from their parent by
// class_sep_fine along subtype axes shared across parents, siblings taking
// alternating signs so every sibling pair sits 2*class_sep_fine apart. A bag of
// fine class f holds ceil(witness_rate * N_i) witnesses ~ N(mu_f, sigma^2 I)
// plus background ~ N(0, sigma^2 I); the first child of the first coarse
// class is the designated background class and yields background-only bags.
inline Dataset generate_synthetic(const SyntheticConfig& cfg) {
  if (cfg.d_c < 1) throw ConfigError("synthetic: d_c must be >= 1");
  if (cfg.bags_per_fine_class < 1) throw ConfigError("synthetic: bags_per_fine_class must be >= 1");
  if (cfg.instances_min < 1) throw ConfigError("synthetic: instances_min must be >= 1");
  if (cfg.instances_max < cfg.instances_min)
    throw ConfigError("synthetic: instances_max < instances_min");
  if (!(cfg.witness_rate > 0.0) || cfg.witness_rate > 1.0)
    throw ConfigError("synthetic: witness_rate must be in (0, 1]");
  if (!(cfg.class_sep_coarse > 0.0) || !(cfg.class_sep_fine > 0.0))
    throw ConfigError("synthetic: class separations must be > 0");
  if (cfg.noise_sigma < 0.0) throw ConfigError("synthetic: noise_sigma must be >= 0");

  const Taxonomy& t = cfg.taxonomy;
  Rng rng(cfg.seed);

  // Coarse centers: orthonormal directions (Gram-Schmidt while possible).
  std::vector<std::vector<double>> coarse_units;
  for (std::size_t c = 0; c < t.num_coarse(); ++c) {
    std::vector<double> u;
    for (int attempt = 0; attempt < 64; ++attempt) {
      u = detail::random_unit(rng, cfg.d_c);
      if (c < cfg.d_c) {
        for (const auto& prev : coarse_units) {
          double dot = 0.0;
          for (std::size_t j = 0; j < cfg.d_c; ++j) dot += u[j] * prev[j];
          for (std::size_t j = 0; j < cfg.d_c; ++j) u[j] -= dot * prev[j];
        }
        double n2 = 0.0;
        for (double x : u) n2 += x * x;
        if (n2 < 1e-12) continue;
        const double n = std::sqrt(n2);
        for (double& x : u) x /= n;
      }
      break;
    }
    coarse_units.push_back(std::move(u));
  }

  // Orthonormal units at radius class_sep_coarse / sqrt(2) put every pair of
  // coarse centers exactly class_sep_coarse apart.
  const double coarse_radius =
      t.num_coarse() > 1 ? cfg.class_sep_coarse / std::sqrt(2.0) : cfg.class_sep_coarse;
  std::vector<std::vector<double>> coarse_centers(t.num_coarse());
  for (std::size_t c = 0; c < t.num_coarse(); ++c) {
    coarse_centers[c].resize(cfg.d_c);
    for (std::size_t j = 0; j < cfg.d_c; ++j)
      coarse_centers[c][j] = coarse_radius * coarse_units[c][j];
  }

  // Subtype axes shared across parents: the j-th sibling pair of every coarse
  // class differentiates along the same direction, so fine labels decompose
  // into (parent, subtype sign). Axes are orthogonal to the coarse directions,
  // keeping siblings symmetric under any projection onto the coarse geometry.
  std::vector<std::vector<double>> subtype_axes;
  auto subtype_axis = [&](std::size_t pair) -> const std::vector<double>& {
    while (subtype_axes.size() <= pair) {
      std::vector<double> dir;
      for (int attempt = 0; attempt < 64; ++attempt) {
        dir = detail::random_unit(rng, cfg.d_c);
        if (t.num_coarse() >= cfg.d_c) break;
        for (const auto& u : coarse_units) {
          double dot = 0.0;
          for (std::size_t k = 0; k < cfg.d_c; ++k) dot += dir[k] * u[k];
          for (std::size_t k = 0; k < cfg.d_c; ++k) dir[k] -= dot * u[k];
        }
        double n2 = 0.0;
        for (double x : dir) n2 += x * x;
        if (n2 < 1e-12) continue;
        const double n = std::sqrt(n2);
        for (double& x : dir) x /= n;
        break;
      }
      subtype_axes.push_back(std::move(dir));
    }
    return subtype_axes[pair];
  };

  std::vector<std::vector<double>> fine_centers(t.num_fine());
  std::vector<std::vector<std::size_t>> children(t.num_coarse());
  for (std::size_t f = 0; f < t.num_fine(); ++f) children[t.parent[f]].push_back(f);
  for (const auto& sibs : children) {
    for (std::size_t j = 0; j < sibs.size(); j += 2) {
      const std::vector<double>& dir = subtype_axis(j / 2);
      for (std::size_t s = 0; s < 2 && j + s < sibs.size(); ++s) {
        const std::size_t f = sibs[j + s];
        const double sign = s == 0 ? 1.0 : -1.0;
        fine_centers[f].resize(cfg.d_c);
        for (std::size_t k = 0; k < cfg.d_c; ++k)
          fine_centers[f][k] =
              coarse_centers[t.parent[f]][k] + sign * cfg.class_sep_fine * dir[k];
      }
    }
  }

  std::size_t background_f = 0;
  for (std::size_t f = 0; f < t.num_fine(); ++f)
    if (t.parent[f] == 0) {
      background_f = f;
      break;
    }

  Dataset ds;
  ds.taxonomy = t;
  ds.d_c = cfg.d_c;
  for (std::size_t f = 0; f < t.num_fine(); ++f) {
    for (std::size_t j = 0; j < cfg.bags_per_fine_class; ++j) {
      const std::size_t n = static_cast<std::size_t>(rng.uniform_int(
          static_cast<std::int64_t>(cfg.instances_min),
          static_cast<std::int64_t>(cfg.instances_max)));
      std::size_t witnesses =
          f == background_f ? 0
                            : static_cast<std::size_t>(std::ceil(cfg.witness_rate * double(n)));
      if (witnesses > n) witnesses = n;
      Matrix feats(n, cfg.d_c);
      for (std::size_t i = 0; i < n; ++i) {
        const bool witness = i < witnesses;
        for (std::size_t col = 0; col < cfg.d_c; ++col) {
          const double mean = witness ? fine_centers[f][col] : 0.0;
          feats.at(i, col) = detail::f32(rng.normal(mean, cfg.noise_sigma));
        }
      }
      FeatureBag bag;
      bag.bag_id = t.fine_names[f] + "_" + std::to_string(j);
      bag.features = std::move(feats);
      bag.y_f = f;
      bag.y_c = t.parent[f];
      ds.bags.push_back(std::move(bag));
    }
  }
  return ds;
}

// ---- bag feature files ------------------------------------------------------
// magic `HMB1`, u32 N_i, u32 d, then N_i*d little-endian f32, row-major.

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4] = {char(v & 0xff), char((v >> 8) & 0xff), char((v >> 16) & 0xff),
               char((v >> 24) & 0xff)};
  os.write(b, 4);
}

inline std::uint32_t get_u32(std::istream& is, const std::string& path, const char* what) {
  const long long at = static_cast<long long>(is.tellg());
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    throw FormatError(path + ": truncated reading " + what + " at byte " + std::to_string(at));
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
         (std::uint32_t(b[3]) << 24);
}

}  // namespace detail

inline void write_bag_file(const std::filesystem::path& path, const Matrix& features) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  std::vector<char> buf;
  buf.reserve(12 + 4 * features.size());
  auto push_u32 = [&buf](std::uint32_t v) {
    buf.push_back(char(v & 0xff));
    buf.push_back(char((v >> 8) & 0xff));
    buf.push_back(char((v >> 16) & 0xff));
    buf.push_back(char((v >> 24) & 0xff));
  };
  buf.insert(buf.end(), {'H', 'M', 'B', '1'});
  push_u32(static_cast<std::uint32_t>(features.rows()));
  push_u32(static_cast<std::uint32_t>(features.cols()));
  for (double v : features.data())
    push_u32(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!os) throw IoError("write failed for '" + path.string() + "'");
}

inline Matrix read_bag_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != "HMB1")
    throw FormatError(path.string() + ": bad magic at byte 0 (expected HMB1)");
  const std::uint32_t n = detail::get_u32(is, path.string(), "row count");
  const std::uint32_t d = detail::get_u32(is, path.string(), "column count");
  if (n == 0 || d == 0) throw FormatError(path.string() + ": empty dimensions " +
                                          std::to_string(n) + "x" + std::to_string(d));
  if (std::uint64_t(n) * std::uint64_t(d) > (std::uint64_t(1) << 31))
    throw FormatError(path.string() + ": dimension overflow " + std::to_string(n) + "x" +
                      std::to_string(d));
  const std::size_t count = std::size_t(n) * std::size_t(d);
  std::vector<unsigned char> buf(count * 4);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(is.gcount()) != buf.size())
    throw FormatError(path.string() + ": truncated: header claims " + std::to_string(buf.size()) +
                      " data bytes, file ends at byte " +
                      std::to_string(12 + static_cast<long long>(is.gcount())));
  Matrix m(n, d);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint32_t bits = std::uint32_t(buf[4 * i]) | (std::uint32_t(buf[4 * i + 1]) << 8) |
                               (std::uint32_t(buf[4 * i + 2]) << 16) |
                               (std::uint32_t(buf[4 * i + 3]) << 24);
    m[i] = static_cast<double>(std::bit_cast<float>(bits));
  }
  return m;
}

// One file per bag: header row of d column names, then one numeric row per
// instance.
inline Matrix import_csv_bag(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(is, line)) throw FormatError(path.string() + ": missing header row");
  std::size_t d = 1;
  for (char c : line)
    if (c == ',') ++d;
  std::vector<double> data;
  std::size_t rows = 0, lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::size_t cols = 0;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t used = 0;
        data.push_back(std::stod(cell, &used));
        while (used < cell.size() && std::isspace(static_cast<unsigned char>(cell[used]))) ++used;
        if (used != cell.size()) throw std::invalid_argument("");
      } catch (const std::exception&) {
        throw FormatError(path.string() + ":" + std::to_string(lineno) + ": bad number '" +
                          cell + "'");
      }
      ++cols;
    }
    if (cols != d)
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected " +
                        std::to_string(d) + " columns, got " + std::to_string(cols));
    ++rows;
  }
  if (rows == 0) throw FormatError(path.string() + ": no instance rows");
  return Matrix(rows, d, std::move(data));
}

// ---- taxonomy & manifest JSON -----------------------------------------------

inline Taxonomy taxonomy_from_json(const nlohmann::json& j, const std::string& where) {
  try {
    std::vector<std::string> coarse = j.at("coarse").get<std::vector<std::string>>();
    std::vector<std::string> fine = j.at("fine").get<std::vector<std::string>>();
    std::vector<std::pair<std::string, std::string>> parents;
    for (const auto& [k, v] : j.at("parent").items())
      parents.emplace_back(k, v.get<std::string>());
    return build_taxonomy(std::move(coarse), std::move(fine), parents);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(where + ": " + e.what());
  }
}

inline Taxonomy load_taxonomy(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open taxonomy '" + path.string() + "'");
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return taxonomy_from_json(j, path.string());
}

inline void save_taxonomy(const Taxonomy& t, const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  j["coarse"] = t.coarse_names;
  j["fine"] = t.fine_names;
  nlohmann::ordered_json parent;
  for (std::size_t f = 0; f < t.num_fine(); ++f)
    parent[t.fine_names[f]] = t.coarse_names[t.parent[f]];
  j["parent"] = std::move(parent);
  std::ofstream os(path);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os << j.dump(2) << "\n";
  if (!os) throw IoError("write failed for '" + path.string() + "'");
}

inline Dataset load_dataset(const std::filesystem::path& manifest_path) {
  std::ifstream is(manifest_path);
  if (!is) throw IoError("cannot open manifest '" + manifest_path.string() + "'");
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(manifest_path.string() + ": " + e.what());
  }

  const std::filesystem::path base = manifest_path.parent_path();
  Dataset ds;
  try {
    ds.taxonomy = load_taxonomy(base / j.at("taxonomy").get<std::string>());
    ds.d_c = j.at("d").get<std::size_t>();
    if (!j.at("bags").is_array() || j.at("bags").empty())
      throw FormatError(manifest_path.string() + ": dataset empty");
    for (const auto& jb : j.at("bags")) {
      FeatureBag bag;
      bag.bag_id = jb.at("id").get<std::string>();
      const std::string file = jb.at("file").get<std::string>();
      const std::string fine = jb.at("fine").get<std::string>();
      const std::string coarse = jb.at("coarse").get<std::string>();
      bag.y_f = ds.taxonomy.fine_index(fine);
      bag.y_c = ds.taxonomy.parent[bag.y_f];
      if (ds.taxonomy.coarse_names[bag.y_c] != coarse)
        throw FormatError(manifest_path.string() + ": bag '" + bag.bag_id +
                          "': stated coarse label '" + coarse + "' is not the parent of '" +
                          fine + "' (expected '" + ds.taxonomy.coarse_names[bag.y_c] + "')");
      if (jb.contains("split")) bag.split = parse_split(jb.at("split").get<std::string>());
      const std::filesystem::path fp = base / file;
      bag.features = fp.extension() == ".csv" ? import_csv_bag(fp) : read_bag_file(fp);
      if (bag.features.cols() != ds.d_c)
        throw FormatError(manifest_path.string() + ": bag '" + bag.bag_id + "' has width " +
                          std::to_string(bag.features.cols()) + ", manifest says d=" +
                          std::to_string(ds.d_c));
      ds.bags.push_back(std::move(bag));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(manifest_path.string() + ": " + e.what());
  }
  for (std::size_t i = 0; i < ds.bags.size(); ++i)
    for (std::size_t k = i + 1; k < ds.bags.size(); ++k)
      if (ds.bags[i].bag_id == ds.bags[k].bag_id)
        throw FormatError(manifest_path.string() + ": duplicate bag id '" + ds.bags[i].bag_id +
                          "'");
  return ds;
}

// Writes taxonomy.json, bags/<id>.hmb, and manifest.json under dir.
inline std::filesystem::path write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "bags", ec);
  if (ec) throw IoError("cannot create '" + (dir / "bags").string() + "': " + ec.message());
  save_taxonomy(ds.taxonomy, dir / "taxonomy.json");

  nlohmann::ordered_json j;
  j["taxonomy"] = "taxonomy.json";
  j["d"] = ds.d_c;
  nlohmann::ordered_json bags = nlohmann::ordered_json::array();
  for (const FeatureBag& bag : ds.bags) {
    const std::string rel = "bags/" + bag.bag_id + ".hmb";
    write_bag_file(dir / rel, bag.features);
    nlohmann::ordered_json jb;
    jb["id"] = bag.bag_id;
    jb["file"] = rel;
    jb["fine"] = ds.taxonomy.fine_names[bag.y_f];
    jb["coarse"] = ds.taxonomy.coarse_names[bag.y_c];
    if (bag.split != Split::unassigned) jb["split"] = split_name(bag.split);
    bags.push_back(std::move(jb));
  }
  j["bags"] = std::move(bags);
  const std::filesystem::path manifest = dir / "manifest.json";
  std::ofstream os(manifest);
  if (!os) throw IoError("cannot open '" + manifest.string() + "' for writing");
  os << j.dump(2) << "\n";
  if (!os) throw IoError("write failed for '" + manifest.string() + "'");
  return manifest;
}

// ---- splits -------------------------------------------------------------------

struct SplitScheme {
  enum Kind { kRatio, kKfold };
  Kind kind = kRatio;
  double train = 0.7, val = 0.1, test = 0.2;
  std::size_t k = 10, fold = 0;
};

enum class Stratify { fine, coarse };

// Stratified split assignment. Ratio mode floors per-stratum quotas and then
// hands out leftovers by largest fractional remainder against exact global
// totals, so global sizes are exact and every stratum is within one bag of
// its ideal share. K-fold deals each shuffled stratum round-robin; fold i is
// the test fold and fold (i+1) mod k validates.
inline Dataset make_splits(Dataset ds, const SplitScheme& scheme, std::uint64_t seed,
                           Stratify stratify = Stratify::fine) {
  if (ds.bags.empty()) throw ConfigError("make_splits: dataset empty");
  const std::size_t num_strata =
      stratify == Stratify::fine ? ds.taxonomy.num_fine() : ds.taxonomy.num_coarse();
  std::vector<std::vector<std::size_t>> strata(num_strata);
  for (std::size_t i = 0; i < ds.bags.size(); ++i)
    strata[stratify == Stratify::fine ? ds.bags[i].y_f : ds.bags[i].y_c].push_back(i);

  Rng rng(mix_seed(seed, 0x5917ULL));
  for (auto& members : strata) rng.shuffle(members);

  if (scheme.kind == SplitScheme::kKfold) {
    if (scheme.k < 2) throw ConfigError("kfold: k must be >= 2");
    if (scheme.fold >= scheme.k)
      throw ConfigError("kfold: fold index " + std::to_string(scheme.fold) +
                        " out of range for k=" + std::to_string(scheme.k));
    for (std::size_t s = 0; s < strata.size(); ++s)
      if (!strata[s].empty() && strata[s].size() < scheme.k)
        throw ConfigError("kfold: stratum " + std::to_string(s) + " has " +
                          std::to_string(strata[s].size()) + " members, fewer than k=" +
                          std::to_string(scheme.k));
    const std::size_t val_fold = (scheme.fold + 1) % scheme.k;
    for (const auto& members : strata)
      for (std::size_t i = 0; i < members.size(); ++i) {
        const std::size_t fold = i % scheme.k;
        ds.bags[members[i]].split = fold == scheme.fold ? Split::test
                                    : fold == val_fold  ? Split::val
                                                         : Split::train;
      }
    return ds;
  }

  const double ratios[3] = {scheme.train, scheme.val, scheme.test};
  if (ratios[0] < 0 || ratios[1] < 0 || ratios[2] < 0 ||
      std::fabs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9)
    throw ConfigError("split ratios must be nonnegative and sum to 1");

  const std::size_t total = ds.bags.size();
  // Exact global totals by largest remainder.
  std::size_t want[3];
  {
    double frac[3];
    std::size_t assigned = 0;
    for (int s = 0; s < 3; ++s) {
      const double ideal = ratios[s] * double(total);
      want[s] = static_cast<std::size_t>(std::floor(ideal));
      frac[s] = ideal - double(want[s]);
      assigned += want[s];
    }
    while (assigned < total) {
      int best = 0;
      for (int s = 1; s < 3; ++s)
        if (frac[s] > frac[best]) best = s;
      ++want[best];
      frac[best] = -1.0;
      ++assigned;
    }
  }

  // Per-stratum floors plus global leftover distribution.
  std::vector<std::array<std::size_t, 3>> alloc(strata.size(), {0, 0, 0});
  std::size_t have[3] = {0, 0, 0};
  struct Claim {
    double frac;
    std::size_t stratum;
    int split;
    bool used = false;
  };
  std::vector<Claim> claims;
  std::vector<std::size_t> leftover(strata.size(), 0);
  for (std::size_t s = 0; s < strata.size(); ++s) {
    const double n = double(strata[s].size());
    std::size_t used = 0;
    for (int sp = 0; sp < 3; ++sp) {
      const double ideal = ratios[sp] * n;
      alloc[s][sp] = static_cast<std::size_t>(std::floor(ideal));
      have[sp] += alloc[s][sp];
      used += alloc[s][sp];
      claims.push_back({ideal - double(alloc[s][sp]), s, sp});
    }
    leftover[s] = strata[s].size() - used;
  }
  std::stable_sort(claims.begin(), claims.end(), [](const Claim& a, const Claim& b) {
    if (a.frac != b.frac) return a.frac > b.frac;
    if (a.stratum != b.stratum) return a.stratum < b.stratum;
    return a.split < b.split;
  });
  // Pass 0: claims with positive remainder, each (stratum, split) at most
  // once. Pass 1: any unused claim. Then an uncapped mop-up so the
  // assignment always completes as a partition.
  for (int pass = 0; pass < 2; ++pass) {
    for (Claim& c : claims) {
      if (c.used || leftover[c.stratum] == 0 || have[c.split] >= want[c.split]) continue;
      if (pass == 0 && c.frac <= 0.0) continue;
      ++alloc[c.stratum][c.split];
      ++have[c.split];
      --leftover[c.stratum];
      c.used = true;
    }
  }
  for (std::size_t s = 0; s < strata.size(); ++s)
    while (leftover[s] > 0)
      for (int sp = 0; sp < 3; ++sp)
        if (have[sp] < want[sp]) {
          ++alloc[s][sp];
          ++have[sp];
          --leftover[s];
          break;
        }

  for (std::size_t s = 0; s < strata.size(); ++s) {
    std::size_t i = 0;
    for (int sp = 0; sp < 3; ++sp) {
      const Split tag = sp == 0 ? Split::train : sp == 1 ? Split::val : Split::test;
      for (std::size_t k = 0; k < alloc[s][sp]; ++k) ds.bags[strata[s][i++]].split = tag;
    }
  }
  return ds;
}

}  // namespace hmil
