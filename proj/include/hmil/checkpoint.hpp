#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "hmil/baselines.hpp"
#include "hmil/data.hpp"
#include "hmil/model.hpp"

namespace hmil {

namespace detail {

inline void put_u64(std::ostream& os, std::uint64_t v) {
  put_u32(os, static_cast<std::uint32_t>(v & 0xffffffffULL));
  put_u32(os, static_cast<std::uint32_t>(v >> 32));
}

inline std::uint64_t get_u64(std::istream& is, const std::string& path, const char* what) {
  const std::uint64_t lo = get_u32(is, path, what);
  const std::uint64_t hi = get_u32(is, path, what);
  return lo | (hi << 32);
}

inline void put_f64(std::ostream& os, double v) {
  put_u64(os, std::bit_cast<std::uint64_t>(v));
}

inline double get_f64(std::istream& is, const std::string& path, const char* what) {
  return std::bit_cast<double>(get_u64(is, path, what));
}

template <typename Model>
void write_params(std::ostream& os, Model& m, const std::string& path) {
  auto ps = m.params();
  put_u32(os, static_cast<std::uint32_t>(ps.size()));
  for (auto& [name, mat] : ps) {
    put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(os, static_cast<std::uint32_t>(mat->rows()));
    put_u32(os, static_cast<std::uint32_t>(mat->cols()));
    for (double v : mat->data()) put_f64(os, v);
  }
  if (!os) throw IoError("write failed for '" + path + "'");
}

template <typename Model>
void read_params(std::istream& is, Model& m, const std::string& path) {
  auto ps = m.params();
  const std::uint32_t count = get_u32(is, path, "parameter count");
  if (count != ps.size())
    throw FormatError(path + ": checkpoint has " + std::to_string(count) +
                      " parameters, model expects " + std::to_string(ps.size()));
  for (auto& [name, mat] : ps) {
    const std::uint32_t len = get_u32(is, path, "parameter name length");
    std::string got(len, '\0');
    if (!is.read(got.data(), len))
      throw FormatError(path + ": truncated reading parameter name");
    if (got != name)
      throw FormatError(path + ": expected parameter '" + name + "', found '" + got + "'");
    const std::uint32_t r = get_u32(is, path, "parameter rows");
    const std::uint32_t c = get_u32(is, path, "parameter cols");
    if (r != mat->rows() || c != mat->cols())
      throw FormatError(path + ": parameter '" + name + "' is " + std::to_string(r) + "x" +
                        std::to_string(c) + ", expected " + mat->shape_str());
    for (double& v : mat->data()) v = get_f64(is, path, "parameter data");
  }
}

}  // namespace detail

// Checkpoint container: magic HMIL, u32 version, u32 kind
// (0=hmil, 1=mean, 2=max, 3=abmil), config block
// (u32 d_c, d_f, K_c, K_f, ofr_hidden, use_ofr, label_level; u64 seed),
// then named parameter matrices as row-major 64-bit little-endian floats.
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::uint32_t checkpoint_kind(FlatVariant v) {
  switch (v) {
    case FlatVariant::mean: return 1;
    case FlatVariant::max: return 2;
    case FlatVariant::abmil: return 3;
  }
  return 1;
}

inline void save_checkpoint(const std::filesystem::path& path, HmilModel& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os.write("HMIL", 4);
  detail::put_u32(os, kCheckpointVersion);
  detail::put_u32(os, 0);
  detail::put_u32(os, static_cast<std::uint32_t>(m.cfg.d_c));
  detail::put_u32(os, static_cast<std::uint32_t>(m.cfg.d_f));
  detail::put_u32(os, static_cast<std::uint32_t>(m.cfg.K_c));
  detail::put_u32(os, static_cast<std::uint32_t>(m.cfg.K_f));
  detail::put_u32(os, static_cast<std::uint32_t>(m.cfg.ofr_hidden));
  detail::put_u32(os, m.cfg.use_ofr ? 1 : 0);
  detail::put_u32(os, 0);  // label level: hmil models always carry both
  detail::put_u64(os, m.cfg.seed);
  detail::write_params(os, m, path.string());
}

inline void save_checkpoint(const std::filesystem::path& path, FlatModel& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os.write("HMIL", 4);
  detail::put_u32(os, kCheckpointVersion);
  detail::put_u32(os, checkpoint_kind(m.cfg.variant));
  detail::put_u32(os, static_cast<std::uint32_t>(m.cfg.d));
  detail::put_u32(os, static_cast<std::uint32_t>(m.cfg.d));
  detail::put_u32(os, static_cast<std::uint32_t>(m.cfg.K));
  detail::put_u32(os, static_cast<std::uint32_t>(m.cfg.K));
  detail::put_u32(os, 0);
  detail::put_u32(os, 0);
  detail::put_u32(os, m.cfg.label_level == LabelLevel::coarse ? 1 : 0);
  detail::put_u64(os, m.cfg.seed);
  detail::write_params(os, m, path.string());
}

struct Checkpoint {
  enum Kind { kHmil, kFlat } kind = kHmil;
  HmilModel hmil;
  FlatModel flat;
};

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint '" + path.string() + "'");
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != "HMIL")
    throw FormatError(path.string() + ": bad magic at byte 0 (expected HMIL)");
  const std::string p = path.string();
  const std::uint32_t version = detail::get_u32(is, p, "version");
  if (version != kCheckpointVersion)
    throw FormatError(p + ": unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t kind = detail::get_u32(is, p, "model kind");
  const std::uint32_t d_c = detail::get_u32(is, p, "d_c");
  const std::uint32_t d_f = detail::get_u32(is, p, "d_f");
  const std::uint32_t K_c = detail::get_u32(is, p, "K_c");
  const std::uint32_t K_f = detail::get_u32(is, p, "K_f");
  const std::uint32_t ofr_hidden = detail::get_u32(is, p, "ofr_hidden");
  const std::uint32_t use_ofr = detail::get_u32(is, p, "use_ofr");
  const std::uint32_t label_level = detail::get_u32(is, p, "label_level");
  const std::uint64_t seed = detail::get_u64(is, p, "seed");

  Checkpoint out;
  if (kind == 0) {
    out.kind = Checkpoint::kHmil;
    HmilConfig cfg;
    cfg.d_c = d_c;
    cfg.d_f = d_f;
    cfg.K_c = K_c;
    cfg.K_f = K_f;
    cfg.ofr_hidden = ofr_hidden;
    cfg.use_ofr = use_ofr != 0;
    cfg.seed = seed;
    out.hmil = init_model(cfg);
    detail::read_params(is, out.hmil, p);
  } else if (kind >= 1 && kind <= 3) {
    out.kind = Checkpoint::kFlat;
    FlatConfig cfg;
    cfg.variant = kind == 1 ? FlatVariant::mean : kind == 2 ? FlatVariant::max : FlatVariant::abmil;
    cfg.d = d_c;
    cfg.K = K_f;
    cfg.label_level = label_level == 1 ? LabelLevel::coarse : LabelLevel::fine;
    cfg.seed = seed;
    out.flat = init_flat(cfg);
    detail::read_params(is, out.flat, p);
  } else {
    throw FormatError(p + ": unknown model kind " + std::to_string(kind));
  }
  return out;
}

}  // namespace hmil
