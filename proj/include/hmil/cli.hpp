#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "hmil/baselines.hpp"
#include "hmil/checkpoint.hpp"
#include "hmil/data.hpp"
#include "hmil/error.hpp"
#include "hmil/eval.hpp"
#include "hmil/losses.hpp"
#include "hmil/model.hpp"
#include "hmil/train.hpp"

namespace hmil::cli {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;
namespace fs = std::filesystem;

struct RunOptions {
  std::string command;
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> model;
  std::optional<std::string> loss;
  std::optional<double> tau;
  std::optional<std::int64_t> bootstrap;
  std::optional<std::string> kfold;
  bool force = false;
  bool corrupt_tanh = false;
};

namespace detail {

inline json load_config(const RunOptions& opts) {
  if (opts.config_path.empty()) return json::object();
  std::ifstream is(opts.config_path);
  if (!is) throw IoError("cannot open config '" + opts.config_path + "'");
  try {
    json j;
    is >> j;
    if (!j.is_object()) throw FormatError(opts.config_path + ": config root must be an object");
    return j;
  } catch (const json::exception& e) {
    throw FormatError(opts.config_path + ": " + e.what());
  }
}

inline fs::path config_dir(const RunOptions& opts) {
  if (opts.config_path.empty()) return fs::path(".");
  fs::path p = fs::path(opts.config_path).parent_path();
  return p.empty() ? fs::path(".") : p;
}

inline std::uint64_t resolve_seed(const RunOptions& opts, const json& cfg) {
  if (opts.seed) return *opts.seed;
  if (cfg.contains("seed")) return cfg.at("seed").get<std::uint64_t>();
  return 0;
}

inline fs::path resolve_out(const RunOptions& opts, const json& cfg,
                            const char* fallback = nullptr) {
  if (opts.out) return fs::path(*opts.out);
  if (cfg.contains("out")) return config_dir(opts) / cfg.at("out").get<std::string>();
  if (fallback) return fs::path(fallback);
  throw ConfigError("no output directory: pass --out or set \"out\" in the config");
}

inline void prepare_out_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir))
      throw ConfigError("output path '" + dir.string() + "' exists and is not a directory");
    if (!fs::is_empty(dir) && !force)
      throw ConfigError("output directory '" + dir.string() +
                        "' is not empty; pass --force to write into it");
  } else {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory '" + dir.string() + "'");
  }
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os << text;
  if (!os) throw IoError("failed writing '" + path.string() + "'");
}

inline void write_json_file(const fs::path& path, const ojson& j) {
  write_text(path, j.dump(2) + "\n");
}

// Shortest round-trip decimal form, reused for CSV cells so identical
// doubles always serialize to identical bytes.
inline std::string num_str(double v) { return ojson(v).dump(); }

inline Taxonomy default_taxonomy() {
  return build_taxonomy({"benign", "malignant"},
                        {"normal", "lesion", "low_grade", "high_grade"},
                        {{"normal", "benign"},
                         {"lesion", "benign"},
                         {"low_grade", "malignant"},
                         {"high_grade", "malignant"}});
}

inline Taxonomy resolve_taxonomy(const RunOptions& opts, const json& cfg) {
  if (!cfg.contains("taxonomy")) return default_taxonomy();
  const json& t = cfg.at("taxonomy");
  if (t.is_string()) return load_taxonomy(config_dir(opts) / t.get<std::string>());
  if (t.is_object()) return taxonomy_from_json(t, "config taxonomy");
  throw ConfigError("\"taxonomy\" must be a path or an inline object");
}

inline SyntheticConfig synthetic_from_config(const json& cfg, Taxonomy tax,
                                             std::uint64_t seed) {
  SyntheticConfig sc;
  sc.taxonomy = std::move(tax);
  sc.seed = seed;
  if (cfg.contains("synthetic")) {
    const json& s = cfg.at("synthetic");
    sc.d_c = s.value("d_c", sc.d_c);
    sc.bags_per_fine_class = s.value("bags_per_fine_class", sc.bags_per_fine_class);
    sc.instances_min = s.value("instances_min", sc.instances_min);
    sc.instances_max = s.value("instances_max", sc.instances_max);
    sc.witness_rate = s.value("witness_rate", sc.witness_rate);
    sc.class_sep_coarse = s.value("class_sep_coarse", sc.class_sep_coarse);
    sc.class_sep_fine = s.value("class_sep_fine", sc.class_sep_fine);
    sc.noise_sigma = s.value("noise_sigma", sc.noise_sigma);
  }
  return sc;
}

inline ojson synthetic_to_json(const SyntheticConfig& sc) {
  ojson j;
  j["d_c"] = sc.d_c;
  j["bags_per_fine_class"] = sc.bags_per_fine_class;
  j["instances_min"] = sc.instances_min;
  j["instances_max"] = sc.instances_max;
  j["witness_rate"] = sc.witness_rate;
  j["class_sep_coarse"] = sc.class_sep_coarse;
  j["class_sep_fine"] = sc.class_sep_fine;
  j["noise_sigma"] = sc.noise_sigma;
  return j;
}

inline SplitScheme parse_kfold_arg(const std::string& arg) {
  const auto colon = arg.find(':');
  if (colon == std::string::npos)
    throw ConfigError("--kfold expects k:fold, got '" + arg + "'");
  SplitScheme s;
  s.kind = SplitScheme::kKfold;
  try {
    s.k = static_cast<std::size_t>(std::stoul(arg.substr(0, colon)));
    s.fold = static_cast<std::size_t>(std::stoul(arg.substr(colon + 1)));
  } catch (const std::exception&) {
    throw ConfigError("--kfold expects k:fold, got '" + arg + "'");
  }
  return s;
}

inline std::optional<SplitScheme> split_from_config(const json& cfg) {
  if (!cfg.contains("split")) return std::nullopt;
  const json& s = cfg.at("split");
  SplitScheme scheme;
  const std::string mode = s.value("scheme", "ratio");
  if (mode == "ratio") {
    scheme.kind = SplitScheme::kRatio;
    scheme.train = s.value("train", scheme.train);
    scheme.val = s.value("val", scheme.val);
    scheme.test = s.value("test", scheme.test);
  } else if (mode == "kfold") {
    scheme.kind = SplitScheme::kKfold;
    scheme.k = s.value("k", scheme.k);
    scheme.fold = s.value("fold", scheme.fold);
  } else {
    throw ConfigError("unknown split scheme '" + mode + "'");
  }
  return scheme;
}

inline std::optional<SplitScheme> resolve_split(const RunOptions& opts, const json& cfg) {
  if (opts.kfold) return parse_kfold_arg(*opts.kfold);
  return split_from_config(cfg);
}

inline Stratify resolve_stratify(const json& cfg) {
  if (cfg.contains("split")) {
    const std::string by = cfg.at("split").value("stratify", "fine");
    if (by == "fine") return Stratify::fine;
    if (by == "coarse") return Stratify::coarse;
    throw ConfigError("unknown stratify level '" + by + "'");
  }
  return Stratify::fine;
}

inline ojson split_to_json(const SplitScheme& s) {
  ojson j;
  if (s.kind == SplitScheme::kRatio) {
    j["scheme"] = "ratio";
    j["train"] = s.train;
    j["val"] = s.val;
    j["test"] = s.test;
  } else {
    j["scheme"] = "kfold";
    j["k"] = s.k;
    j["fold"] = s.fold;
  }
  return j;
}

inline TrainConfig train_from_config(const RunOptions& opts, const json& cfg,
                                     std::uint64_t seed) {
  TrainConfig tc;
  if (cfg.contains("train")) {
    const json& t = cfg.at("train");
    tc.epochs = t.value("epochs", tc.epochs);
    tc.batch_size = t.value("batch_size", tc.batch_size);
    tc.lr = t.value("lr", tc.lr);
    tc.weight_decay = t.value("weight_decay", tc.weight_decay);
    if (t.contains("loss")) tc.loss_mode = LossMode::parse(t.at("loss").get<std::string>());
    tc.tau = t.value("tau", tc.tau);
    if (t.contains("select_metric"))
      tc.select_metric = parse_select_metric(t.at("select_metric").get<std::string>());
    tc.adam_beta1 = t.value("adam_beta1", tc.adam_beta1);
    tc.adam_beta2 = t.value("adam_beta2", tc.adam_beta2);
    tc.adam_eps = t.value("adam_eps", tc.adam_eps);
    tc.decoupled_wd = t.value("decoupled_wd", tc.decoupled_wd);
    tc.use_ham = t.value("use_ham", tc.use_ham);
    tc.use_hba = t.value("use_hba", tc.use_hba);
    tc.use_scl = t.value("use_scl", tc.use_scl);
  }
  if (opts.loss) tc.loss_mode = LossMode::parse(*opts.loss);
  if (opts.tau) tc.tau = *opts.tau;
  tc.seed = seed;
  return tc;
}

inline ojson train_to_json(const TrainConfig& tc) {
  ojson j;
  j["epochs"] = tc.epochs;
  j["batch_size"] = tc.batch_size;
  j["lr"] = tc.lr;
  j["weight_decay"] = tc.weight_decay;
  j["loss"] = tc.loss_mode.str();
  j["tau"] = tc.tau;
  j["select_metric"] = select_metric_name(tc.select_metric);
  j["adam_beta1"] = tc.adam_beta1;
  j["adam_beta2"] = tc.adam_beta2;
  j["adam_eps"] = tc.adam_eps;
  j["decoupled_wd"] = tc.decoupled_wd;
  j["use_ham"] = tc.use_ham;
  j["use_hba"] = tc.use_hba;
  j["use_scl"] = tc.use_scl;
  return j;
}

inline void write_run_json(const fs::path& out, const std::string& command, ojson resolved) {
  ojson j;
  j["command"] = command;
  for (auto& [k, v] : resolved.items()) j[k] = v;
  write_json_file(out / "run.json", j);
}

inline void write_history(const fs::path& path, const TrainHistory& h) {
  std::string text;
  for (const EpochRecord& r : h.records) {
    ojson j;
    j["epoch"] = r.epoch;
    if (h.hierarchical) {
      j["ce_c"] = r.loss.ce_c;
      j["ce_f"] = r.loss.ce_f;
      j["ia"] = r.loss.ia;
      j["ba"] = r.loss.ba;
      j["reg"] = r.loss.reg;
      j["beta"] = r.loss.beta;
    } else {
      j["ce"] = r.loss.ce_f;
    }
    j["total"] = r.loss.total;
    j["val_metric"] = r.val_metric;
    text += j.dump() + "\n";
  }
  write_text(path, text);
}

inline ojson class_stat_json(const ClassStat& s) {
  return s.defined ? ojson(s.value) : ojson(nullptr);
}

inline ojson metrics_to_json(const MetricsReport& rep, const std::vector<std::string>& names) {
  ojson j;
  j["n"] = rep.n;
  j["accuracy"] = rep.accuracy;
  j["macro_sensitivity"] = rep.confusion.macro_sensitivity_defined
                               ? ojson(rep.confusion.macro_sensitivity)
                               : ojson(nullptr);
  j["macro_specificity"] = rep.confusion.macro_specificity_defined
                               ? ojson(rep.confusion.macro_specificity)
                               : ojson(nullptr);
  j["macro_f1"] = rep.confusion.macro_f1_defined ? ojson(rep.confusion.macro_f1)
                                                 : ojson(nullptr);
  j["macro_auc"] = rep.auc.macro_defined ? ojson(rep.auc.macro) : ojson(nullptr);
  ojson pc = ojson::object();
  for (std::size_t k = 0; k < names.size(); ++k) {
    ojson c;
    c["sensitivity"] = class_stat_json(rep.confusion.sensitivity[k]);
    c["specificity"] = class_stat_json(rep.confusion.specificity[k]);
    c["f1"] = class_stat_json(rep.confusion.f1[k]);
    c["auc"] = class_stat_json(rep.auc.per_class[k]);
    pc[names[k]] = c;
  }
  j["per_class"] = pc;
  if (!rep.bootstrap.empty()) {
    ojson b = ojson::object();
    for (const char* name : {"accuracy", "macro_sensitivity", "macro_specificity", "macro_f1",
                             "macro_auc"}) {
      const auto it = rep.bootstrap.find(name);
      if (it == rep.bootstrap.end()) continue;
      ojson s;
      s["mean"] = it->second.mean;
      s["sd"] = it->second.sd;
      s["ci_lo"] = it->second.lo;
      s["ci_hi"] = it->second.hi;
      s["replicates_used"] = it->second.used;
      b[name] = s;
    }
    j["bootstrap"] = b;
  }
  return j;
}

inline std::string per_class_csv_rows(const std::string& level, const MetricsReport& rep,
                                      const std::vector<std::string>& names) {
  std::string text;
  const auto cell = [](const ClassStat& s) { return s.defined ? num_str(s.value) : std::string(); };
  for (std::size_t k = 0; k < names.size(); ++k) {
    text += level + "," + names[k] + "," + cell(rep.confusion.sensitivity[k]) + "," +
            cell(rep.confusion.specificity[k]) + "," + cell(rep.confusion.f1[k]) + "," +
            cell(rep.auc.per_class[k]) + "\n";
  }
  return text;
}

struct EvalArrays {
  std::vector<std::size_t> y;
  std::vector<std::size_t> pred;
  Matrix scores{1, 1};
};

inline void check_dataset_compatible(const HmilConfig& mc, const Dataset& ds) {
  if (mc.d_c != ds.d_c)
    throw IncompatibilityError("checkpoint expects d=" + std::to_string(mc.d_c) +
                               " but dataset has d=" + std::to_string(ds.d_c));
  if (mc.K_c != ds.taxonomy.num_coarse() || mc.K_f != ds.taxonomy.num_fine())
    throw IncompatibilityError(
        "checkpoint taxonomy (" + std::to_string(mc.K_c) + "/" + std::to_string(mc.K_f) +
        " classes) does not match dataset taxonomy (" +
        std::to_string(ds.taxonomy.num_coarse()) + "/" + std::to_string(ds.taxonomy.num_fine()) +
        ")");
}

}  // namespace detail

inline int cmd_gen(const RunOptions& opts) {
  const json cfg = detail::load_config(opts);
  const std::uint64_t seed = detail::resolve_seed(opts, cfg);
  const fs::path out = detail::resolve_out(opts, cfg);
  detail::prepare_out_dir(out, opts.force);

  Taxonomy tax = detail::resolve_taxonomy(opts, cfg);
  const SyntheticConfig sc = detail::synthetic_from_config(cfg, std::move(tax), seed);
  SplitScheme scheme;
  if (auto s = detail::resolve_split(opts, cfg)) scheme = *s;
  const Stratify strat = detail::resolve_stratify(cfg);

  Dataset ds = generate_synthetic(sc);
  ds = make_splits(ds, scheme, seed, strat);
  write_dataset(ds, out);

  ojson resolved;
  resolved["seed"] = seed;
  resolved["out"] = out.string();
  resolved["synthetic"] = detail::synthetic_to_json(sc);
  resolved["split"] = detail::split_to_json(scheme);
  detail::write_run_json(out, "gen", std::move(resolved));

  std::size_t n_train = ds.split_indices(Split::train).size();
  std::size_t n_val = ds.split_indices(Split::val).size();
  std::size_t n_test = ds.split_indices(Split::test).size();
  std::size_t inst_min = 0, inst_max = 0, inst_total = 0;
  for (std::size_t i = 0; i < ds.bags.size(); ++i) {
    const std::size_t n = ds.bags[i].features.rows();
    if (i == 0) inst_min = inst_max = n;
    inst_min = std::min(inst_min, n);
    inst_max = std::max(inst_max, n);
    inst_total += n;
  }
  std::cout << "generated " << ds.bags.size() << " bags (" << sc.bags_per_fine_class
            << " per fine class, d=" << ds.d_c << ")\n"
            << "instances per bag: min " << inst_min << ", max " << inst_max << ", mean "
            << (ds.bags.empty() ? 0.0
                                : static_cast<double>(inst_total) /
                                      static_cast<double>(ds.bags.size()))
            << "\n"
            << "splits: train " << n_train << ", val " << n_val << ", test " << n_test << "\n"
            << "manifest: " << (out / "manifest.json").string() << "\n";
  return 0;
}

inline int cmd_train(const RunOptions& opts) {
  const json cfg = detail::load_config(opts);
  const std::uint64_t seed = detail::resolve_seed(opts, cfg);
  const fs::path out = detail::resolve_out(opts, cfg);
  detail::prepare_out_dir(out, opts.force);

  if (!cfg.contains("dataset"))
    throw ConfigError("train requires a \"dataset\" manifest path in the config");
  const fs::path manifest = detail::config_dir(opts) / cfg.at("dataset").get<std::string>();
  Dataset ds = load_dataset(manifest);

  std::optional<SplitScheme> scheme = detail::resolve_split(opts, cfg);
  if (scheme) ds = make_splits(ds, *scheme, seed, detail::resolve_stratify(cfg));

  const json model_cfg = cfg.contains("model") ? cfg.at("model") : json::object();
  const std::string model_kind =
      opts.model ? *opts.model : model_cfg.value("type", std::string("hmil"));
  TrainConfig tc = detail::train_from_config(opts, cfg, seed);

  ojson resolved;
  resolved["seed"] = seed;
  resolved["out"] = out.string();
  resolved["dataset"] = manifest.string();
  if (scheme) resolved["split"] = detail::split_to_json(*scheme);
  resolved["train"] = detail::train_to_json(tc);

  TrainHistory hist;
  ojson model_json;
  model_json["type"] = model_kind;
  if (model_kind == "hmil") {
    HmilConfig mc;
    mc.d_c = ds.d_c;
    mc.K_c = ds.taxonomy.num_coarse();
    mc.K_f = ds.taxonomy.num_fine();
    mc.d_f = model_cfg.value("d_f", std::size_t{0});
    mc.ofr_hidden = model_cfg.value("ofr_hidden", std::size_t{0});
    mc.use_ofr = model_cfg.value("use_ofr", true);
    mc.seed = seed;
    HmilModel model = init_model(mc);
    model_json["d_c"] = model.cfg.d_c;
    model_json["d_f"] = model.cfg.d_f;
    model_json["ofr_hidden"] = model.cfg.ofr_hidden;
    model_json["use_ofr"] = model.cfg.use_ofr;
    hist = train(model, ds, tc);
    save_checkpoint(out / "checkpoint.bin", model);
  } else {
    FlatConfig fc;
    fc.variant = parse_flat_variant(model_kind);
    fc.d = ds.d_c;
    const std::string level = model_cfg.value("label_level", std::string("fine"));
    if (level == "fine")
      fc.label_level = LabelLevel::fine;
    else if (level == "coarse")
      fc.label_level = LabelLevel::coarse;
    else
      throw ConfigError("unknown label_level '" + level + "'");
    fc.K = fc.label_level == LabelLevel::fine ? ds.taxonomy.num_fine()
                                              : ds.taxonomy.num_coarse();
    fc.seed = seed;
    FlatModel model = init_flat(fc);
    model_json["label_level"] = level;
    hist = train_flat(model, ds, tc);
    save_checkpoint(out / "checkpoint.bin", model);
  }
  resolved["model"] = model_json;
  detail::write_history(out / "history.jsonl", hist);
  detail::write_run_json(out, "train", std::move(resolved));

  std::cout << "trained " << model_kind << " for " << hist.records.size() << " epochs\n"
            << "best epoch " << hist.best_epoch << " ("
            << select_metric_name(tc.select_metric) << " " << hist.best_metric << ")\n"
            << "checkpoint: " << (out / "checkpoint.bin").string() << "\n";
  return 0;
}

inline int cmd_eval(const RunOptions& opts) {
  const json cfg = detail::load_config(opts);
  const std::uint64_t seed = detail::resolve_seed(opts, cfg);
  const fs::path out = detail::resolve_out(opts, cfg);
  detail::prepare_out_dir(out, opts.force);

  if (!cfg.contains("checkpoint"))
    throw ConfigError("eval requires a \"checkpoint\" path in the config");
  if (!cfg.contains("dataset"))
    throw ConfigError("eval requires a \"dataset\" manifest path in the config");
  const fs::path ckpt_path = detail::config_dir(opts) / cfg.at("checkpoint").get<std::string>();
  const fs::path manifest = detail::config_dir(opts) / cfg.at("dataset").get<std::string>();

  Checkpoint ck = load_checkpoint(ckpt_path);
  Dataset ds = load_dataset(manifest);
  std::optional<SplitScheme> scheme = detail::resolve_split(opts, cfg);
  if (scheme) ds = make_splits(ds, *scheme, seed, detail::resolve_stratify(cfg));

  std::int64_t replicates = 1000;
  bool force_identity = false;
  if (cfg.contains("eval")) {
    replicates = cfg.at("eval").value("bootstrap", replicates);
    force_identity = cfg.at("eval").value("force_identity_bootstrap", false);
  }
  if (opts.bootstrap) replicates = *opts.bootstrap;
  if (replicates < 0) throw ConfigError("bootstrap replicate count cannot be negative");

  const std::vector<std::size_t> test_idx = ds.split_indices(Split::test);
  if (test_idx.empty()) throw ConfigError("dataset has no test split to evaluate");
  const std::size_t n = test_idx.size();

  ojson resolved;
  resolved["seed"] = seed;
  resolved["out"] = out.string();
  resolved["checkpoint"] = ckpt_path.string();
  resolved["dataset"] = manifest.string();
  if (scheme) resolved["split"] = detail::split_to_json(*scheme);
  resolved["bootstrap"] = replicates;

  ojson report;
  std::string csv = "level,class,sensitivity,specificity,f1,auc\n";
  if (ck.kind == Checkpoint::kHmil) {
    detail::check_dataset_compatible(ck.hmil.cfg, ds);
    const std::size_t K_c = ck.hmil.cfg.K_c;
    const std::size_t K_f = ck.hmil.cfg.K_f;
    detail::EvalArrays fine, coarse;
    fine.scores = Matrix(n, K_f);
    coarse.scores = Matrix(n, K_c);
    for (std::size_t i = 0; i < n; ++i) {
      const FeatureBag& bag = ds.bags[test_idx[i]];
      const ForwardOutput fwd = forward(ck.hmil, bag.features);
      for (std::size_t k = 0; k < K_f; ++k) fine.scores.at(i, k) = fwd.p_f.at(0, k);
      for (std::size_t k = 0; k < K_c; ++k) coarse.scores.at(i, k) = fwd.p_c.at(0, k);
      fine.y.push_back(bag.y_f);
      coarse.y.push_back(bag.y_c);
      fine.pred.push_back(argmax_row(fwd.p_f, 0));
      coarse.pred.push_back(argmax_row(fwd.p_c, 0));
    }
    const MetricsReport fine_rep =
        compute_report(fine.y, fine.pred, fine.scores, K_f, static_cast<std::size_t>(replicates),
                       mix_seed(seed, 0xF17EULL), force_identity);
    const MetricsReport coarse_rep =
        compute_report(coarse.y, coarse.pred, coarse.scores, K_c,
                       static_cast<std::size_t>(replicates), mix_seed(seed, 0xC0A5ULL),
                       force_identity);
    const double consistency =
        hierarchy_consistency(coarse.scores, fine.scores, projection_matrix(ds.taxonomy));
    report["model"] = "hmil";
    report["n"] = n;
    report["fine"] = detail::metrics_to_json(fine_rep, ds.taxonomy.fine_names);
    report["coarse"] = detail::metrics_to_json(coarse_rep, ds.taxonomy.coarse_names);
    report["hierarchy_consistency"] = consistency;
    csv += detail::per_class_csv_rows("fine", fine_rep, ds.taxonomy.fine_names);
    csv += detail::per_class_csv_rows("coarse", coarse_rep, ds.taxonomy.coarse_names);
    std::cout << "evaluated " << n << " test bags\n"
              << "fine accuracy " << fine_rep.accuracy << ", coarse accuracy "
              << coarse_rep.accuracy << "\n"
              << "hierarchy consistency " << consistency << "\n";
  } else {
    if (ck.flat.cfg.d != ds.d_c)
      throw IncompatibilityError("checkpoint expects d=" + std::to_string(ck.flat.cfg.d) +
                                 " but dataset has d=" + std::to_string(ds.d_c));
    const bool fine_level = ck.flat.cfg.label_level == LabelLevel::fine;
    const std::size_t K =
        fine_level ? ds.taxonomy.num_fine() : ds.taxonomy.num_coarse();
    if (ck.flat.cfg.K != K)
      throw IncompatibilityError("checkpoint has " + std::to_string(ck.flat.cfg.K) +
                                 " classes but dataset taxonomy has " + std::to_string(K));
    detail::EvalArrays arr;
    arr.scores = Matrix(n, K);
    for (std::size_t i = 0; i < n; ++i) {
      const FeatureBag& bag = ds.bags[test_idx[i]];
      const Matrix p = flat_forward(ck.flat, bag.features);
      for (std::size_t k = 0; k < K; ++k) arr.scores.at(i, k) = p.at(0, k);
      arr.y.push_back(fine_level ? bag.y_f : bag.y_c);
      arr.pred.push_back(argmax_row(p, 0));
    }
    const MetricsReport rep =
        compute_report(arr.y, arr.pred, arr.scores, K, static_cast<std::size_t>(replicates),
                       mix_seed(seed, 0xF17EULL), force_identity);
    const auto& names = fine_level ? ds.taxonomy.fine_names : ds.taxonomy.coarse_names;
    const char* level = fine_level ? "fine" : "coarse";
    report["model"] = flat_variant_name(ck.flat.cfg.variant);
    report["n"] = n;
    report[level] = detail::metrics_to_json(rep, names);
    csv += detail::per_class_csv_rows(level, rep, names);
    std::cout << "evaluated " << n << " test bags\n"
              << level << " accuracy " << rep.accuracy << "\n";
  }
  detail::write_json_file(out / "report.json", report);
  detail::write_text(out / "per_class.csv", csv);
  detail::write_run_json(out, "eval", std::move(resolved));
  std::cout << "report: " << (out / "report.json").string() << "\n";
  return 0;
}

inline int cmd_gradcheck(const RunOptions& opts) {
  const json cfg = detail::load_config(opts);
  const std::uint64_t seed = detail::resolve_seed(opts, cfg);
  const fs::path out = detail::resolve_out(opts, cfg, "gradcheck-out");
  detail::prepare_out_dir(out, opts.force);

  std::size_t d_c = 16, K_c = 2, K_f = 4, n_bags = 8, inst_min = 4, inst_max = 8;
  double eps = 1e-5, threshold = 1e-4, tau = 0.1;
  if (cfg.contains("gradcheck")) {
    const json& g = cfg.at("gradcheck");
    d_c = g.value("d_c", d_c);
    K_c = g.value("K_c", K_c);
    K_f = g.value("K_f", K_f);
    n_bags = g.value("bags", n_bags);
    inst_min = g.value("instances_min", inst_min);
    inst_max = g.value("instances_max", inst_max);
    eps = g.value("eps", eps);
    threshold = g.value("threshold", threshold);
    tau = g.value("tau", tau);
  }
  if (d_c > 32) throw ConfigError("gradcheck requires d_c <= 32");
  if (inst_max > 16) throw ConfigError("gradcheck requires at most 16 instances per bag");
  if (inst_min < 1 || inst_min > inst_max)
    throw ConfigError("gradcheck instance range is invalid");
  if (n_bags < 2) throw ConfigError("gradcheck requires at least 2 bags");
  if (K_c < 2 || K_f < K_c) throw ConfigError("gradcheck requires K_f >= K_c >= 2");

  if (opts.corrupt_tanh) ad::testing::corrupt_tanh_backward = true;

  std::vector<std::string> coarse_names, fine_names;
  std::vector<std::pair<std::string, std::string>> parents;
  for (std::size_t c = 0; c < K_c; ++c) coarse_names.push_back("c" + std::to_string(c));
  for (std::size_t f = 0; f < K_f; ++f) {
    fine_names.push_back("f" + std::to_string(f));
    parents.emplace_back(fine_names.back(), coarse_names[f % K_c]);
  }
  const Taxonomy tax = build_taxonomy(coarse_names, fine_names, parents);
  const Matrix P = projection_matrix(tax);

  HmilConfig mc;
  mc.d_c = d_c;
  mc.d_f = std::max<std::size_t>(1, d_c / 4);
  mc.ofr_hidden = std::max<std::size_t>(1, d_c / 2);
  mc.K_c = K_c;
  mc.K_f = K_f;
  mc.seed = seed;
  HmilModel model = init_model(mc);

  Rng rng(mix_seed(seed, 0x6BA6ULL));
  std::vector<Matrix> bags;
  std::vector<std::size_t> ys_f, ys_c;
  for (std::size_t i = 0; i < n_bags; ++i) {
    const std::size_t ni = rng.uniform_int(inst_min, inst_max);
    Matrix h(ni, d_c);
    for (double& v : h.data()) v = rng.normal();
    bags.push_back(std::move(h));
    ys_f.push_back(i % K_f);
    ys_c.push_back(tax.parent[ys_f.back()]);
  }

  std::vector<Matrix> param_vals;
  for (const auto& [name, ptr] : model.params()) param_vals.push_back(*ptr);

  const std::size_t beta_e = 1, beta_E = 4;
  const LossMode mode;

  struct Component {
    const char* name;
    std::function<ad::Value(ad::Tape&, const BoundModel&)> build;
  };
  const auto forward_all = [&](ad::Tape& t, const BoundModel& bm) {
    std::vector<ForwardGraph> fwd;
    for (const Matrix& h : bags) fwd.push_back(forward_graph(t, bm, h));
    return fwd;
  };
  const auto mean_of = [&](ad::Tape&, std::vector<ad::Value> terms) {
    ad::Value s = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) s = ad::add(s, terms[i]);
    return ad::scale(s, 1.0 / static_cast<double>(terms.size()));
  };
  const std::vector<Component> components = {
      {"ce_c",
       [&](ad::Tape& t, const BoundModel& bm) {
         auto fwd = forward_all(t, bm);
         std::vector<ad::Value> v;
         for (std::size_t i = 0; i < fwd.size(); ++i)
           v.push_back(graph::cross_entropy(t, fwd[i].logits_c, ys_c[i]));
         return mean_of(t, std::move(v));
       }},
      {"ce_f",
       [&](ad::Tape& t, const BoundModel& bm) {
         auto fwd = forward_all(t, bm);
         std::vector<ad::Value> v;
         for (std::size_t i = 0; i < fwd.size(); ++i)
           v.push_back(graph::cross_entropy(t, fwd[i].logits_f, ys_f[i]));
         return mean_of(t, std::move(v));
       }},
      {"ia",
       [&](ad::Tape& t, const BoundModel& bm) {
         auto fwd = forward_all(t, bm);
         std::vector<ad::Value> v;
         for (auto& f : fwd)
           v.push_back(graph::instance_alignment(t, f.A_c, f.A_f, P));
         return mean_of(t, std::move(v));
       }},
      {"ba",
       [&](ad::Tape& t, const BoundModel& bm) {
         auto fwd = forward_all(t, bm);
         std::vector<ad::Value> v;
         for (std::size_t i = 0; i < fwd.size(); ++i)
           v.push_back(graph::bag_alignment(t, fwd[i].p_f, ys_c[i], P));
         return mean_of(t, std::move(v));
       }},
      {"reg",
       [&](ad::Tape& t, const BoundModel& bm) {
         auto fwd = forward_all(t, bm);
         std::vector<ad::Value> b_fs;
         for (auto& f : fwd) b_fs.push_back(f.B_f);
         return graph::supcon(t, b_fs, ys_f, tau);
       }},
      {"combined",
       [&](ad::Tape& t, const BoundModel& bm) {
         auto fwd = forward_all(t, bm);
         std::vector<ad::Value> vc, vf, vi, vb;
         std::vector<ad::Value> b_fs;
         for (std::size_t i = 0; i < fwd.size(); ++i) {
           vc.push_back(graph::cross_entropy(t, fwd[i].logits_c, ys_c[i]));
           vf.push_back(graph::cross_entropy(t, fwd[i].logits_f, ys_f[i]));
           vi.push_back(graph::instance_alignment(t, fwd[i].A_c, fwd[i].A_f, P));
           vb.push_back(graph::bag_alignment(t, fwd[i].p_f, ys_c[i], P));
           b_fs.push_back(fwd[i].B_f);
         }
         const ad::Value reg = graph::supcon(t, b_fs, ys_f, tau);
         return graph::combine_graph(t, mean_of(t, std::move(vc)),
                                             mean_of(t, std::move(vf)),
                                             mean_of(t, std::move(vi)),
                                             mean_of(t, std::move(vb)), reg, beta_e, beta_E,
                                             mode);
       }},
  };

  ojson rows = ojson::array();
  double worst = 0.0;
  std::string worst_name;
  for (const Component& comp : components) {
    // Single-term components only reach a subset of the parameters, so probe
    // the graph once and restrict the finite-difference sweep to that subset.
    std::vector<std::size_t> live;
    {
      ad::Tape t;
      std::vector<ad::Value> leaves;
      for (const Matrix& p : param_vals) leaves.push_back(t.leaf(p, "param"));
      const BoundModel bm = bind_leaves(model.cfg, leaves);
      const ad::Value loss = comp.build(t, bm);
      std::vector<char> anc(t.size(), 0);
      anc[loss.id()] = 1;
      for (std::size_t k = loss.id() + 1; k-- > 0;) {
        if (!anc[k]) continue;
        for (std::size_t p : t.node(k).parents) anc[p] = 1;
      }
      for (std::size_t i = 0; i < leaves.size(); ++i)
        if (anc[leaves[i].id()]) live.push_back(i);
    }
    std::vector<Matrix> sub;
    for (std::size_t i : live) sub.push_back(param_vals[i]);
    const double err = ad::grad_check(
        [&](ad::Tape& t, const std::vector<ad::Value>& sub_leaves) {
          std::vector<ad::Value> leaves;
          std::size_t next = 0;
          for (std::size_t i = 0; i < param_vals.size(); ++i) {
            if (next < live.size() && live[next] == i)
              leaves.push_back(sub_leaves[next++]);
            else
              leaves.push_back(t.constant(param_vals[i]));
          }
          const BoundModel bm = bind_leaves(model.cfg, leaves);
          return comp.build(t, bm);
        },
        sub, eps);
    const bool ok = err <= threshold;
    if (err > worst) {
      worst = err;
      worst_name = comp.name;
    }
    std::printf("%-10s max_rel_err %.3e  %s\n", comp.name, err, ok ? "pass" : "FAIL");
    ojson r;
    r["component"] = comp.name;
    r["max_rel_err"] = err;
    r["pass"] = ok;
    rows.push_back(r);
  }

  ojson resolved;
  resolved["seed"] = seed;
  resolved["out"] = out.string();
  ojson gc;
  gc["d_c"] = d_c;
  gc["K_c"] = K_c;
  gc["K_f"] = K_f;
  gc["bags"] = n_bags;
  gc["instances_min"] = inst_min;
  gc["instances_max"] = inst_max;
  gc["eps"] = eps;
  gc["threshold"] = threshold;
  gc["tau"] = tau;
  resolved["gradcheck"] = gc;
  ojson result;
  result["components"] = rows;
  result["worst"] = worst;
  detail::write_json_file(out / "gradcheck.json", result);
  detail::write_run_json(out, "gradcheck", std::move(resolved));

  if (worst > threshold)
    throw ThresholdBreach("gradient check failed: component '" + worst_name +
                          "' max relative error " + detail::num_str(worst) + " exceeds " +
                          detail::num_str(threshold));
  std::cout << "all components within " << threshold << "\n";
  return 0;
}

struct VariantSpec {
  std::string name;
  std::string model = "hmil";
  bool use_ham = true;
  bool use_hba = true;
  bool use_scl = true;
  bool use_ofr = true;
  std::optional<std::string> loss;
  std::optional<double> tau;
};

inline std::vector<VariantSpec> default_variants() {
  std::vector<VariantSpec> v;
  auto ablation = [](std::string name, bool ham, bool hba, bool scl) {
    VariantSpec s;
    s.name = std::move(name);
    s.use_ham = ham;
    s.use_hba = hba;
    s.use_scl = scl;
    return s;
  };
  v.push_back(ablation("full", true, true, true));
  v.push_back(ablation("no_ham", false, true, true));
  v.push_back(ablation("no_hba", true, false, true));
  v.push_back(ablation("no_ham_no_hba", false, false, true));
  v.push_back(ablation("no_scl", true, true, false));
  VariantSpec abmil;
  abmil.name = "abmil";
  abmil.model = "abmil";
  v.push_back(abmil);
  VariantSpec mean;
  mean.name = "mean";
  mean.model = "mean";
  v.push_back(mean);
  VariantSpec mx;
  mx.name = "max";
  mx.model = "max";
  v.push_back(mx);
  return v;
}

struct VariantResult {
  double fine_auc = 0.0;
  double coarse_auc = 0.0;
  double consistency = 0.0;
  bool hierarchical = false;
  double val_first = 0.0;
  double val_best = 0.0;
};

inline VariantResult run_variant(const SyntheticConfig& synth_base, const SplitScheme& scheme,
                                 Stratify strat, const TrainConfig& train_base,
                                 const VariantSpec& v, std::uint64_t seed) {
  SyntheticConfig sc = synth_base;
  sc.seed = seed;
  Dataset ds = generate_synthetic(sc);
  ds = make_splits(ds, scheme, seed, strat);

  TrainConfig tc = train_base;
  tc.seed = seed;
  if (v.loss) tc.loss_mode = LossMode::parse(*v.loss);
  if (v.tau) tc.tau = *v.tau;

  const std::vector<std::size_t> test_idx = ds.split_indices(Split::test);
  if (test_idx.empty()) throw ConfigError("compare split produced an empty test set");
  const std::size_t n = test_idx.size();
  const std::size_t K_f = ds.taxonomy.num_fine();
  const std::size_t K_c = ds.taxonomy.num_coarse();

  VariantResult res;
  if (v.model == "hmil") {
    tc.use_ham = v.use_ham;
    tc.use_hba = v.use_hba;
    tc.use_scl = v.use_scl;
    HmilConfig mc;
    mc.d_c = ds.d_c;
    mc.K_c = K_c;
    mc.K_f = K_f;
    mc.use_ofr = v.use_ofr;
    mc.seed = seed;
    HmilModel model = init_model(mc);
    const TrainHistory hist = train(model, ds, tc);
    res.val_first = hist.records.front().val_metric;
    res.val_best = hist.best_metric;
    Matrix scores_f(n, K_f), scores_c(n, K_c);
    std::vector<std::size_t> y_f, y_c;
    for (std::size_t i = 0; i < n; ++i) {
      const FeatureBag& bag = ds.bags[test_idx[i]];
      const ForwardOutput fwd = forward(model, bag.features);
      for (std::size_t k = 0; k < K_f; ++k) scores_f.at(i, k) = fwd.p_f.at(0, k);
      for (std::size_t k = 0; k < K_c; ++k) scores_c.at(i, k) = fwd.p_c.at(0, k);
      y_f.push_back(bag.y_f);
      y_c.push_back(bag.y_c);
    }
    const AucResult auc_f = auc_ovr(y_f, scores_f);
    const AucResult auc_c = auc_ovr(y_c, scores_c);
    res.fine_auc = auc_f.macro;
    res.coarse_auc = auc_c.macro;
    res.consistency = hierarchy_consistency(scores_c, scores_f, projection_matrix(ds.taxonomy));
    res.hierarchical = true;
  } else {
    FlatConfig fc;
    fc.variant = parse_flat_variant(v.model);
    fc.d = ds.d_c;
    fc.K = K_f;
    fc.label_level = LabelLevel::fine;
    fc.seed = seed;
    FlatModel model = init_flat(fc);
    const TrainHistory hist = train_flat(model, ds, tc);
    res.val_first = hist.records.front().val_metric;
    res.val_best = hist.best_metric;
    Matrix scores(n, K_f);
    std::vector<std::size_t> y;
    for (std::size_t i = 0; i < n; ++i) {
      const FeatureBag& bag = ds.bags[test_idx[i]];
      const Matrix p = flat_forward(model, bag.features);
      for (std::size_t k = 0; k < K_f; ++k) scores.at(i, k) = p.at(0, k);
      y.push_back(bag.y_f);
    }
    res.fine_auc = auc_ovr(y, scores).macro;
  }
  return res;
}

inline int cmd_compare(const RunOptions& opts) {
  const json cfg = detail::load_config(opts);
  const std::uint64_t seed = detail::resolve_seed(opts, cfg);
  const fs::path out = detail::resolve_out(opts, cfg);
  detail::prepare_out_dir(out, opts.force);

  Taxonomy tax = detail::resolve_taxonomy(opts, cfg);
  const SyntheticConfig sc = detail::synthetic_from_config(cfg, std::move(tax), seed);
  SplitScheme scheme;
  if (auto s = detail::resolve_split(opts, cfg)) scheme = *s;
  const Stratify strat = detail::resolve_stratify(cfg);
  TrainConfig tc = detail::train_from_config(opts, cfg, seed);

  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::vector<VariantSpec> variants = default_variants();
  if (cfg.contains("compare")) {
    const json& c = cfg.at("compare");
    if (c.contains("seeds")) seeds = c.at("seeds").get<std::vector<std::uint64_t>>();
    if (c.contains("variants")) {
      variants.clear();
      for (const json& vj : c.at("variants")) {
        VariantSpec v;
        v.name = vj.at("name").get<std::string>();
        v.model = vj.value("model", v.model);
        v.use_ham = vj.value("use_ham", v.use_ham);
        v.use_hba = vj.value("use_hba", v.use_hba);
        v.use_scl = vj.value("use_scl", v.use_scl);
        v.use_ofr = vj.value("use_ofr", v.use_ofr);
        if (vj.contains("loss")) v.loss = vj.at("loss").get<std::string>();
        if (vj.contains("tau")) v.tau = vj.at("tau").get<double>();
        variants.push_back(std::move(v));
      }
    }
  }
  if (seeds.empty()) throw ConfigError("compare requires at least one seed");
  if (variants.empty()) throw ConfigError("compare requires at least one variant");
  if (opts.model) {
    variants.clear();
    VariantSpec v;
    v.name = *opts.model;
    v.model = *opts.model;
    variants.push_back(std::move(v));
  }

  const auto mean_sd = [](const std::vector<double>& xs) {
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    double sd = 0.0;
    if (xs.size() > 1) {
      double acc = 0.0;
      for (double x : xs) acc += (x - mean) * (x - mean);
      sd = std::sqrt(acc / static_cast<double>(xs.size() - 1));
    }
    return std::pair<double, double>(mean, sd);
  };

  ojson table = ojson::array();
  std::string csv = "variant,seed,fine_auc,coarse_auc,consistency\n";
  std::printf("%-16s %-22s %-22s %-22s\n", "variant", "fine_auc", "coarse_auc", "consistency");
  for (const VariantSpec& v : variants) {
    std::vector<double> fine, coarse, cons;
    for (const std::uint64_t s : seeds) {
      const VariantResult r = run_variant(sc, scheme, strat, tc, v, s);
      fine.push_back(r.fine_auc);
      csv += v.name + "," + std::to_string(s) + "," + detail::num_str(r.fine_auc) + ",";
      if (r.hierarchical) {
        coarse.push_back(r.coarse_auc);
        cons.push_back(r.consistency);
        csv += detail::num_str(r.coarse_auc) + "," + detail::num_str(r.consistency) + "\n";
      } else {
        csv += ",\n";
      }
    }
    const auto [fm, fs_] = mean_sd(fine);
    ojson row;
    row["variant"] = v.name;
    row["model"] = v.model;
    row["seeds"] = seeds;
    row["fine_auc"] = {{"mean", fm}, {"sd", fs_}, {"values", fine}};
    char fine_buf[64], coarse_buf[64], cons_buf[64];
    std::snprintf(fine_buf, sizeof fine_buf, "%.4f +/- %.4f", fm, fs_);
    if (!coarse.empty()) {
      const auto [cm, cs] = mean_sd(coarse);
      const auto [km, ks] = mean_sd(cons);
      row["coarse_auc"] = {{"mean", cm}, {"sd", cs}, {"values", coarse}};
      row["consistency"] = {{"mean", km}, {"sd", ks}, {"values", cons}};
      std::snprintf(coarse_buf, sizeof coarse_buf, "%.4f +/- %.4f", cm, cs);
      std::snprintf(cons_buf, sizeof cons_buf, "%.4f +/- %.4f", km, ks);
    } else {
      std::snprintf(coarse_buf, sizeof coarse_buf, "-");
      std::snprintf(cons_buf, sizeof cons_buf, "-");
    }
    std::printf("%-16s %-22s %-22s %-22s\n", v.name.c_str(), fine_buf, coarse_buf, cons_buf);
    table.push_back(row);
  }

  ojson resolved;
  resolved["seed"] = seed;
  resolved["out"] = out.string();
  resolved["synthetic"] = detail::synthetic_to_json(sc);
  resolved["split"] = detail::split_to_json(scheme);
  resolved["train"] = detail::train_to_json(tc);
  resolved["seeds"] = seeds;
  detail::write_json_file(out / "compare.json", table);
  detail::write_text(out / "compare.csv", csv);
  detail::write_run_json(out, "compare", std::move(resolved));
  std::cout << "results: " << (out / "compare.json").string() << "\n";
  return 0;
}

inline int run(const RunOptions& opts) {
  if (opts.command == "gen") return cmd_gen(opts);
  if (opts.command == "train") return cmd_train(opts);
  if (opts.command == "eval") return cmd_eval(opts);
  if (opts.command == "gradcheck") return cmd_gradcheck(opts);
  if (opts.command == "compare") return cmd_compare(opts);
  throw ConfigError("unknown command '" + opts.command + "'");
}

}  // namespace hmil::cli
