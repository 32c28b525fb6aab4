#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "helpers.hpp"
#include "hmil/checkpoint.hpp"
#include "hmil/cli.hpp"
#include "hmil/data.hpp"
#include "hmil/error.hpp"

using namespace hmil;
using Catch::Matchers::ContainsSubstring;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

cli::RunOptions opts_for(const std::string& command, const fs::path& config,
                         const fs::path& out, std::uint64_t seed) {
  cli::RunOptions o;
  o.command = command;
  o.config_path = config.string();
  o.out = out.string();
  o.seed = seed;
  return o;
}

json gen_config_json() {
  json j;
  j["synthetic"] = {{"d_c", 8},
                    {"bags_per_fine_class", 4},
                    {"instances_min", 3},
                    {"instances_max", 5},
                    {"witness_rate", 0.5}};
  j["split"] = {{"scheme", "ratio"}, {"train", 0.5}, {"val", 0.25}, {"test", 0.25}};
  return j;
}

fs::path write_json(const fs::path& path, const json& j) {
  testutil::spit(path, j.dump(2));
  return path;
}

// Generates the small shared dataset under dir/ds and returns its manifest.
fs::path gen_dataset(const fs::path& dir, std::uint64_t seed) {
  const fs::path cfg = write_json(dir / "gen.json", gen_config_json());
  REQUIRE(cli::run(opts_for("gen", cfg, dir / "ds", seed)) == 0);
  return dir / "ds" / "manifest.json";
}

fs::path write_train_config(const fs::path& dir, json extra_train = {}) {
  json j;
  j["dataset"] = "ds/manifest.json";
  json t = {{"epochs", 3}, {"batch_size", 4}, {"lr", 1e-3}};
  for (auto& [k, v] : extra_train.items()) t[k] = v;
  j["train"] = t;
  return write_json(dir / "train.json", j);
}

int run_cli(const std::string& args) {
  const char* exe = std::getenv("HMIL_CLI");
  REQUIRE(exe != nullptr);
  const std::string cmd = std::string(exe) + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  REQUIRE(rc != -1);
  return WEXITSTATUS(rc);
}

}  // namespace

TEST_CASE("gen output equals in-memory generation with the same seed") {
  testutil::TempDir tmp("cligen");
  const fs::path manifest = gen_dataset(tmp.path(), 7);
  const Dataset loaded = load_dataset(manifest);

  SyntheticConfig sc;
  sc.taxonomy = cli::detail::default_taxonomy();
  sc.d_c = 8;
  sc.bags_per_fine_class = 4;
  sc.instances_min = 3;
  sc.instances_max = 5;
  sc.witness_rate = 0.5;
  sc.seed = 7;
  SplitScheme scheme;
  scheme.train = 0.5;
  scheme.val = 0.25;
  scheme.test = 0.25;
  Dataset direct = generate_synthetic(sc);
  direct = make_splits(std::move(direct), scheme, 7);

  REQUIRE(loaded.bags.size() == direct.bags.size());
  REQUIRE(loaded.d_c == direct.d_c);
  for (std::size_t i = 0; i < direct.bags.size(); ++i) {
    REQUIRE(loaded.bags[i].bag_id == direct.bags[i].bag_id);
    REQUIRE(loaded.bags[i].y_f == direct.bags[i].y_f);
    REQUIRE(loaded.bags[i].split == direct.bags[i].split);
    for (std::size_t k = 0; k < direct.bags[i].features.size(); ++k)
      REQUIRE(loaded.bags[i].features[k] == direct.bags[i].features[k]);
  }

  const json run = json::parse(testutil::slurp(tmp.path() / "ds" / "run.json"));
  REQUIRE(run.at("command") == "gen");
  REQUIRE(run.at("seed") == 7);
  REQUIRE(run.at("synthetic").at("d_c") == 8);
  REQUIRE(run.at("split").at("scheme") == "ratio");
}

TEST_CASE("gen refuses a non-empty output directory without force") {
  testutil::TempDir tmp("cliforce");
  gen_dataset(tmp.path(), 1);
  const fs::path cfg = tmp.path() / "gen.json";

  cli::RunOptions again = opts_for("gen", cfg, tmp.path() / "ds", 1);
  REQUIRE_THROWS_WITH(cli::run(again), ContainsSubstring("--force"));

  again.force = true;
  REQUIRE(cli::run(again) == 0);
}

TEST_CASE("train writes checkpoint, history, and resolved run config") {
  testutil::TempDir tmp("clitrain");
  gen_dataset(tmp.path(), 2);
  const fs::path cfg = write_train_config(tmp.path());
  REQUIRE(cli::run(opts_for("train", cfg, tmp.path() / "run1", 3)) == 0);

  REQUIRE(fs::exists(tmp.path() / "run1" / "checkpoint.bin"));
  REQUIRE(fs::exists(tmp.path() / "run1" / "history.jsonl"));

  const std::string hist = testutil::slurp(tmp.path() / "run1" / "history.jsonl");
  std::vector<json> lines;
  std::size_t start = 0;
  while (start < hist.size()) {
    const std::size_t end = hist.find('\n', start);
    lines.push_back(json::parse(hist.substr(start, end - start)));
    start = end + 1;
  }
  REQUIRE(lines.size() == 3);
  REQUIRE(lines[0].at("epoch") == 0);
  REQUIRE(lines[0].at("beta").get<double>() == 1.0);
  for (const char* key : {"ce_c", "ce_f", "ia", "ba", "reg", "total", "val_metric"})
    REQUIRE(lines[0].contains(key));

  const json run = json::parse(testutil::slurp(tmp.path() / "run1" / "run.json"));
  REQUIRE(run.at("command") == "train");
  REQUIRE(run.at("seed") == 3);
  REQUIRE(run.at("train").at("epochs") == 3);
  REQUIRE(run.at("train").at("loss") == "dynamic");
  REQUIRE(run.at("model").at("type") == "hmil");

  const Checkpoint ck = load_checkpoint(tmp.path() / "run1" / "checkpoint.bin");
  REQUIRE(ck.kind == Checkpoint::kHmil);
  REQUIRE(ck.hmil.cfg.d_c == 8);
  REQUIRE(ck.hmil.cfg.K_c == 2);
  REQUIRE(ck.hmil.cfg.K_f == 4);
}

TEST_CASE("flat baselines log a plain cross-entropy history") {
  testutil::TempDir tmp("cliflat");
  gen_dataset(tmp.path(), 4);
  const fs::path cfg = write_train_config(tmp.path());
  cli::RunOptions o = opts_for("train", cfg, tmp.path() / "runab", 4);
  o.model = "abmil";
  REQUIRE(cli::run(o) == 0);

  const std::string hist = testutil::slurp(tmp.path() / "runab" / "history.jsonl");
  const json first = json::parse(hist.substr(0, hist.find('\n')));
  REQUIRE(first.contains("ce"));
  REQUIRE(first.contains("total"));
  for (const char* key : {"ce_c", "ia", "ba", "reg"}) REQUIRE_FALSE(first.contains(key));

  const Checkpoint ck = load_checkpoint(tmp.path() / "runab" / "checkpoint.bin");
  REQUIRE(ck.kind == Checkpoint::kFlat);
  REQUIRE(ck.flat.cfg.variant == FlatVariant::abmil);
  REQUIRE(ck.flat.cfg.K == 4);
}

TEST_CASE("train reruns are byte-identical") {
  testutil::TempDir tmp("clidet");
  gen_dataset(tmp.path(), 5);
  const fs::path cfg = write_train_config(tmp.path());
  REQUIRE(cli::run(opts_for("train", cfg, tmp.path() / "a", 6)) == 0);
  REQUIRE(cli::run(opts_for("train", cfg, tmp.path() / "b", 6)) == 0);
  REQUIRE(testutil::same_bytes(tmp.path() / "a" / "history.jsonl",
                               tmp.path() / "b" / "history.jsonl"));
  REQUIRE(testutil::same_bytes(tmp.path() / "a" / "checkpoint.bin",
                               tmp.path() / "b" / "checkpoint.bin"));

  REQUIRE(cli::run(opts_for("train", cfg, tmp.path() / "c", 7)) == 0);
  REQUIRE_FALSE(testutil::same_bytes(tmp.path() / "a" / "checkpoint.bin",
                                     tmp.path() / "c" / "checkpoint.bin"));
}

TEST_CASE("kfold flag re-splits the dataset") {
  testutil::TempDir tmp("clikf");
  gen_dataset(tmp.path(), 8);
  const fs::path cfg = write_train_config(tmp.path());
  cli::RunOptions o = opts_for("train", cfg, tmp.path() / "kf", 8);
  o.kfold = "4:0";
  REQUIRE(cli::run(o) == 0);
  const json run = json::parse(testutil::slurp(tmp.path() / "kf" / "run.json"));
  REQUIRE(run.at("split").at("scheme") == "kfold");
  REQUIRE(run.at("split").at("k") == 4);
  REQUIRE(run.at("split").at("fold") == 0);

  REQUIRE_THROWS_AS(cli::detail::parse_kfold_arg("banana"), ConfigError);
  REQUIRE_THROWS_AS(cli::detail::parse_kfold_arg("5"), ConfigError);
}

TEST_CASE("checkpoints round-trip and reject corruption") {
  testutil::TempDir tmp("ckpt");
  HmilConfig mc;
  mc.d_c = 8;
  mc.K_c = 2;
  mc.K_f = 4;
  mc.seed = 11;
  HmilModel m = init_model(mc);
  m.head_b_f.at(2, 0) = -0.75;
  const fs::path hp = tmp.path() / "h.bin";
  save_checkpoint(hp, m);
  Checkpoint hk = load_checkpoint(hp);
  REQUIRE(hk.kind == Checkpoint::kHmil);
  REQUIRE(hk.hmil.cfg.d_f == m.cfg.d_f);
  REQUIRE(hk.hmil.cfg.seed == 11);
  auto pa = m.params();
  auto pb = hk.hmil.params();
  for (std::size_t k = 0; k < pa.size(); ++k) {
    REQUIRE(pa[k].first == pb[k].first);
    for (std::size_t i = 0; i < pa[k].second->size(); ++i)
      REQUIRE((*pa[k].second)[i] == (*pb[k].second)[i]);
  }

  FlatConfig fc;
  fc.variant = FlatVariant::max;
  fc.d = 5;
  fc.K = 3;
  fc.label_level = LabelLevel::coarse;
  FlatModel fm = init_flat(fc);
  const fs::path fp = tmp.path() / "f.bin";
  save_checkpoint(fp, fm);
  const Checkpoint fk = load_checkpoint(fp);
  REQUIRE(fk.kind == Checkpoint::kFlat);
  REQUIRE(fk.flat.cfg.variant == FlatVariant::max);
  REQUIRE(fk.flat.cfg.label_level == LabelLevel::coarse);
  for (std::size_t i = 0; i < fm.head_w.size(); ++i)
    REQUIRE(fk.flat.head_w[i] == fm.head_w[i]);

  const std::string good = testutil::slurp(hp);
  auto corrupted = [&](std::size_t at, char val) {
    std::string bad = good;
    bad[at] = val;
    const fs::path p = tmp.path() / "bad.bin";
    testutil::spit(p, bad);
    return p;
  };
  REQUIRE_THROWS_WITH(load_checkpoint(corrupted(0, 'X')),
                      ContainsSubstring("bad magic at byte 0"));
  REQUIRE_THROWS_WITH(load_checkpoint(corrupted(4, 2)),
                      ContainsSubstring("unsupported checkpoint version 2"));
  REQUIRE_THROWS_WITH(load_checkpoint(corrupted(8, 9)),
                      ContainsSubstring("unknown model kind 9"));
  const fs::path cut = tmp.path() / "cut.bin";
  testutil::spit(cut, good.substr(0, 40));
  REQUIRE_THROWS_WITH(load_checkpoint(cut), ContainsSubstring("truncated"));
  REQUIRE_THROWS_AS(load_checkpoint(tmp.path() / "absent.bin"), IoError);
}

TEST_CASE("eval reports test-set metrics with optional bootstrap") {
  testutil::TempDir tmp("clieval");
  const fs::path manifest = gen_dataset(tmp.path(), 9);
  const fs::path tcfg = write_train_config(tmp.path());
  REQUIRE(cli::run(opts_for("train", tcfg, tmp.path() / "run1", 9)) == 0);

  json e;
  e["checkpoint"] = "run1/checkpoint.bin";
  e["dataset"] = "ds/manifest.json";
  const fs::path ecfg = write_json(tmp.path() / "eval.json", e);

  cli::RunOptions o = opts_for("eval", ecfg, tmp.path() / "ev1", 5);
  o.bootstrap = 50;
  REQUIRE(cli::run(o) == 0);

  const std::size_t n_test = load_dataset(manifest).split_indices(Split::test).size();
  const json rep = json::parse(testutil::slurp(tmp.path() / "ev1" / "report.json"));
  REQUIRE(rep.at("model") == "hmil");
  REQUIRE(rep.at("n") == n_test);
  REQUIRE(rep.contains("hierarchy_consistency"));
  REQUIRE(rep.at("fine").at("n") == n_test);
  const json boot = rep.at("fine").at("bootstrap");
  for (const char* key : {"accuracy", "macro_auc"}) {
    REQUIRE(boot.contains(key));
    const double lo = boot.at(key).at("ci_lo").get<double>();
    const double hi = boot.at(key).at("ci_hi").get<double>();
    const double mean = boot.at(key).at("mean").get<double>();
    REQUIRE(lo <= mean);
    REQUIRE(mean <= hi);
  }

  const std::string csv = testutil::slurp(tmp.path() / "ev1" / "per_class.csv");
  REQUIRE(csv.rfind("level,class,sensitivity,specificity,f1,auc\n", 0) == 0);
  REQUIRE(std::count(csv.begin(), csv.end(), '\n') == 7);  // header + 4 fine + 2 coarse
  REQUIRE(csv.find("fine,normal,") != std::string::npos);
  REQUIRE(csv.find("coarse,malignant,") != std::string::npos);

  cli::RunOptions noboot = opts_for("eval", ecfg, tmp.path() / "ev0", 5);
  noboot.bootstrap = 0;
  REQUIRE(cli::run(noboot) == 0);
  const json rep0 = json::parse(testutil::slurp(tmp.path() / "ev0" / "report.json"));
  REQUIRE_FALSE(rep0.at("fine").contains("bootstrap"));
  REQUIRE_FALSE(rep0.at("coarse").contains("bootstrap"));

  cli::RunOptions again = opts_for("eval", ecfg, tmp.path() / "ev2", 5);
  again.bootstrap = 50;
  REQUIRE(cli::run(again) == 0);
  REQUIRE(testutil::same_bytes(tmp.path() / "ev1" / "report.json",
                               tmp.path() / "ev2" / "report.json"));
  REQUIRE(testutil::same_bytes(tmp.path() / "ev1" / "per_class.csv",
                               tmp.path() / "ev2" / "per_class.csv"));

  cli::RunOptions negative = opts_for("eval", ecfg, tmp.path() / "evneg", 5);
  negative.bootstrap = -5;
  REQUIRE_THROWS_WITH(cli::run(negative), ContainsSubstring("cannot be negative"));
}

TEST_CASE("eval rejects a checkpoint trained at another width") {
  testutil::TempDir tmp("clibadw");
  gen_dataset(tmp.path(), 10);
  const fs::path tcfg = write_train_config(tmp.path());
  REQUIRE(cli::run(opts_for("train", tcfg, tmp.path() / "run1", 10)) == 0);

  json wide = gen_config_json();
  wide["synthetic"]["d_c"] = 7;
  write_json(tmp.path() / "gen7.json", wide);
  REQUIRE(cli::run(opts_for("gen", tmp.path() / "gen7.json", tmp.path() / "ds7", 10)) == 0);

  json e;
  e["checkpoint"] = "run1/checkpoint.bin";
  e["dataset"] = "ds7/manifest.json";
  const fs::path ecfg = write_json(tmp.path() / "eval7.json", e);
  REQUIRE_THROWS_AS(cli::run(opts_for("eval", ecfg, tmp.path() / "ev", 1)),
                    IncompatibilityError);
}

TEST_CASE("gradcheck passes six components and honors the corruption hook") {
  testutil::TempDir tmp("cligc");
  json g;
  g["gradcheck"] = {{"d_c", 8}};
  const fs::path cfg = write_json(tmp.path() / "gc.json", g);

  REQUIRE(cli::run(opts_for("gradcheck", cfg, tmp.path() / "gc1", 1)) == 0);
  const json res = json::parse(testutil::slurp(tmp.path() / "gc1" / "gradcheck.json"));
  const auto& rows = res.at("components");
  REQUIRE(rows.size() == 6);
  const char* names[] = {"ce_c", "ce_f", "ia", "ba", "reg", "combined"};
  for (std::size_t i = 0; i < 6; ++i) {
    REQUIRE(rows[i].at("component") == names[i]);
    REQUIRE(rows[i].at("pass") == true);
    REQUIRE(rows[i].at("max_rel_err").get<double>() <= 1e-4);
  }
  REQUIRE(res.at("worst").get<double>() <= 1e-4);

  cli::RunOptions bad = opts_for("gradcheck", cfg, tmp.path() / "gc2", 1);
  bad.corrupt_tanh = true;
  REQUIRE_THROWS_AS(cli::run(bad), ThresholdBreach);
  ad::testing::corrupt_tanh_backward = false;

  json too_wide;
  too_wide["gradcheck"] = {{"d_c", 64}};
  write_json(tmp.path() / "wide.json", too_wide);
  REQUIRE_THROWS_WITH(
      cli::run(opts_for("gradcheck", tmp.path() / "wide.json", tmp.path() / "gc3", 1)),
      ContainsSubstring("d_c <= 32"));
}

TEST_CASE("compare sweeps variants deterministically") {
  testutil::TempDir tmp("clicmp");
  json c;
  c["synthetic"] = {{"d_c", 8},
                    {"bags_per_fine_class", 4},
                    {"instances_min", 3},
                    {"instances_max", 5},
                    {"witness_rate", 0.5}};
  c["split"] = {{"scheme", "ratio"}, {"train", 0.5}, {"val", 0.25}, {"test", 0.25}};
  c["train"] = {{"epochs", 2}, {"batch_size", 8}};
  c["compare"] = {{"seeds", {1}},
                  {"variants",
                   {{{"name", "tau_1"}, {"tau", 1.0}},
                    {{"name", "tau_0.1"}, {"tau", 0.1}},
                    {{"name", "tau_0.01"}, {"tau", 0.01}}}}};
  const fs::path cfg = write_json(tmp.path() / "cmp.json", c);

  REQUIRE(cli::run(opts_for("compare", cfg, tmp.path() / "c1", 1)) == 0);
  const std::string csv = testutil::slurp(tmp.path() / "c1" / "compare.csv");
  REQUIRE(csv.rfind("variant,seed,fine_auc,coarse_auc,consistency\n", 0) == 0);
  REQUIRE(csv.find("\ntau_1,1,") != std::string::npos);
  REQUIRE(csv.find("\ntau_0.1,1,") != std::string::npos);
  REQUIRE(csv.find("\ntau_0.01,1,") != std::string::npos);

  const json table = json::parse(testutil::slurp(tmp.path() / "c1" / "compare.json"));
  REQUIRE(table.size() == 3);
  REQUIRE(table[0].at("variant") == "tau_1");
  REQUIRE(table[0].at("fine_auc").contains("mean"));
  REQUIRE(table[0].at("consistency").contains("mean"));

  REQUIRE(cli::run(opts_for("compare", cfg, tmp.path() / "c2", 1)) == 0);
  REQUIRE(testutil::same_bytes(tmp.path() / "c1" / "compare.csv",
                               tmp.path() / "c2" / "compare.csv"));
  REQUIRE(testutil::same_bytes(tmp.path() / "c1" / "compare.json",
                               tmp.path() / "c2" / "compare.json"));

  cli::RunOptions flat = opts_for("compare", cfg, tmp.path() / "c3", 1);
  flat.model = "mean";
  REQUIRE(cli::run(flat) == 0);
  const std::string fcsv = testutil::slurp(tmp.path() / "c3" / "compare.csv");
  REQUIRE(std::count(fcsv.begin(), fcsv.end(), '\n') == 2);  // header + one row
  REQUIRE(fcsv.find("\nmean,1,") != std::string::npos);
  REQUIRE(fcsv.substr(fcsv.size() - 2) == ",\n");  // flat rows leave coarse cells empty
}

TEST_CASE("config validation points at the missing piece") {
  testutil::TempDir tmp("clicfg");
  const fs::path empty_cfg = write_json(tmp.path() / "empty.json", json::object());
  REQUIRE_THROWS_WITH(cli::run(opts_for("train", empty_cfg, tmp.path() / "o1", 1)),
                      ContainsSubstring("dataset"));
  REQUIRE_THROWS_WITH(cli::run(opts_for("eval", empty_cfg, tmp.path() / "o2", 1)),
                      ContainsSubstring("checkpoint"));

  cli::RunOptions nocmd;
  nocmd.command = "frobnicate";
  REQUIRE_THROWS_WITH(cli::run(nocmd), ContainsSubstring("frobnicate"));

  testutil::spit(tmp.path() / "broken.json", "{not json");
  cli::RunOptions broken = opts_for("gen", tmp.path() / "broken.json", tmp.path() / "o3", 1);
  REQUIRE_THROWS_AS(cli::run(broken), FormatError);

  cli::RunOptions missing = opts_for("gen", tmp.path() / "absent.json", tmp.path() / "o4", 1);
  REQUIRE_THROWS_AS(cli::run(missing), IoError);
}

TEST_CASE("the binary maps error classes to exit codes") {
  testutil::TempDir tmp("cliexit");
  const fs::path gcfg = write_json(tmp.path() / "gen.json", gen_config_json());
  const fs::path out = tmp.path() / "ds";

  REQUIRE(run_cli("gen -c " + gcfg.string() + " -o " + out.string() + " --seed 1") == 0);
  REQUIRE(run_cli("gen -c " + gcfg.string() + " -o " + out.string() + " --seed 1") == 1);

  json g;
  g["gradcheck"] = {{"d_c", 8}};
  const fs::path gc = write_json(tmp.path() / "gc.json", g);
  REQUIRE(run_cli("gradcheck -c " + gc.string() + " -o " + (tmp.path() / "gc").string() +
                  " --corrupt-tanh") == 3);

  json t;
  t["dataset"] = "ds/manifest.json";
  t["train"] = {{"epochs", 1}, {"batch_size", 8}, {"lr", 1e200}};
  const fs::path blow = write_json(tmp.path() / "blow.json", t);
  REQUIRE(run_cli("train -c " + blow.string() + " -o " + (tmp.path() / "blow").string()) == 2);

  REQUIRE(run_cli("--help") == 0);
  REQUIRE(run_cli("definitely-not-a-command") != 0);
}
