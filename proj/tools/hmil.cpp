#include <cstdint>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "hmil/cli.hpp"
#include "hmil/error.hpp"

namespace {

void add_common(CLI::App* cmd, hmil::cli::RunOptions& opts) {
  cmd->add_option("-c,--config", opts.config_path, "JSON config file");
  cmd->add_option("--seed", opts.seed, "override the run seed");
  cmd->add_option("-o,--out", opts.out, "output directory");
  cmd->add_option("--model", opts.model, "model variant (hmil|mean|max|abmil)");
  cmd->add_option("--loss", opts.loss, "loss mode (dynamic|static:a,b|coarse_focus)");
  cmd->add_option("--tau", opts.tau, "contrastive temperature");
  cmd->add_option("--bootstrap", opts.bootstrap, "bootstrap replicate count (0 disables)");
  cmd->add_option("--kfold", opts.kfold, "k-fold split as k:fold");
  cmd->add_flag("--force", opts.force, "write into a non-empty output directory");
  cmd->add_flag("--corrupt-tanh", opts.corrupt_tanh)->group("");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hierarchical multi-instance learning toolkit"};
  app.require_subcommand(1);

  hmil::cli::RunOptions opts;
  for (const char* name : {"gen", "train", "eval", "gradcheck", "compare"}) {
    CLI::App* cmd = app.add_subcommand(name);
    add_common(cmd, opts);
    cmd->callback([&opts, name] { opts.command = name; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    return hmil::cli::run(opts);
  } catch (const hmil::ConfigError& e) {
    std::cerr << e.what() << "\n";
    return 1;
  } catch (const hmil::TaxonomyError& e) {
    std::cerr << e.what() << "\n";
    return 1;
  } catch (const hmil::FormatError& e) {
    std::cerr << e.what() << "\n";
    return 1;
  } catch (const hmil::IoError& e) {
    std::cerr << e.what() << "\n";
    return 1;
  } catch (const hmil::IncompatibilityError& e) {
    std::cerr << e.what() << "\n";
    return 1;
  } catch (const hmil::ThresholdBreach& e) {
    std::cerr << e.what() << "\n";
    return 3;
  } catch (const hmil::Error& e) {
    std::cerr << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
