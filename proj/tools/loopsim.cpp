// Batch front end: configure, run, verify, and sweep retraining experiments.
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "loopsim/experiment.hpp"

namespace {

struct CommonArgs {
  std::string config;
  std::string out = "out";
  std::optional<std::uint64_t> seed;
  int jobs = 1;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool config_required) {
  auto* copt = cmd->add_option("--config", args.config, "experiment config file")
                   ->envname("LOOPSIM_CONFIG");
  if (config_required) copt->required();
  cmd->add_option("--out", args.out, "output directory")->envname("LOOPSIM_OUT");
  cmd->add_option("--seed", args.seed, "override the experiment seed")
      ->envname("LOOPSIM_SEED");
  cmd->add_option("--jobs", args.jobs, "worker threads for sweeps")
      ->envname("LOOPSIM_JOBS")
      ->check(CLI::PositiveNumber);
}

int report(const loopsim::RunResult& result, const std::string& out) {
  for (const auto& rep : result.summary.at("verifiers")) {
    std::cout << (rep.at("passed").get<bool>() ? "[PASS] " : "[FAIL] ")
              << rep.at("name").get<std::string>()
              << "  (checks=" << rep.at("checks").get<std::size_t>()
              << ", worst margin=" << rep.at("worst_margin").get<double>()
              << ")\n";
  }
  std::cout << (result.failed_verifiers == 0 ? "OK" : "FAILED") << ": "
            << result.failed_verifiers << " failed verifier(s); artifacts in "
            << out << "\n";
  return result.failed_verifiers == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"simulator for self-consuming generative-model loops "
               "with curated synthetic data"};
  app.require_subcommand(1);

  CommonArgs run_args, sweep_args, verify_args;
  CLI::App* run = app.add_subcommand("run", "run one experiment config");
  add_common(run, run_args, true);
  CLI::App* sweep = app.add_subcommand("sweep", "run a parameter grid");
  add_common(sweep, sweep_args, true);
  CLI::App* verify = app.add_subcommand(
      "verify", "run the randomized property suite (kind verify-suite)");
  add_common(verify, verify_args, false);

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) {
      const auto cfg = loopsim::load_config(run_args.config);
      return report(loopsim::run_experiment(cfg, run_args.out, run_args.seed),
                    run_args.out);
    }
    if (sweep->parsed()) {
      const auto cfg = loopsim::load_config(sweep_args.config);
      if (cfg.value("kind", "") != "sweep") {
        throw loopsim::ConfigError("sweep expects a config with kind \"sweep\"");
      }
      return report(loopsim::run_sweep(cfg, sweep_args.out, sweep_args.seed,
                                       sweep_args.jobs),
                    sweep_args.out);
    }
    if (verify->parsed()) {
      nlohmann::json cfg;
      if (!verify_args.config.empty()) {
        cfg = loopsim::load_config(verify_args.config);
      } else {
        cfg = {{"kind", "verify-suite"}, {"instances", 1000}, {"seed", 0}};
      }
      return report(
          loopsim::run_experiment(cfg, verify_args.out, verify_args.seed),
          verify_args.out);
    }
  } catch (const loopsim::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
