#include <cstdint>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "pltnet/experiment.hpp"

namespace {

struct CliArgs {
  std::string config_path;
  std::string out_dir;
  std::string preset = "desk";
  uint64_t seed = 0;
  int folds = 0;
  bool confirm_large = false;
};

void add_common(CLI::App* cmd, CliArgs& args) {
  cmd->add_option("--config", args.config_path, "Config file (sectioned key = value text)");
  cmd->add_option("--out", args.out_dir, "Output directory (default: out)");
  cmd->add_option("--preset", args.preset, "Scale preset: desk or paper")
      ->check(CLI::IsMember({"desk", "paper"}));
  cmd->add_option("--seed", args.seed, "Master seed for cohort and training");
  cmd->add_option("--folds", args.folds, "Cross-validation fold count");
  cmd->add_flag("--confirm-large", args.confirm_large,
                "Acknowledge the runtime cost of the paper preset");
}

bool passed(const CLI::App* sub, const char* name) {
  const CLI::Option* opt = sub->get_option_no_throw(name);
  return opt != nullptr && opt->count() > 0;
}

// 0 on success; 1 when flags or the config file are invalid.
int build_config(const CliArgs& args, const CLI::App* sub, pltnet::ExperimentConfig& cfg) {
  if (args.preset == "paper" && !args.confirm_large) {
    std::cerr << "error: the paper preset trains full-size models; pass --confirm-large to "
                 "proceed\n";
    return 1;
  }
  cfg = args.preset == "paper" ? pltnet::ExperimentConfig::paper()
                               : pltnet::ExperimentConfig::desk();
  try {
    if (!args.config_path.empty()) cfg = pltnet::load_config_file(args.config_path, cfg);
    if (passed(sub, "--out")) cfg.output_dir = args.out_dir;
    if (passed(sub, "--seed")) {
      cfg.cohort.seed = args.seed;
      cfg.train.seed = args.seed;
    }
    if (passed(sub, "--folds")) cfg.k_folds = args.folds;
    cfg.apply_modality();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-channel tumor-response experiment driver"};
  app.require_subcommand(1);

  CliArgs args;
  CLI::App* gen = app.add_subcommand("gen-data", "Generate and persist a synthetic cohort");
  add_common(gen, args);
  CLI::App* train =
      app.add_subcommand("train", "Cross-validate one model on the generated cohort");
  add_common(train, args);
  CLI::App* ablate =
      app.add_subcommand("ablate", "Run the 8-cell backbone/SE/SPP matrix into table2.csv");
  add_common(ablate, args);
  CLI::App* modality =
      app.add_subcommand("modality", "Compare CT-only vs two-channel runs into table3.csv");
  add_common(modality, args);
  app.add_subcommand("gradcheck", "Finite-difference audit of every differentiable piece");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  const CLI::App* sub = app.get_subcommands().front();
  if (sub->get_name() == "gradcheck") return pltnet::run_gradcheck(std::cout);

  pltnet::ExperimentConfig cfg;
  if (int rc = build_config(args, sub, cfg); rc != 0) return rc;

  if (sub->get_name() == "gen-data") return pltnet::run_gen_data(cfg, std::cout);
  if (sub->get_name() == "train") return pltnet::run_train(cfg, std::cout);
  if (sub->get_name() == "ablate") return pltnet::run_ablate(cfg, std::cout);
  return pltnet::run_modality(cfg, std::cout);
}
