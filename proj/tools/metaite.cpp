#include "metaite/cli/commands.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
  using namespace metaite::cli;
  CLI::App app{"metaite: meta-learned treatment-effect estimation workbench"};
  app.require_subcommand(1);
  app.set_version_flag("--version", METAITE_VERSION);

  CommandOptions options;
  std::uint64_t seed = 0;
  std::string out_dir;
  int jobs = 1;
  std::string mode;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", options.config_path, "JSON run configuration")->required();
    sub->add_option("--seed", seed, "Top-level seed (overrides the config)");
    sub->add_option("--out-dir", out_dir, "Output directory (overrides the config)");
    sub->add_option("--jobs", jobs, "Parallel sweep workers")->check(CLI::PositiveNumber);
  };

  const char* names[] = {"gen-data", "train", "estimate", "evaluate", "sweep"};
  const char* help[] = {"Generate a benchmark dataset and its train/test split",
                        "Meta-train on the training CSV and write a checkpoint and trace",
                        "Predict every potential outcome for the test CSV",
                        "Score predictions against the test potential outcomes",
                        "Run a robustness, ablation or repeat sweep"};
  std::vector<CLI::App*> subs;
  for (int i = 0; i < 5; ++i) {
    CLI::App* sub = app.add_subcommand(names[i], help[i]);
    add_common(sub);
    subs.push_back(sub);
  }
  subs[4]->add_option("--mode", mode, "robustness | ablation | repeat")
      ->check(CLI::IsMember({"robustness", "ablation", "repeat"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  std::string command;
  for (int i = 0; i < 5; ++i)
    if (subs[static_cast<std::size_t>(i)]->parsed()) {
      command = names[i];
      CLI::App* sub = subs[static_cast<std::size_t>(i)];
      if (sub->count("--seed")) options.seed = seed;
      if (sub->count("--out-dir")) options.out_dir = out_dir;
      if (sub->count("--jobs")) options.jobs = jobs;
      if (i == 4 && sub->count("--mode")) options.mode = mode;
    }
  return run_command(command, options, std::cout, std::cerr);
}
