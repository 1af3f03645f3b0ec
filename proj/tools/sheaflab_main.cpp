// Command-line workbench: train the toy transformer, discover sheaves with
// optional overlap repulsion, analyze overlap structure, and run the
// existence-bound verifiers.

#include <CLI11.hpp>

#include "sheaflab/cli.hpp"

using namespace sheaflab;

int main(int argc, char** argv) {
  CLI::App app{"sheaflab: circuit/sheaf discovery workbench"};
  app.require_subcommand(1);

  std::string config_file;
  std::string out_override;
  std::uint64_t seed_override = 0;
  int jobs = 1;
  app.add_option("--config", config_file, "experiment config JSON (see `defaults`)")
      ->check(CLI::ExistingFile);
  app.add_option("--out", out_override, "output directory (overrides config)");
  auto* seed_opt = app.add_option("--seed", seed_override, "global seed (overrides config)");
  app.add_option("--jobs", jobs, "worker parallelism for multi-run commands")
      ->check(CLI::PositiveNumber);

  app.add_subcommand("defaults", "print the full default configuration")->fallthrough();

  auto* train_cmd = app.add_subcommand("train", "train the base model and write a checkpoint");
  train_cmd->fallthrough();

  auto* discover_cmd =
      app.add_subcommand("discover", "discover sheaves on a trained checkpoint");
  discover_cmd->fallthrough();
  std::string model_dir = "out";
  int runs = 1;
  std::string oasr = "on";
  std::string exclude_file;
  discover_cmd->add_option("--model", model_dir, "checkpoint directory (from `train`)");
  discover_cmd->add_option("--runs", runs, "number of discovery runs")->check(CLI::PositiveNumber);
  discover_cmd->add_option("--oasr", oasr, "on|off: chain runs with overlap repulsion")
      ->check(CLI::IsMember({"on", "off"}));
  discover_cmd->add_option("--exclude", exclude_file,
                           "edge-set JSON of edges to prohibit during discovery")
      ->check(CLI::ExistingFile);

  auto* analyze_cmd = app.add_subcommand("analyze", "overlap analysis over sheaf records");
  analyze_cmd->fallthrough();
  std::vector<std::string> sheaf_files;
  std::string analyze_model;
  bool core_search = false, ablate = false;
  analyze_cmd->add_option("sheaves", sheaf_files, "sheaf record JSON files")
      ->required()
      ->check(CLI::ExistingFile);
  analyze_cmd->add_flag("--core-search", core_search,
                        "exhaustively search the intersection core for a minimal subset");
  analyze_cmd->add_flag("--ablate", ablate, "emit the core-ablation accuracy table");
  analyze_cmd->add_option("--model", analyze_model,
                          "checkpoint directory (needed by --core-search/--ablate)");

  auto* theory_cmd = app.add_subcommand("theory", "existence-bound verifiers");
  theory_cmd->fallthrough();
  std::string mode = "collision";
  std::string theory_model;
  bool synthetic = false;
  theory_cmd->add_option("--mode", mode, "collision|low-iou|margin|residual")
      ->check(CLI::IsMember({"collision", "low-iou", "margin", "residual"}));
  theory_cmd->add_option("--model", theory_model, "checkpoint directory");
  theory_cmd->add_flag("--synthetic", synthetic, "use a synthetic signature instance");

  CLI11_PARSE(app, argc, argv);

  return run_guarded(
      [&]() -> int {
        ExperimentConfig c;
        if (!config_file.empty())
          c = experiment_from_json(Json::parse(read_file(config_file)));
        if (!out_override.empty()) c.out_dir = out_override;
        if (seed_opt->count() > 0) c.seed = seed_override;
        c.jobs = jobs;
        if (app.got_subcommand("defaults")) return cmd_defaults(std::cout);
        if (app.got_subcommand(train_cmd)) return cmd_train(c, std::cout);
        if (app.got_subcommand(discover_cmd))
          return cmd_discover(c, model_dir, runs, oasr == "on",
                              exclude_file.empty() ? fs::path{} : fs::path(exclude_file),
                              std::cout);
        if (app.got_subcommand(analyze_cmd)) {
          std::vector<fs::path> files(sheaf_files.begin(), sheaf_files.end());
          return cmd_analyze(files, effective_out_dir(c), core_search, ablate,
                             analyze_model.empty() ? fs::path{} : fs::path(analyze_model), c,
                             std::cout);
        }
        if (app.got_subcommand(theory_cmd))
          return cmd_theory(c, theory_model.empty() ? fs::path{} : fs::path(theory_model), mode,
                            synthetic, std::cout);
        return kExitContract;
      },
      std::cerr);
}
