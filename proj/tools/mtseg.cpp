// mtseg: synthesize a ring dataset, train the multi-task segmentation +
// area-regression network or its single-task baseline, score held-out
// volumes, and emit the statistics tables.

#include <CLI11.hpp>

#include <iostream>

#include "mtseg/pipeline.hpp"

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-task myocardium segmentation and area regression"};
  app.require_subcommand(1);

  std::string config_path, data_dir, out_dir, checkpoints_dir, scores_dir;
  bool force = false, baseline = false, resume = false;
  int jobs_override = 0;
  std::uint64_t report_seed = 1;
  int report_resamples = 1000;
  double report_confidence = 0.99;

  CLI::App* synth = app.add_subcommand("synth-data", "generate a synthetic annulus dataset");
  synth->add_option("--config", config_path, "run config JSON")->required();
  synth->add_option("--out", out_dir, "output dataset directory")->required();
  synth->add_flag("--force", force, "overwrite a non-empty output directory");

  CLI::App* train = app.add_subcommand("train", "train across the configured folds");
  train->add_option("--config", config_path, "run config JSON")->required();
  train->add_option("--data", data_dir, "dataset directory (from synth-data)")->required();
  train->add_option("--out", out_dir, "checkpoint/log output directory")->required();
  train->add_flag("--baseline", baseline, "train the single-task baseline (no regression head)");
  train->add_flag("--resume", resume, "resume each fold from its last checkpoint");
  train->add_option("--jobs", jobs_override, "parallel fold workers (overrides config)");
  std::string select_on;
  train->add_option("--select-on", select_on, "checkpoint selection split: test (default) or train")
      ->check(CLI::IsMember({"test", "train"}));

  CLI::App* evaluate = app.add_subcommand("evaluate", "score held-out volumes with trained checkpoints");
  evaluate->add_option("--checkpoints", checkpoints_dir, "directory holding mtn and unet checkpoints")->required();
  evaluate->add_option("--data", data_dir, "dataset directory")->required();
  evaluate->add_option("--out", out_dir, "score CSV output directory")->required();

  CLI::App* report = app.add_subcommand("report", "statistics tables from evaluation CSVs");
  report->add_option("--scores", scores_dir, "directory with seg_scores_*.csv and areas.csv")->required();
  report->add_option("--out", out_dir, "table output directory")->required();
  report->add_option("--seed", report_seed, "bootstrap seed");
  report->add_option("--resamples", report_resamples, "bootstrap resample count");
  report->add_option("--confidence", report_confidence, "bootstrap confidence level");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (synth->parsed()) {
      mtseg::RunConfig cfg = mtseg::RunConfig::load_file(config_path);
      mtseg::run_synth(cfg, out_dir, force, std::cout);
    } else if (train->parsed()) {
      mtseg::RunConfig cfg = mtseg::RunConfig::load_file(config_path);
      if (jobs_override > 0) cfg.jobs = jobs_override;
      if (!select_on.empty()) cfg.train.select_on_train = (select_on == "train");
      mtseg::run_train(cfg, data_dir, out_dir, baseline, resume, std::cout);
    } else if (evaluate->parsed()) {
      mtseg::run_evaluate(checkpoints_dir, data_dir, out_dir, std::cout);
    } else if (report->parsed()) {
      mtseg::ReportOptions opts;
      opts.seed = report_seed;
      opts.n_resamples = report_resamples;
      opts.confidence = report_confidence;
      mtseg::run_report(scores_dir, out_dir, opts, std::cout);
    }
  } catch (const mtseg::UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
