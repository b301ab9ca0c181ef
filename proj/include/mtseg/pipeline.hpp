#ifndef MTSEG_PIPELINE_HPP
#define MTSEG_PIPELINE_HPP

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "mtseg/data.hpp"
#include "mtseg/trainer.hpp"

namespace mtseg {

/// Bad invocation or bad configuration; the CLI maps this to exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// One JSON document drives every command. Unknown keys are rejected and the
/// fully-resolved config (defaults materialized) is persisted next to each
/// command's outputs, so any run can be reproduced from its output directory.
struct RunConfig {
  std::uint64_t seed = 1;
  int jobs = 1;
  LossForm loss_form = LossForm::precision;
  std::string precision = "f64";  // training storage: "f32" or "f64"
  NetConfig net{.input_size = 64, .depth = 3, .base_channels = 8, .seed = 0};
  PreprocessConfig preprocess{.target_spacing_mm = 1.0, .size = 64};
  TrainConfig train;  // net/preprocess/loss_form/seed mirrored in resolve()
  SyntheticRingSpec synth;
  int synth_patients = 10;
  int synth_phases = 5;
  int synth_slices = 5;

  static RunConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;

  /// Reads a config file, applies the MTL_SEED override when set, resolves
  /// cross-references (net seed, train sub-config), validates.
  static RunConfig load_file(const std::filesystem::path& path);
  void resolve();
  void save_file(const std::filesystem::path& path) const;
};

struct SynthSummary {
  int patients = 0;
  int phases = 0;
  int slices_per_volume = 0;
  std::size_t total_slices = 0;
  double mean_area_mm2 = 0.0;
};

SynthSummary run_synth(const RunConfig& cfg, const std::filesystem::path& out_dir, bool force, std::ostream& log);

void run_train(const RunConfig& cfg, const std::filesystem::path& data_dir, const std::filesystem::path& out_dir,
               bool baseline, bool resume, std::ostream& log);

struct EvaluateSummary {
  std::size_t volumes = 0;
  std::size_t area_rows = 0;
};

EvaluateSummary run_evaluate(const std::filesystem::path& checkpoints_dir, const std::filesystem::path& data_dir,
                             const std::filesystem::path& out_dir, std::ostream& log);

struct ReportOptions {
  std::uint64_t seed = 1;
  int n_resamples = 1000;
  double confidence = 0.99;
};

void run_report(const std::filesystem::path& scores_dir, const std::filesystem::path& out_dir,
                const ReportOptions& opts, std::ostream& log);

}  // namespace mtseg

#endif  // MTSEG_PIPELINE_HPP
