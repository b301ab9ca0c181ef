#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>

#include "mtseg/pipeline.hpp"
#include "mtseg/stats.hpp"

using namespace mtseg;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is);
  return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

nlohmann::json micro_config_json() {
  return nlohmann::json{
      {"seed", 7117},
      {"net", {{"input_size", 16}, {"depth", 2}, {"base_channels", 3}}},
      {"preprocess", {{"target_spacing_mm", 1.0}, {"size", 16}}},
      {"train", {{"epochs", 30}, {"batch_size", 4}, {"folds", std::vector<int>{0, 1}}}},
      {"synth",
       {{"image_size", 16},
        {"patients", 6},
        {"phases", 2},
        {"slices", 5},
        {"center_jitter_px", 1.0},
        {"inner_radius_px", {2.0, 2.5}},
        {"outer_radius_px", {4.5, 5.5}},
        {"noise_std", 0.04}}},
  };
}

// one micro end-to-end workspace shared by the pipeline cases
struct Workspace {
  fs::path root = fs::temp_directory_path() / "mtseg_pipeline_ws";
  RunConfig cfg;

  Workspace() {
    fs::remove_all(root);
    fs::create_directories(root);
    cfg = RunConfig::from_json(micro_config_json());
    std::ofstream devnull;
    run_synth(cfg, root / "data", false, devnull);
    run_train(cfg, root / "data", root / "ckpt", false, false, devnull);
    run_train(cfg, root / "data", root / "ckpt", true, false, devnull);
    run_evaluate(root / "ckpt", root / "data", root / "scores", devnull);
    run_report(root / "scores", root / "tables", ReportOptions{.seed = 5, .n_resamples = 200}, devnull);
  }
};

Workspace& workspace() {
  static Workspace ws;
  return ws;
}

std::vector<std::vector<std::string>> read_rows(const fs::path& p) {
  std::ifstream is(p);
  REQUIRE(is);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(is, line)) {
    std::vector<std::string> row;
    std::string cur;
    for (char c : line) {
      if (c == ',') {
        row.push_back(cur);
        cur.clear();
      } else {
        cur += c;
      }
    }
    row.push_back(cur);
    rows.push_back(row);
  }
  return rows;
}

}  // namespace

TEST_CASE("config: unknown keys are rejected, defaults materialize") {
  nlohmann::json j = micro_config_json();
  j["banana"] = 1;
  CHECK_THROWS_AS(RunConfig::from_json(j), UsageError);
  j.erase("banana");
  j["train"]["bananas"] = 2;
  CHECK_THROWS_AS(RunConfig::from_json(j), UsageError);

  RunConfig cfg = RunConfig::from_json(nlohmann::json::object());
  nlohmann::json full = cfg.to_json();
  for (const char* key : {"seed", "jobs", "loss", "net", "preprocess", "train", "synth"}) CHECK(full.contains(key));
  CHECK(full["train"]["epochs"] == 50);
  CHECK(full["train"]["lr0"] == 1e-3);
  CHECK(full["train"]["decay"] == 0.95);
  CHECK(full["loss"]["form"] == "precision");
  // round-trips through its own serialization
  RunConfig again = RunConfig::from_json(full);
  CHECK(again.to_json() == full);
}

TEST_CASE("config: loss form strings") {
  nlohmann::json j = micro_config_json();
  j["loss"] = {{"form", "paper_eq5"}};
  CHECK(RunConfig::from_json(j).loss_form == LossForm::likelihood);
  j["loss"] = {{"form", "precision"}};
  CHECK(RunConfig::from_json(j).loss_form == LossForm::precision);
  j["loss"] = {{"form", "other"}};
  CHECK_THROWS(RunConfig::from_json(j));
}

TEST_CASE("MTL_SEED overrides the config seed") {
  const fs::path p = fs::temp_directory_path() / "mtseg_seed_cfg.json";
  std::ofstream(p) << micro_config_json().dump();
  setenv("MTL_SEED", "424242", 1);
  RunConfig cfg = RunConfig::load_file(p);
  unsetenv("MTL_SEED");
  CHECK(cfg.seed == 424242);
  CHECK(cfg.train.seed == 424242);
  CHECK(RunConfig::load_file(p).seed == 7117);
  fs::remove(p);
}

TEST_CASE("synth: refuses a non-empty output directory without force; identical manifests per seed") {
  Workspace& ws = workspace();
  std::ofstream devnull;
  CHECK_THROWS_AS(run_synth(ws.cfg, ws.root / "data", false, devnull), UsageError);

  const fs::path again = ws.root / "data_again";
  SynthSummary s = run_synth(ws.cfg, again, false, devnull);
  CHECK(s.total_slices == static_cast<std::size_t>(6 * 2 * 5));
  CHECK(slurp(again / "manifest.json") == slurp(ws.root / "data" / "manifest.json"));
  // resolved config captures materialized defaults
  CHECK(fs::exists(again / "config.resolved.json"));
}

TEST_CASE("synth: invalid ring spec is a usage error") {
  RunConfig cfg = workspace().cfg;
  cfg.synth.inner_radius_min_px = 10.0;
  cfg.synth.inner_radius_max_px = 11.0;  // >= outer min
  std::ofstream devnull;
  CHECK_THROWS_AS(run_synth(cfg, fs::temp_directory_path() / "mtseg_bad_synth", true, devnull), UsageError);
}

TEST_CASE("train: missing dataset is a usage error") {
  std::ofstream devnull;
  CHECK_THROWS_AS(
      run_train(workspace().cfg, fs::temp_directory_path() / "does_not_exist", fs::temp_directory_path() / "x", false,
                false, devnull),
      UsageError);
}

TEST_CASE("evaluate: row counts, three estimate columns, each patient scored exactly once") {
  Workspace& ws = workspace();
  auto seg = read_rows(ws.root / "scores" / "seg_scores_mtn.csv");
  auto areas = read_rows(ws.root / "scores" / "areas.csv");
  // folds 0 and 1 of 6 patients test 2 + 1 patients; 2 phases each
  CHECK(seg.size() == 1 + 3 * 2);
  CHECK(areas.size() == 1 + 3 * 2 * 5);
  CHECK(areas[0] == std::vector<std::string>{"patient", "phase", "slice", "region", "area_true_mm2",
                                             "area_reg_mtn_mm2", "area_seg_mtn_mm2", "area_seg_unet_mm2"});
  auto seg_u = read_rows(ws.root / "scores" / "seg_scores_unet.csv");
  CHECK(seg_u.size() == seg.size());
  CHECK(seg_u[0] == std::vector<std::string>{"patient", "phase", "dice", "jaccard", "msd_mm", "hd_mm"});

  // the cross-fold aggregate scores every held-out (patient, phase) exactly once
  std::set<std::pair<std::string, std::string>> seen;
  for (std::size_t i = 1; i < seg.size(); ++i) CHECK(seen.insert({seg[i][0], seg[i][1]}).second);
  std::set<std::string> patients;
  for (std::size_t i = 1; i < seg.size(); ++i) patients.insert(seg[i][0]);
  CHECK(patients.size() == 3);
}

TEST_CASE("train with parallel fold workers reproduces the sequential bytes") {
  Workspace& ws = workspace();
  RunConfig cfg = ws.cfg;
  cfg.jobs = 2;
  std::ofstream devnull;
  run_train(cfg, ws.root / "data", ws.root / "ckpt_jobs2", false, false, devnull);
  for (const char* f : {"mtn_fold0_best.ckpt", "mtn_fold1_best.ckpt", "mtn_fold0.log.jsonl", "mtn_fold1.log.jsonl"})
    CHECK(slurp(ws.root / "ckpt_jobs2" / f) == slurp(ws.root / "ckpt" / f));
}

TEST_CASE("evaluate rejects checkpoint sets from incompatible runs") {
  Workspace& ws = workspace();
  RunConfig other = ws.cfg;
  other.seed = 999;
  other.resolve();
  other.train.folds = {0};
  std::ofstream devnull;
  run_train(other, ws.root / "data", ws.root / "ckpt_other", false, false, devnull);
  run_train(other, ws.root / "data", ws.root / "ckpt_other", true, false, devnull);

  const fs::path mixed = ws.root / "ckpt_mixed";
  fs::create_directories(mixed);
  fs::copy_file(ws.root / "ckpt" / "mtn_fold0_best.ckpt", mixed / "mtn_fold0_best.ckpt",
                fs::copy_options::overwrite_existing);
  fs::copy_file(ws.root / "ckpt_other" / "unet_fold0_best.ckpt", mixed / "unet_fold0_best.ckpt",
                fs::copy_options::overwrite_existing);
  CHECK_THROWS_AS(run_evaluate(mixed, ws.root / "data", ws.root / "scores_mixed", devnull), UsageError);
}

TEST_CASE("evaluate: missing baseline checkpoints is a usage error") {
  Workspace& ws = workspace();
  const fs::path only_mtn = ws.root / "ckpt_only_mtn";
  fs::create_directories(only_mtn);
  fs::copy_file(ws.root / "ckpt" / "mtn_fold0_best.ckpt", only_mtn / "mtn_fold0_best.ckpt",
                fs::copy_options::overwrite_existing);
  std::ofstream devnull;
  CHECK_THROWS_WITH_AS(run_evaluate(only_mtn, ws.root / "data", ws.root / "scores_tmp", devnull),
                       doctest::Contains("baseline"), UsageError);
}

TEST_CASE("report: CI bounds bracket means in every table1 row") {
  Workspace& ws = workspace();
  auto t1 = read_rows(ws.root / "tables" / "table1.csv");
  REQUIRE(t1.size() > 1);
  CHECK(t1[0] == std::vector<std::string>{"metric", "phase_group", "method", "mean", "std", "ci_low", "ci_high", "n"});
  for (std::size_t i = 1; i < t1.size(); ++i) {
    const double mean = std::stod(t1[i][3]);
    CHECK(std::stod(t1[i][5]) <= mean);
    CHECK(mean <= std::stod(t1[i][6]));
  }
}

TEST_CASE("report: regional table has the full region x phase x method grid") {
  Workspace& ws = workspace();
  auto t2 = read_rows(ws.root / "tables" / "table2.csv");
  std::set<std::string> seen;
  for (std::size_t i = 1; i < t2.size(); ++i) seen.insert(t2[i][0] + "|" + t2[i][1] + "|" + t2[i][2]);
  for (const char* region : {"all", "apical", "mid", "basal"})
    for (const char* pg : {"ed", "es", "all"})
      for (const char* method : {"reg_mtn", "seg_mtn", "seg_unet"})
        CHECK(seen.count(std::string(region) + "|" + pg + "|" + method) == 1);
}

TEST_CASE("report: identical methods give KS D = 0 rows") {
  Workspace& ws = workspace();
  const fs::path dir = ws.root / "scores_same";
  fs::create_directories(dir);
  fs::copy_file(ws.root / "scores" / "seg_scores_mtn.csv", dir / "seg_scores_mtn.csv",
                fs::copy_options::overwrite_existing);
  fs::copy_file(ws.root / "scores" / "seg_scores_mtn.csv", dir / "seg_scores_unet.csv",
                fs::copy_options::overwrite_existing);
  fs::copy_file(ws.root / "scores" / "areas.csv", dir / "areas.csv", fs::copy_options::overwrite_existing);
  std::ofstream devnull;
  run_report(dir, ws.root / "tables_same", ReportOptions{.seed = 5, .n_resamples = 100}, devnull);
  auto ks = read_rows(ws.root / "tables_same" / "ks.csv");
  REQUIRE(ks.size() == 1 + 4);
  for (std::size_t i = 1; i < ks.size(); ++i) {
    CHECK(std::stod(ks[i][3]) == 0.0);
    CHECK(std::stod(ks[i][4]) == 1.0);
  }
}

TEST_CASE("report: reruns are byte-identical, empty inputs error") {
  Workspace& ws = workspace();
  std::ofstream devnull;
  run_report(ws.root / "scores", ws.root / "tables_b", ReportOptions{.seed = 5, .n_resamples = 200}, devnull);
  for (const char* f : {"table1.csv", "table2.csv", "ks.csv", "correlation.csv", "ci_mad.csv"})
    CHECK(slurp(ws.root / "tables" / f) == slurp(ws.root / "tables_b" / f));

  const fs::path empty_dir = ws.root / "scores_empty";
  fs::create_directories(empty_dir);
  std::ofstream(empty_dir / "seg_scores_mtn.csv") << "patient,phase,dice,jaccard,msd_mm,hd_mm\n";
  std::ofstream(empty_dir / "seg_scores_unet.csv") << "patient,phase,dice,jaccard,msd_mm,hd_mm\n";
  std::ofstream(empty_dir / "areas.csv")
      << "patient,phase,slice,region,area_true_mm2,area_reg_mtn_mm2,area_seg_mtn_mm2,area_seg_unet_mm2\n";
  CHECK_THROWS_AS(run_report(empty_dir, ws.root / "tables_empty", ReportOptions{}, devnull), UsageError);
}

TEST_CASE("report: correlation table carries one row per estimator") {
  Workspace& ws = workspace();
  auto corr = read_rows(ws.root / "tables" / "correlation.csv");
  REQUIRE(corr.size() == 1 + 3);
  std::set<std::string> methods;
  for (std::size_t i = 1; i < corr.size(); ++i) {
    methods.insert(corr[i][0]);
    const double r = std::stod(corr[i][1]);
    CHECK(r >= -1.0);
    CHECK(r <= 1.0);
  }
  CHECK(methods == std::set<std::string>{"reg_mtn", "seg_mtn", "seg_unet"});
}

#ifdef MTSEG_CLI_PATH
TEST_CASE("cli: exit codes for success, usage errors, and bad configs") {
  Workspace& ws = workspace();
  const std::string bin = MTSEG_CLI_PATH;
  const fs::path tmp = ws.root / "cli";
  fs::create_directories(tmp);

  auto run = [&](const std::string& args) {
    const int status = std::system((bin + " " + args + " >/dev/null 2>&1").c_str());
    return WEXITSTATUS(status);
  };

  CHECK(run("definitely-not-a-command") == 2);
  CHECK(run("synth-data --config missing.json --out " + (tmp / "d").string()) == 2);

  const fs::path bad_cfg = tmp / "bad.json";
  std::ofstream(bad_cfg) << R"({"synth": {"inner_radius_px": [9, 9], "outer_radius_px": [5, 6]}})";
  CHECK(run("synth-data --config " + bad_cfg.string() + " --out " + (tmp / "d2").string()) == 2);

  const fs::path good_cfg = tmp / "good.json";
  std::ofstream(good_cfg) << micro_config_json().dump();
  CHECK(run("synth-data --config " + good_cfg.string() + " --out " + (tmp / "data").string()) == 0);
  CHECK(run("synth-data --config " + good_cfg.string() + " --out " + (tmp / "data").string()) == 2);  // non-empty
  CHECK(run("synth-data --config " + good_cfg.string() + " --out " + (tmp / "data").string() + " --force") == 0);
}
#endif
