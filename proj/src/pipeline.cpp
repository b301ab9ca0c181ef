#include "mtseg/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <thread>

#include "mtseg/checkpoint.hpp"
#include "mtseg/metrics.hpp"
#include "mtseg/stats.hpp"

namespace mtseg {

namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------------------
// strict JSON helpers
// ---------------------------------------------------------------------------

void check_keys(const nlohmann::json& j, const std::string& ctx, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw UsageError("config: " + ctx + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok |= (key == a);
    if (!ok) throw UsageError("config: unknown key \"" + key + "\" in " + ctx);
  }
}

template <typename T>
T get_or(const nlohmann::json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("config: bad value for \"" + std::string(key) + "\": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// CSV helpers: comma-separated, no quoting (ids are [A-Za-z0-9_]), doubles
// printed with %.10g so reruns emit identical bytes
// ---------------------------------------------------------------------------

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t col(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw UsageError("csv: missing column \"" + name + "\"");
  }
};

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

CsvTable read_csv(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot open " + path.string());
  CsvTable t;
  std::string line;
  if (!std::getline(is, line)) throw UsageError(path.string() + " is empty");
  t.header = split_csv_line(line);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto row = split_csv_line(line);
    if (row.size() != t.header.size())
      throw UsageError(path.string() + ": row with " + std::to_string(row.size()) + " fields, expected " +
                       std::to_string(t.header.size()));
    t.rows.push_back(std::move(row));
  }
  return t;
}

class CsvWriter {
 public:
  CsvWriter(const fs::path& path, std::initializer_list<const char*> header) : os_(path) {
    if (!os_) throw std::runtime_error("cannot write " + path.string());
    bool first = true;
    for (const char* h : header) {
      if (!first) os_ << ',';
      os_ << h;
      first = false;
    }
    os_ << '\n';
  }

  void row(const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) os_ << ',';
      os_ << fields[i];
    }
    os_ << '\n';
  }

 private:
  std::ofstream os_;
};

void ensure_output_dir(const fs::path& dir) { fs::create_directories(dir); }

}  // namespace

// ---------------------------------------------------------------------------
// RunConfig
// ---------------------------------------------------------------------------

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  check_keys(j, "top level", {"seed", "jobs", "loss", "net", "preprocess", "train", "synth"});
  RunConfig cfg;
  cfg.seed = get_or<std::uint64_t>(j, "seed", cfg.seed);
  cfg.jobs = get_or<int>(j, "jobs", cfg.jobs);

  if (j.contains("loss")) {
    check_keys(j.at("loss"), "loss", {"form"});
    cfg.loss_form = loss_form_from_string(get_or<std::string>(j.at("loss"), "form", "precision"));
  }
  if (j.contains("net")) {
    const auto& n = j.at("net");
    check_keys(n, "net", {"input_size", "depth", "base_channels"});
    cfg.net.input_size = get_or<int>(n, "input_size", cfg.net.input_size);
    cfg.net.depth = get_or<int>(n, "depth", cfg.net.depth);
    cfg.net.base_channels = get_or<int>(n, "base_channels", cfg.net.base_channels);
  }
  if (j.contains("preprocess")) {
    const auto& p = j.at("preprocess");
    check_keys(p, "preprocess", {"target_spacing_mm", "size"});
    cfg.preprocess.target_spacing_mm = get_or<double>(p, "target_spacing_mm", cfg.preprocess.target_spacing_mm);
    cfg.preprocess.size = get_or<int>(p, "size", cfg.preprocess.size);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    check_keys(t, "train",
               {"epochs", "lr0", "decay", "rmsprop_alpha", "rmsprop_eps", "batch_size", "folds", "select_on",
                "reg_noise_std", "precision"});
    cfg.train.epochs = get_or<int>(t, "epochs", 50);
    cfg.train.lr0 = get_or<double>(t, "lr0", 1e-3);
    cfg.train.decay = get_or<double>(t, "decay", 0.95);
    cfg.train.rmsprop.alpha = get_or<double>(t, "rmsprop_alpha", 0.99);
    cfg.train.rmsprop.eps = get_or<double>(t, "rmsprop_eps", 1e-8);
    cfg.train.batch_size = get_or<int>(t, "batch_size", 8);
    cfg.train.folds = get_or<std::vector<int>>(t, "folds", {0, 1, 2, 3, 4});
    const std::string sel = get_or<std::string>(t, "select_on", "test");
    if (sel != "test" && sel != "train") throw UsageError("config: train.select_on must be \"test\" or \"train\"");
    cfg.train.select_on_train = (sel == "train");
    cfg.train.reg_noise_std = get_or<double>(t, "reg_noise_std", 0.0);
    cfg.precision = get_or<std::string>(t, "precision", "f64");
    if (cfg.precision != "f32" && cfg.precision != "f64")
      throw UsageError("config: train.precision must be \"f32\" or \"f64\"");
  }
  if (j.contains("synth")) {
    const auto& s = j.at("synth");
    check_keys(s, "synth",
               {"image_size", "spacing_mm", "slice_thickness_mm", "patients", "phases", "slices", "center_jitter_px",
                "inner_radius_px", "outer_radius_px", "ring_intensity", "pool_intensity", "background_intensity",
                "texture_amp", "noise_std", "seed"});
    cfg.synth.image_size = get_or<int>(s, "image_size", cfg.synth.image_size);
    cfg.synth.spacing_mm = get_or<double>(s, "spacing_mm", cfg.synth.spacing_mm);
    cfg.synth.slice_thickness_mm = get_or<double>(s, "slice_thickness_mm", cfg.synth.slice_thickness_mm);
    cfg.synth_patients = get_or<int>(s, "patients", cfg.synth_patients);
    cfg.synth_phases = get_or<int>(s, "phases", cfg.synth_phases);
    cfg.synth_slices = get_or<int>(s, "slices", cfg.synth_slices);
    cfg.synth.center_jitter_px = get_or<double>(s, "center_jitter_px", cfg.synth.center_jitter_px);
    if (s.contains("inner_radius_px")) {
      const auto r = s.at("inner_radius_px").get<std::vector<double>>();
      if (r.size() != 2) throw UsageError("config: synth.inner_radius_px must be [min, max]");
      cfg.synth.inner_radius_min_px = r[0];
      cfg.synth.inner_radius_max_px = r[1];
    }
    if (s.contains("outer_radius_px")) {
      const auto r = s.at("outer_radius_px").get<std::vector<double>>();
      if (r.size() != 2) throw UsageError("config: synth.outer_radius_px must be [min, max]");
      cfg.synth.outer_radius_min_px = r[0];
      cfg.synth.outer_radius_max_px = r[1];
    }
    cfg.synth.ring_intensity = get_or<double>(s, "ring_intensity", cfg.synth.ring_intensity);
    cfg.synth.pool_intensity = get_or<double>(s, "pool_intensity", cfg.synth.pool_intensity);
    cfg.synth.background_intensity = get_or<double>(s, "background_intensity", cfg.synth.background_intensity);
    cfg.synth.texture_amp = get_or<double>(s, "texture_amp", cfg.synth.texture_amp);
    cfg.synth.noise_std = get_or<double>(s, "noise_std", cfg.synth.noise_std);
    if (s.contains("seed")) cfg.synth.seed = s.at("seed").get<std::uint64_t>();
  }
  cfg.resolve();
  return cfg;
}

void RunConfig::resolve() {
  if (jobs < 1) throw UsageError("config: jobs must be >= 1");
  net.seed = seed;
  if (synth.seed == 0) synth.seed = seed;
  train.seed = seed;
  train.loss_form = loss_form;
  train.net = net;
  train.preprocess = preprocess;
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j;
  j["seed"] = seed;
  j["jobs"] = jobs;
  j["loss"] = {{"form", to_string(loss_form)}};
  j["net"] = {{"input_size", net.input_size}, {"depth", net.depth}, {"base_channels", net.base_channels}};
  j["preprocess"] = {{"target_spacing_mm", preprocess.target_spacing_mm}, {"size", preprocess.size}};
  j["train"] = {{"epochs", train.epochs},
                {"lr0", train.lr0},
                {"decay", train.decay},
                {"rmsprop_alpha", train.rmsprop.alpha},
                {"rmsprop_eps", train.rmsprop.eps},
                {"batch_size", train.batch_size},
                {"folds", train.folds},
                {"select_on", train.select_on_train ? "train" : "test"},
                {"reg_noise_std", train.reg_noise_std},
                {"precision", precision}};
  j["synth"] = {{"image_size", synth.image_size},
                {"spacing_mm", synth.spacing_mm},
                {"slice_thickness_mm", synth.slice_thickness_mm},
                {"patients", synth_patients},
                {"phases", synth_phases},
                {"slices", synth_slices},
                {"center_jitter_px", synth.center_jitter_px},
                {"inner_radius_px", {synth.inner_radius_min_px, synth.inner_radius_max_px}},
                {"outer_radius_px", {synth.outer_radius_min_px, synth.outer_radius_max_px}},
                {"ring_intensity", synth.ring_intensity},
                {"pool_intensity", synth.pool_intensity},
                {"background_intensity", synth.background_intensity},
                {"texture_amp", synth.texture_amp},
                {"noise_std", synth.noise_std},
                {"seed", synth.seed}};
  return j;
}

RunConfig RunConfig::load_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  RunConfig cfg = from_json(j);
  if (const char* env = std::getenv("MTL_SEED")) {
    try {
      cfg.seed = static_cast<std::uint64_t>(std::stoull(env));
    } catch (...) {
      throw UsageError("MTL_SEED is not an integer: " + std::string(env));
    }
    cfg.resolve();
  }
  return cfg;
}

void RunConfig::save_file(const fs::path& path) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << to_json().dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// synth-data
// ---------------------------------------------------------------------------

SynthSummary run_synth(const RunConfig& cfg, const fs::path& out_dir, bool force, std::ostream& log) {
  try {
    cfg.synth.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (fs::exists(out_dir) && !fs::is_empty(out_dir) && !force)
    throw UsageError("output directory " + out_dir.string() + " is not empty (use --force to overwrite)");
  ensure_output_dir(out_dir);

  Dataset ds = generate_synthetic_dataset(cfg.synth, cfg.synth_patients, cfg.synth_phases, cfg.synth_slices);
  save_dataset(ds, out_dir);
  cfg.save_file(out_dir / "config.resolved.json");

  SynthSummary s;
  s.patients = cfg.synth_patients;
  s.phases = cfg.synth_phases;
  s.slices_per_volume = cfg.synth_slices;
  s.total_slices = ds.slices.size();
  double area = 0;
  for (const auto& sl : ds.slices) area += sl.area_mm2;
  s.mean_area_mm2 = area / static_cast<double>(ds.slices.size());
  log << "synth-data: " << s.patients << " patients, " << s.total_slices << " slices, mean myocardium area "
      << fmt(s.mean_area_mm2) << " mm^2\n";
  return s;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

namespace {

template <typename Scalar>
void train_all_folds(const Dataset& ds, const TrainConfig& tcfg, bool multi_task, const fs::path& out_dir, bool resume,
                     int jobs, std::ostream& log) {
  const auto folds = split_folds(ds.patient_ids(), tcfg.seed);
  const std::vector<int> wanted = tcfg.folds;

  auto run_one = [&](int f) {
    PreparedFold<Scalar> prepared = prepare_fold<Scalar>(ds, folds[static_cast<std::size_t>(f)], tcfg);
    return train_fold<Scalar>(prepared.train, prepared.test, tcfg, multi_task, f, out_dir, resume);
  };

  std::vector<FoldResult> results(wanted.size());
  if (jobs <= 1 || wanted.size() == 1) {
    for (std::size_t i = 0; i < wanted.size(); ++i) results[i] = run_one(wanted[i]);
  } else {
    // folds are independent (separate output files, keyed RNG streams)
    std::vector<std::thread> pool;
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(wanted.size());
    const int n_workers = std::min<int>(jobs, static_cast<int>(wanted.size()));
    for (int t = 0; t < n_workers; ++t)
      pool.emplace_back([&]() {
        for (std::size_t i = next.fetch_add(1); i < wanted.size(); i = next.fetch_add(1)) {
          try {
            results[i] = run_one(wanted[i]);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  for (std::size_t i = 0; i < wanted.size(); ++i) {
    log << (multi_task ? "mtn" : "unet") << " fold " << wanted[i] << ": best dice " << fmt(results[i].best_dice)
        << " at epoch " << results[i].best_epoch;
    if (multi_task) {
      const UncertaintyReport ur = learned_uncertainty_report(results[i].log, tcfg.loss_form);
      log << "; final s_reg " << fmt(ur.s1_final) << ", s_seg " << fmt(ur.s2_final) << ", seg:reg weight ratio "
          << fmt(ur.weight_ratio);
    }
    log << "\n";
  }
}

}  // namespace

void run_train(const RunConfig& cfg, const fs::path& data_dir, const fs::path& out_dir, bool baseline, bool resume,
               std::ostream& log) {
  if (!fs::exists(data_dir / "manifest.json"))
    throw UsageError("no dataset manifest at " + (data_dir / "manifest.json").string());
  Dataset ds = load_dataset(data_dir);
  TrainConfig tcfg = cfg.train;
  try {
    tcfg.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }

  ensure_output_dir(out_dir);
  cfg.save_file(out_dir / "config.resolved.json");

  if (cfg.precision == "f32")
    train_all_folds<float>(ds, tcfg, !baseline, out_dir, resume, cfg.jobs, log);
  else
    train_all_folds<double>(ds, tcfg, !baseline, out_dir, resume, cfg.jobs, log);
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

namespace {

struct FoldCheckpoints {
  std::optional<fs::path> mtn;
  std::optional<fs::path> unet;
};

std::map<int, FoldCheckpoints> find_checkpoints(const fs::path& dir) {
  std::map<int, FoldCheckpoints> out;
  if (!fs::exists(dir)) throw UsageError("checkpoint directory " + dir.string() + " does not exist");
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string name = entry.path().filename().string();
    for (const char* method : {"mtn", "unet"}) {
      const std::string prefix = std::string(method) + "_fold";
      const std::string suffix = "_best.ckpt";
      if (!name.starts_with(prefix) || !name.ends_with(suffix)) continue;
      const std::string mid = name.substr(prefix.size(), name.size() - prefix.size() - suffix.size());
      if (mid.empty() || !std::all_of(mid.begin(), mid.end(), [](char c) { return c >= '0' && c <= '9'; })) continue;
      const int fold = std::stoi(mid);
      if (std::string(method) == "mtn")
        out[fold].mtn = entry.path();
      else
        out[fold].unet = entry.path();
    }
  }
  if (out.empty()) throw UsageError("no *_fold<k>_best.ckpt files under " + dir.string());
  return out;
}

struct VolumeEval {
  std::string patient;
  int phase = 0;
  SegScores mtn;
  SegScores unet;
};

struct AreaRow {
  std::string patient;
  int phase = 0;
  int slice = 0;
  std::string region;
  double area_true = 0;
  double area_reg_mtn = 0;
  double area_seg_mtn = 0;
  double area_seg_unet = 0;
};

MaskArray prob_to_mask(const Tensor<double>& prob, double threshold = 0.5) {
  MaskArray m(prob.shape[1], prob.shape[2]);
  for (Index i = 0; i < prob.shape[1]; ++i)
    for (Index j = 0; j < prob.shape[2]; ++j)
      m(i, j) = prob.data[i * prob.shape[2] + j] >= threshold ? 1 : 0;
  return m;
}

MaskArray mask3d_slice(const Mask3D& vol, Index k) {
  MaskArray m(vol.h, vol.w);
  for (Index i = 0; i < vol.h; ++i)
    for (Index j = 0; j < vol.w; ++j) m(i, j) = vol.at(k, i, j);
  return m;
}

}  // namespace

EvaluateSummary run_evaluate(const fs::path& checkpoints_dir, const fs::path& data_dir, const fs::path& out_dir,
                             std::ostream& log) {
  if (!fs::exists(data_dir / "manifest.json"))
    throw UsageError("no dataset manifest at " + (data_dir / "manifest.json").string());
  Dataset ds = load_dataset(data_dir);

  auto by_fold = find_checkpoints(checkpoints_dir);
  for (const auto& [fold, cks] : by_fold) {
    if (!cks.mtn) throw UsageError("fold " + std::to_string(fold) + ": missing mtn checkpoint");
    if (!cks.unet) throw UsageError("fold " + std::to_string(fold) + ": missing unet (baseline) checkpoint");
  }

  ensure_output_dir(out_dir);

  std::optional<CheckpointMeta> reference;
  std::vector<VolumeEval> vol_rows;
  std::vector<AreaRow> area_rows;

  for (const auto& [fold, cks] : by_fold) {
    auto mtn = load_checkpoint<double>(*cks.mtn);
    auto unet = load_checkpoint<double>(*cks.unet);
    if (!mtn.meta.multi_task) throw UsageError(cks.mtn->string() + " is not a multi-task checkpoint");
    if (unet.meta.multi_task) throw UsageError(cks.unet->string() + " is not a baseline checkpoint");
    for (const CheckpointMeta* m : {&mtn.meta, &unet.meta}) {
      if (m->train_seed != mtn.meta.train_seed || m->target_spacing_mm != mtn.meta.target_spacing_mm ||
          m->crop_size != mtn.meta.crop_size)
        throw UsageError("checkpoint metadata disagrees within fold " + std::to_string(fold));
      if (reference) {
        if (m->train_seed != reference->train_seed || m->target_spacing_mm != reference->target_spacing_mm ||
            m->crop_size != reference->crop_size || !(m->net == reference->net))
          throw UsageError("checkpoint set mixes incompatible runs (seed/preprocess/topology mismatch)");
      }
    }
    if (!reference) reference = mtn.meta;

    const PreprocessConfig prep{mtn.meta.target_spacing_mm, mtn.meta.crop_size};
    const auto folds = split_folds(ds.patient_ids(), mtn.meta.train_seed);
    const FoldSplit& split = folds.at(static_cast<std::size_t>(fold));

    Dataset test;
    test.slice_thickness_mm = ds.slice_thickness_mm;
    for (const auto& s : ds.slices)
      if (std::find(split.test.begin(), split.test.end(), s.patient_id) != split.test.end())
        test.slices.push_back(preprocess_sample(s, prep));

    for (const VolumeSeries& vol : group_volumes(test)) {
      std::vector<MaskArray> gold_slices, mtn_slices, unet_slices;
      std::vector<double> reg_areas;
      for (const SliceSample* s : vol.slices) {
        gold_slices.push_back(s->mask);
        TrainSlice<double> t = to_train_slice<double>(*s);

        Tape<double> tape_m;
        auto bound_m = mtn.net.bind(tape_m, false);
        auto out_m = mtn.net.forward(tape_m, bound_m, t.image);
        mtn_slices.push_back(prob_to_mask(tape_m.value(out_m.seg_prob)));
        reg_areas.push_back(tape_m.value(out_m.area).item());

        Tape<double> tape_u;
        auto bound_u = unet.net.bind(tape_u, false);
        auto out_u = unet.net.forward(tape_u, bound_u, t.image);
        unet_slices.push_back(prob_to_mask(tape_u.value(out_u.seg_prob)));
      }

      const double sp = prep.target_spacing_mm;
      Mask3D gold = stack_slices(gold_slices, ds.slice_thickness_mm, sp, sp);
      Mask3D pred_mtn = stack_slices(mtn_slices, ds.slice_thickness_mm, sp, sp);
      Mask3D pred_unet = stack_slices(unet_slices, ds.slice_thickness_mm, sp, sp);

      VolumeEval ve;
      ve.patient = vol.patient_id;
      ve.phase = vol.phase_index;
      ve.mtn = evaluate_volume(pred_mtn, gold);
      ve.unet = evaluate_volume(pred_unet, gold);
      vol_rows.push_back(ve);

      // areas come from the post-processed segmentations
      Mask3D clean_mtn = largest_connected_component(pred_mtn);
      Mask3D clean_unet = largest_connected_component(pred_unet);
      std::vector<bool> fg;
      for (Index k = 0; k < gold.d; ++k) {
        bool any = false;
        for (Index i = 0; i < gold.h && !any; ++i)
          for (Index j = 0; j < gold.w && !any; ++j) any = gold.at(k, i, j) != 0;
        fg.push_back(any);
      }
      RegionAssignment regions = classify_regions(fg);
      if (regions.degenerate)
        log << "warning: " << vol.patient_id << " phase " << vol.phase_index
            << " has fewer than 5 foreground slices; regional labels truncated\n";

      for (std::size_t k = 0; k < vol.slices.size(); ++k) {
        AreaRow row;
        row.patient = vol.patient_id;
        row.phase = vol.phase_index;
        row.slice = vol.slices[k]->slice_index;
        row.region = regions.labels[k] ? to_string(*regions.labels[k]) : "excluded";
        row.area_true = ground_truth_area(gold_slices[k], sp, sp);
        row.area_reg_mtn = reg_areas[k];
        row.area_seg_mtn = ground_truth_area(mask3d_slice(clean_mtn, static_cast<Index>(k)), sp, sp);
        row.area_seg_unet = ground_truth_area(mask3d_slice(clean_unet, static_cast<Index>(k)), sp, sp);
        area_rows.push_back(row);
      }
    }
  }

  // stable output order: patient, then phase
  std::sort(vol_rows.begin(), vol_rows.end(), [](const VolumeEval& a, const VolumeEval& b) {
    return std::tie(a.patient, a.phase) < std::tie(b.patient, b.phase);
  });
  std::sort(area_rows.begin(), area_rows.end(), [](const AreaRow& a, const AreaRow& b) {
    return std::tie(a.patient, a.phase, a.slice) < std::tie(b.patient, b.phase, b.slice);
  });

  for (const char* method : {"mtn", "unet"}) {
    CsvWriter w(out_dir / (std::string("seg_scores_") + method + ".csv"),
                {"patient", "phase", "dice", "jaccard", "msd_mm", "hd_mm"});
    for (const auto& v : vol_rows) {
      const SegScores& s = std::string(method) == "mtn" ? v.mtn : v.unet;
      w.row({v.patient, std::to_string(v.phase), fmt(s.dice), fmt(s.jaccard), fmt(s.msd_mm), fmt(s.hd_mm)});
    }
  }
  {
    CsvWriter w(out_dir / "areas.csv", {"patient", "phase", "slice", "region", "area_true_mm2", "area_reg_mtn_mm2",
                                        "area_seg_mtn_mm2", "area_seg_unet_mm2"});
    for (const auto& r : area_rows)
      w.row({r.patient, std::to_string(r.phase), std::to_string(r.slice), r.region, fmt(r.area_true),
             fmt(r.area_reg_mtn), fmt(r.area_seg_mtn), fmt(r.area_seg_unet)});
  }

  EvaluateSummary summary{vol_rows.size(), area_rows.size()};
  log << "evaluate: " << summary.volumes << " volumes, " << summary.area_rows << " slices scored\n";
  return summary;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

namespace {

struct PhaseGroups {
  int ed_phase = 0;
  int es_phase = 0;

  bool contains(const std::string& group, int phase) const {
    if (group == "all") return true;
    if (group == "ed") return phase == ed_phase;
    return phase == es_phase;
  }
};

double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double pop_std(const std::vector<double>& v, double mean) {
  double s = 0;
  for (double x : v) s += (x - mean) * (x - mean);
  return std::sqrt(s / static_cast<double>(v.size()));
}

}  // namespace

void run_report(const fs::path& scores_dir, const fs::path& out_dir, const ReportOptions& opts, std::ostream& log) {
  CsvTable seg_mtn = read_csv(scores_dir / "seg_scores_mtn.csv");
  CsvTable seg_unet = read_csv(scores_dir / "seg_scores_unet.csv");
  CsvTable areas = read_csv(scores_dir / "areas.csv");
  if (seg_mtn.rows.empty() || seg_unet.rows.empty() || areas.rows.empty())
    throw UsageError("report: empty score tables in " + scores_dir.string());

  ensure_output_dir(out_dir);

  // end-diastole / end-systole from the per-phase mean gold area
  PhaseGroups groups;
  {
    std::map<int, std::pair<double, int>> per_phase;
    const std::size_t cp = areas.col("phase"), ca = areas.col("area_true_mm2");
    for (const auto& row : areas.rows) {
      auto& [sum, n] = per_phase[std::stoi(row[cp])];
      sum += std::stod(row[ca]);
      n += 1;
    }
    double best_hi = -1, best_lo = std::numeric_limits<double>::infinity();
    for (const auto& [phase, acc] : per_phase) {
      const double mean = acc.first / acc.second;
      if (mean > best_hi) {
        best_hi = mean;
        groups.ed_phase = phase;
      }
      if (mean < best_lo) {
        best_lo = mean;
        groups.es_phase = phase;
      }
    }
  }

  const std::vector<std::string> metrics{"dice", "jaccard", "msd_mm", "hd_mm"};
  const std::vector<std::string> phase_names{"ed", "es", "all"};

  // table1: per-volume segmentation metrics with bootstrap CIs
  {
    CsvWriter w(out_dir / "table1.csv",
                {"metric", "phase_group", "method", "mean", "std", "ci_low", "ci_high", "n"});
    std::uint64_t row_id = 0;
    for (const auto& metric : metrics) {
      for (const auto& pg : phase_names) {
        for (const char* method : {"mtn", "unet"}) {
          const CsvTable& t = std::string(method) == "mtn" ? seg_mtn : seg_unet;
          const std::size_t cp = t.col("phase"), cm = t.col(metric);
          std::vector<double> vals;
          for (const auto& row : t.rows)
            if (groups.contains(pg, std::stoi(row[cp]))) vals.push_back(std::stod(row[cm]));
          if (vals.empty()) continue;
          const double mean = mean_of(vals);
          BootstrapResult ci =
              bootstrap_ci_mean(vals, opts.n_resamples, opts.confidence, derive_seed(opts.seed, {row_id}));
          w.row({metric, pg, method, fmt(mean), fmt(pop_std(vals, mean)), fmt(ci.ci_low), fmt(ci.ci_high),
                 std::to_string(vals.size())});
          ++row_id;
        }
      }
    }
  }

  // ks.csv: mtn vs unet distribution comparison per metric, all phases
  {
    CsvWriter w(out_dir / "ks.csv", {"metric", "method_a", "method_b", "d", "p_value"});
    for (const auto& metric : metrics) {
      std::vector<double> a, b;
      const std::size_t ca = seg_mtn.col(metric), cb = seg_unet.col(metric);
      for (const auto& row : seg_mtn.rows) a.push_back(std::stod(row[ca]));
      for (const auto& row : seg_unet.rows) b.push_back(std::stod(row[cb]));
      KSResult ks = ks_two_sample(a, b);
      w.row({metric, "mtn", "unet", fmt(ks.statistic), fmt(ks.p_value)});
    }
  }

  const std::vector<std::pair<std::string, std::string>> estimators{
      {"reg_mtn", "area_reg_mtn_mm2"}, {"seg_mtn", "area_seg_mtn_mm2"}, {"seg_unet", "area_seg_unet_mm2"}};

  // correlation.csv: estimated area vs gold-standard area per estimator
  {
    CsvWriter w(out_dir / "correlation.csv", {"method", "pearson_r", "n"});
    const std::size_t ct = areas.col("area_true_mm2");
    for (const auto& [name, column] : estimators) {
      const std::size_t ce = areas.col(column);
      std::vector<double> truth, est;
      for (const auto& row : areas.rows) {
        truth.push_back(std::stod(row[ct]));
        est.push_back(std::stod(row[ce]));
      }
      w.row({name, fmt(pearson_r(est, truth)), std::to_string(est.size())});
    }
  }

  // table2: regional MAD summary; excluded slices (no gold foreground) are
  // dropped, the "all" region spans every kept slice
  {
    CsvWriter w(out_dir / "table2.csv", {"region", "phase_group", "method", "mad_mean_mm2", "mad_std_mm2", "n"});
    const std::size_t cp = areas.col("phase"), cr = areas.col("region"), ct = areas.col("area_true_mm2");
    for (const std::string region : {"all", "apical", "mid", "basal"}) {
      for (const auto& pg : phase_names) {
        for (const auto& [name, column] : estimators) {
          const std::size_t ce = areas.col(column);
          std::vector<double> pred, truth;
          std::vector<std::string> keys;
          for (const auto& row : areas.rows) {
            if (row[cr] == "excluded") continue;
            if (region != "all" && row[cr] != region) continue;
            if (!groups.contains(pg, std::stoi(row[cp]))) continue;
            pred.push_back(std::stod(row[ce]));
            truth.push_back(std::stod(row[ct]));
            keys.push_back(region);
          }
          if (pred.empty()) {
            log << "warning: empty group region=" << region << " phase=" << pg << " method=" << name << "\n";
            continue;
          }
          const auto summary = mad_summary(pred, truth, keys);
          w.row({region, pg, name, fmt(summary[0].mean), fmt(summary[0].stddev), std::to_string(summary[0].n)});
        }
      }
    }
  }

  // ci_mad.csv: bootstrap CI of the MAD per estimator, all phases/regions
  {
    CsvWriter w(out_dir / "ci_mad.csv", {"method", "mad_mean_mm2", "ci_low", "ci_high", "n"});
    const std::size_t ct = areas.col("area_true_mm2"), cr = areas.col("region");
    std::uint64_t row_id = 1000;
    for (const auto& [name, column] : estimators) {
      const std::size_t ce = areas.col(column);
      std::vector<double> diffs;
      for (const auto& row : areas.rows) {
        if (row[cr] == "excluded") continue;
        diffs.push_back(std::fabs(std::stod(row[ce]) - std::stod(row[ct])));
      }
      BootstrapResult ci =
          bootstrap_ci_mean(diffs, opts.n_resamples, opts.confidence, derive_seed(opts.seed, {row_id}));
      w.row({name, fmt(ci.point_mean), fmt(ci.ci_low), fmt(ci.ci_high), std::to_string(diffs.size())});
      ++row_id;
    }
  }

  nlohmann::json meta = {{"seed", opts.seed},
                         {"n_resamples", opts.n_resamples},
                         {"confidence", opts.confidence},
                         {"ed_phase", groups.ed_phase},
                         {"es_phase", groups.es_phase}};
  std::ofstream os(out_dir / "report_config.json");
  os << meta.dump(2) << '\n';

  log << "report: tables written to " << out_dir.string() << " (ed phase " << groups.ed_phase << ", es phase "
      << groups.es_phase << ")\n";
}

}  // namespace mtseg
