#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "mtseg/trainer.hpp"

using namespace mtseg;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is);
  return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 4;
  cfg.seed = 2024;
  cfg.net = NetConfig{.input_size = 16, .depth = 2, .base_channels = 2, .seed = 0};
  cfg.preprocess = PreprocessConfig{.target_spacing_mm = 1.0, .size = 16};
  cfg.folds = {0};
  return cfg;
}

Dataset tiny_dataset(std::uint64_t seed) {
  SyntheticRingSpec spec;
  spec.image_size = 16;
  spec.spacing_mm = 1.0;
  spec.center_jitter_px = 1.0;
  spec.inner_radius_min_px = 2.0;
  spec.inner_radius_max_px = 2.5;
  spec.outer_radius_min_px = 4.0;
  spec.outer_radius_max_px = 5.5;
  spec.noise_std = 0.05;
  spec.seed = seed;
  return generate_synthetic_dataset(spec, 6, 2, 3);
}

}  // namespace

TEST_CASE("rmsprop_step: zero gradient leaves the parameter, decays v") {
  Tensor<double> p = Tensor<double>::from({2}, {1.0, -2.0});
  Tensor<double> v = Tensor<double>::from({2}, {0.04, 0.09});
  Tensor<double>::Storage g = Tensor<double>::Storage::Zero(2);
  rmsprop_step(p, g, v, 0.001, RMSPropConfig{});
  CHECK(p.data[0] == 1.0);
  CHECK(p.data[1] == -2.0);
  CHECK(v.data[0] == doctest::Approx(0.04 * 0.99));
  CHECK(v.data[1] == doctest::Approx(0.09 * 0.99));
}

TEST_CASE("rmsprop_step: first step with unit gradient") {
  Tensor<double> p = Tensor<double>::scalar(0.0);
  Tensor<double> v = Tensor<double>::scalar(0.0);
  Tensor<double>::Storage g = Tensor<double>::Storage::Constant(1, 1.0);
  rmsprop_step(p, g, v, 0.001, RMSPropConfig{.alpha = 0.99, .eps = 1e-8});
  CHECK(v.data[0] == doctest::Approx(0.01).epsilon(1e-15));
  // delta = -0.001 / (0.1 + 1e-8)
  CHECK(p.data[0] == doctest::Approx(-0.001 / (0.1 + 1e-8)).epsilon(1e-12));
  CHECK(p.data[0] == doctest::Approx(-0.0099999990).epsilon(1e-7));
}

TEST_CASE("rmsprop_step: two steps with constant gradient match a hand unroll") {
  const double alpha = 0.99, eps = 1e-8, lr = 0.01, g0 = 0.5;
  Tensor<double> p = Tensor<double>::scalar(1.0);
  Tensor<double> v = Tensor<double>::scalar(0.0);
  Tensor<double>::Storage g = Tensor<double>::Storage::Constant(1, g0);
  rmsprop_step(p, g, v, lr, RMSPropConfig{alpha, eps});
  rmsprop_step(p, g, v, lr, RMSPropConfig{alpha, eps});

  double vv = 0, pp = 1.0;
  for (int i = 0; i < 2; ++i) {
    vv = alpha * vv + (1 - alpha) * g0 * g0;
    pp -= lr * g0 / (std::sqrt(vv) + eps);
  }
  CHECK(std::fabs(p.data[0] - pp) < 1e-15);
  CHECK(std::fabs(v.data[0] - vv) < 1e-15);
}

TEST_CASE("lr schedule: 0.001 decayed by 0.95 per epoch") {
  TrainConfig cfg = tiny_config();
  CHECK(lr_at_epoch(cfg, 0) == 0.001);
  CHECK(lr_at_epoch(cfg, 1) == doctest::Approx(0.00095).epsilon(1e-12));
  CHECK(lr_at_epoch(cfg, 50) == doctest::Approx(7.694e-5).epsilon(1e-3));
  CHECK_THROWS_AS(lr_at_epoch(cfg, -1), std::invalid_argument);
}

TEST_CASE("config validation: zero epochs and fold ids") {
  TrainConfig cfg = tiny_config();
  cfg.epochs = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = tiny_config();
  cfg.folds = {5};
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = tiny_config();
  cfg.preprocess.size = 32;  // != net input
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("slice_dice conventions") {
  Tensor<double> empty({1, 2, 2});
  CHECK(slice_dice(empty, empty) == 1.0);
  Tensor<double> p = Tensor<double>::from({1, 2, 2}, {0.9, 0.9, 0.1, 0.1});
  Tensor<double> m = Tensor<double>::from({1, 2, 2}, {1, 0, 0, 0});
  CHECK(slice_dice(p, m) == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("one rmsprop step at tiny lr strictly decreases a frozen batch's loss") {
  Dataset ds = tiny_dataset(7);
  TrainConfig cfg = tiny_config();
  auto folds = split_folds(ds.patient_ids(), cfg.seed);
  PreparedFold<double> prep = prepare_fold<double>(ds, folds[0], cfg);
  REQUIRE(prep.train.size() >= 4);

  auto net = MultiTaskUNet<double>::build(cfg.net, true);
  net.init_kaiming_uniform(1);

  auto batch_loss = [&](bool want_grads, std::vector<Tensor<double>::Storage>* grads) {
    Tape<double> tape;
    auto bound = net.bind(tape, want_grads);
    Var<double> sum_ce, sum_mad;
    for (int i = 0; i < 4; ++i) {
      auto out = net.forward_var(tape, bound, tape.constant(prep.train[static_cast<std::size_t>(i)].image));
      Var<double> ce = binary_cross_entropy(out.seg_prob, tape.constant(prep.train[static_cast<std::size_t>(i)].mask));
      Var<double> mad = abs(add_scalar(out.area, -prep.train[static_cast<std::size_t>(i)].area_target));
      sum_ce = i ? add(sum_ce, ce) : ce;
      sum_mad = i ? add(sum_mad, mad) : mad;
    }
    Var<double> total = joint_loss_var(scale(sum_mad, 0.25), scale(sum_ce, 0.25), bound.s1, bound.s2, cfg.loss_form);
    if (want_grads) {
      tape.backward(total);
      for (const auto& v : bound.params) grads->push_back(tape.grad(v));
    }
    return tape.value(total).item();
  };

  std::vector<Tensor<double>::Storage> grads;
  const double before = batch_loss(true, &grads);
  std::vector<Tensor<double>> vstate;
  for (const auto& p : net.parameters()) vstate.push_back(Tensor<double>(p.shape));
  for (std::size_t i = 0; i < net.parameters().size(); ++i)
    rmsprop_step(net.parameters()[i], grads[i], vstate[i], 1e-6, cfg.rmsprop);
  const double after = batch_loss(false, nullptr);
  CHECK(after < before);
}

TEST_CASE("train_fold: determinism, log shape, checkpoint round-trip") {
  Dataset ds = tiny_dataset(11);
  TrainConfig cfg = tiny_config();
  auto folds = split_folds(ds.patient_ids(), cfg.seed);
  PreparedFold<double> prep = prepare_fold<double>(ds, folds[0], cfg);

  const fs::path dir_a = fs::temp_directory_path() / "mtseg_train_a";
  const fs::path dir_b = fs::temp_directory_path() / "mtseg_train_b";
  fs::remove_all(dir_a);
  fs::remove_all(dir_b);

  FoldResult ra = train_fold<double>(prep.train, prep.test, cfg, true, 0, dir_a);
  FoldResult rb = train_fold<double>(prep.train, prep.test, cfg, true, 0, dir_b);

  CHECK(ra.log.size() == 3);  // one line per epoch
  CHECK(ra.best_epoch == rb.best_epoch);
  auto pa = fold_paths(dir_a, true, 0);
  auto pb = fold_paths(dir_b, true, 0);
  CHECK(slurp(pa.log) == slurp(pb.log));
  CHECK(slurp(pa.best) == slurp(pb.best));
  CHECK(slurp(pa.last) == slurp(pb.last));

  // stored best dice equals re-evaluating the stored parameters on the test set
  auto loaded = load_checkpoint<double>(pa.best);
  CHECK(loaded.meta.best_dice == mean_test_dice(loaded.net, prep.test));
  CHECK(loaded.meta.multi_task);
  CHECK(loaded.meta.s1.has_value());
  CHECK(loaded.meta.s2.has_value());
  // best-checkpoint dice is at least the final epoch's
  CHECK(loaded.meta.best_dice >= ra.log.back().test_dice);

  // s1/s2 moved away from the zero init during training
  CHECK(ra.log.back().s1 != 0.0);
  CHECK(ra.log.back().s2 != 0.0);

  fs::remove_all(dir_a);
  fs::remove_all(dir_b);
}

TEST_CASE("baseline checkpoints carry no log-uncertainty fields") {
  Dataset ds = tiny_dataset(13);
  TrainConfig cfg = tiny_config();
  cfg.epochs = 1;
  auto folds = split_folds(ds.patient_ids(), cfg.seed);
  PreparedFold<double> prep = prepare_fold<double>(ds, folds[0], cfg);
  const fs::path dir = fs::temp_directory_path() / "mtseg_train_base";
  fs::remove_all(dir);
  train_fold<double>(prep.train, prep.test, cfg, false, 0, dir);
  auto loaded = load_checkpoint<double>(fold_paths(dir, false, 0).best);
  CHECK(!loaded.meta.multi_task);
  CHECK(!loaded.meta.s1.has_value());
  CHECK(!loaded.meta.s2.has_value());
  fs::remove_all(dir);
}

TEST_CASE("resumed training reproduces the uninterrupted run byte for byte") {
  Dataset ds = tiny_dataset(17);
  TrainConfig cfg = tiny_config();
  cfg.epochs = 4;
  auto folds = split_folds(ds.patient_ids(), cfg.seed);
  PreparedFold<double> prep = prepare_fold<double>(ds, folds[0], cfg);

  const fs::path full_dir = fs::temp_directory_path() / "mtseg_resume_full";
  const fs::path part_dir = fs::temp_directory_path() / "mtseg_resume_part";
  fs::remove_all(full_dir);
  fs::remove_all(part_dir);

  train_fold<double>(prep.train, prep.test, cfg, true, 0, full_dir);

  TrainConfig half = cfg;
  half.epochs = 2;
  train_fold<double>(prep.train, prep.test, half, true, 0, part_dir);  // interrupted after epoch 1
  train_fold<double>(prep.train, prep.test, cfg, true, 0, part_dir, /*resume=*/true);

  auto pf = fold_paths(full_dir, true, 0);
  auto pp = fold_paths(part_dir, true, 0);
  CHECK(slurp(pf.log) == slurp(pp.log));
  CHECK(slurp(pf.best) == slurp(pp.best));
  CHECK(slurp(pf.last) == slurp(pp.last));

  fs::remove_all(full_dir);
  fs::remove_all(part_dir);
}

TEST_CASE("prepare_fold: 3x training data, untouched test targets, label noise only on train") {
  Dataset ds = tiny_dataset(19);
  TrainConfig cfg = tiny_config();
  cfg.reg_noise_std = 5.0;
  auto folds = split_folds(ds.patient_ids(), cfg.seed);
  PreparedFold<double> prep = prepare_fold<double>(ds, folds[0], cfg);

  const std::size_t train_patients = folds[0].train.size();
  CHECK(prep.train.size() == train_patients * 2 * 3 * 3);  // phases x slices x (1 + 2 augmented)
  CHECK(prep.test.size() == folds[0].test.size() * 2 * 3);

  bool any_noised = false;
  for (const auto& t : prep.train) any_noised |= (t.area_target != t.area_true);
  CHECK(any_noised);
  for (const auto& t : prep.test) CHECK(t.area_target == t.area_true);

  // same config -> identical prepared data (keyed RNG, not order-dependent)
  PreparedFold<double> again = prepare_fold<double>(ds, folds[0], cfg);
  for (std::size_t i = 0; i < prep.train.size(); ++i) {
    CHECK(prep.train[i].area_target == again.train[i].area_target);
    CHECK((prep.train[i].image.data == again.train[i].image.data).all());
  }
}

TEST_CASE("float-storage training runs and decreases the loss") {
  Dataset ds = tiny_dataset(23);
  TrainConfig cfg = tiny_config();
  cfg.epochs = 2;
  auto folds = split_folds(ds.patient_ids(), cfg.seed);
  PreparedFold<float> prep = prepare_fold<float>(ds, folds[0], cfg);
  const fs::path dir = fs::temp_directory_path() / "mtseg_train_f32";
  fs::remove_all(dir);
  FoldResult r = train_fold<float>(prep.train, prep.test, cfg, true, 0, dir);
  REQUIRE(r.log.size() == 2);
  CHECK(std::isfinite(r.log.back().l2));
  CHECK(r.log.back().l2 < r.log.front().l2 * 1.5);  // sanity: not diverging
  fs::remove_all(dir);
}

TEST_CASE("learned_uncertainty_report reads the final log entry") {
  std::vector<EpochLog> log(3);
  log[2].s1 = 3.45;
  log[2].s2 = -3.9;
  UncertaintyReport r = learned_uncertainty_report(log, LossForm::precision);
  CHECK(r.s1_final == 3.45);
  CHECK(r.s2_final == -3.9);
  CHECK(r.weight_ratio == doctest::Approx(1556.0).epsilon(0.01));

  log[2].s1 = log[2].s2 = 0.7;
  CHECK(learned_uncertainty_report(log, LossForm::precision).weight_ratio == doctest::Approx(1.0));
  CHECK_THROWS_AS(learned_uncertainty_report({}, LossForm::precision), std::invalid_argument);
}

TEST_CASE("x10 regression label noise drives the learned log-uncertainty up") {
  Dataset ds = tiny_dataset(31);
  TrainConfig cfg = tiny_config();
  cfg.epochs = 12;
  cfg.lr0 = 0.01;
  cfg.decay = 1.0;
  auto folds = split_folds(ds.patient_ids(), cfg.seed);

  auto final_s1 = [&](double noise_std, const char* tag) {
    TrainConfig c = cfg;
    c.reg_noise_std = noise_std;
    PreparedFold<double> prep = prepare_fold<double>(ds, folds[0], c);
    const fs::path dir = fs::temp_directory_path() / (std::string("mtseg_noise_") + tag);
    fs::remove_all(dir);
    FoldResult r = train_fold<double>(prep.train, prep.test, c, true, 0, dir);
    fs::remove_all(dir);
    return r.log.back().s1;
  };

  const double s_clean = final_s1(3.0, "clean");
  const double s_noisy = final_s1(30.0, "x10");
  CHECK(s_noisy > s_clean);
}

TEST_CASE("cross_validate trains each requested fold and reuses the patient split") {
  Dataset ds = tiny_dataset(29);
  TrainConfig cfg = tiny_config();
  cfg.epochs = 1;
  cfg.folds = {0, 1};
  const fs::path dir = fs::temp_directory_path() / "mtseg_cv";
  fs::remove_all(dir);
  auto results = cross_validate<double>(ds, cfg, true, dir);
  CHECK(results.size() == 2);
  CHECK(fs::exists(fold_paths(dir, true, 0).best));
  CHECK(fs::exists(fold_paths(dir, true, 1).best));
  CHECK(!fs::exists(fold_paths(dir, true, 2).best));
  fs::remove_all(dir);
}
