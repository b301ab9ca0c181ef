#ifndef MTSEG_TRAINER_HPP
#define MTSEG_TRAINER_HPP

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtseg/checkpoint.hpp"
#include "mtseg/data.hpp"
#include "mtseg/loss.hpp"
#include "mtseg/network.hpp"

namespace mtseg {

struct RMSPropConfig {
  double alpha = 0.99;
  double eps = 1e-8;
};

/// v <- alpha*v + (1-alpha)*g^2;  p <- p - lr * g / (sqrt(v) + eps)
template <typename Scalar>
void rmsprop_step(Tensor<Scalar>& param, const typename Tensor<Scalar>::Storage& grad, Tensor<Scalar>& v, double lr,
                  const RMSPropConfig& rc) {
  if (grad.size() != param.size() || v.size() != param.size())
    throw std::invalid_argument("rmsprop_step: shape mismatch");
  v.data = Scalar(rc.alpha) * v.data + Scalar(1.0 - rc.alpha) * grad.square();
  param.data -= Scalar(lr) * grad / (v.data.sqrt() + Scalar(rc.eps));
}

struct PreprocessConfig {
  double target_spacing_mm = 1.5625;
  int size = 192;
};

struct TrainConfig {
  int epochs = 50;
  double lr0 = 1e-3;
  double decay = 0.95;
  RMSPropConfig rmsprop;
  int batch_size = 8;
  std::uint64_t seed = 0;
  LossForm loss_form = LossForm::precision;
  NetConfig net;
  PreprocessConfig preprocess;
  std::vector<int> folds = {0, 1, 2, 3, 4};
  bool select_on_train = false;  // default: best checkpoint chosen on the test fold's Dice
  double reg_noise_std = 0.0;    // std of label noise added to training area targets, mm^2

  void validate() const {
    if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
    if (lr0 <= 0) throw std::invalid_argument("TrainConfig: lr0 must be positive");
    if (decay <= 0 || decay > 1) throw std::invalid_argument("TrainConfig: decay must be in (0, 1]");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    if (folds.empty()) throw std::invalid_argument("TrainConfig: no folds selected");
    for (int f : folds)
      if (f < 0 || f > 4) throw std::invalid_argument("TrainConfig: fold ids must be in 0..4");
    if (preprocess.size != net.input_size)
      throw std::invalid_argument("TrainConfig: preprocess size " + std::to_string(preprocess.size) +
                                  " != network input size " + std::to_string(net.input_size));
    if (reg_noise_std < 0) throw std::invalid_argument("TrainConfig: reg_noise_std must be >= 0");
    net.validate();
  }
};

inline double lr_at_epoch(const TrainConfig& cfg, int epoch) {
  if (epoch < 0) throw std::invalid_argument("lr_at_epoch: epoch must be >= 0");
  return cfg.lr0 * std::pow(cfg.decay, epoch);
}

template <typename Scalar>
struct TrainSlice {
  Tensor<Scalar> image;  // [1,S,S]
  Tensor<Scalar> mask;   // [1,S,S], binary
  double area_target = 0.0;  // training target (may carry label noise)
  double area_true = 0.0;    // mask-derived truth
  std::string patient_id;
  int phase_index = 0;
  int slice_index = 0;
};

template <typename Scalar>
TrainSlice<Scalar> to_train_slice(const SliceSample& s) {
  TrainSlice<Scalar> out;
  const Index h = s.image.rows(), w = s.image.cols();
  out.image = Tensor<Scalar>({1, h, w});
  out.mask = Tensor<Scalar>({1, h, w});
  for (Index i = 0; i < h; ++i)
    for (Index j = 0; j < w; ++j) {
      out.image.data[i * w + j] = Scalar(s.image(i, j));
      out.mask.data[i * w + j] = Scalar(s.mask(i, j));
    }
  out.area_target = s.area_mm2;
  out.area_true = s.area_mm2;
  out.patient_id = s.patient_id;
  out.phase_index = s.phase_index;
  out.slice_index = s.slice_index;
  return out;
}

inline SliceSample preprocess_sample(const SliceSample& s, const PreprocessConfig& prep) {
  return center_crop_or_pad(resample_to_spacing(s, prep.target_spacing_mm), prep.size);
}

template <typename Scalar>
struct PreparedFold {
  std::vector<TrainSlice<Scalar>> train;
  std::vector<TrainSlice<Scalar>> test;
};

/// Preprocesses every slice, splits by patient, appends two fixed augmented
/// copies of each training slice, and applies optional label noise to the
/// training area targets. All randomness is keyed by (seed, patient, phase,
/// slice), independent of fold composition and execution order.
template <typename Scalar>
PreparedFold<Scalar> prepare_fold(const Dataset& ds, const FoldSplit& fold, const TrainConfig& cfg) {
  const std::vector<std::string> patients = ds.patient_ids();
  auto patient_pos = [&](const std::string& id) {
    const auto it = std::find(patients.begin(), patients.end(), id);
    return static_cast<std::uint64_t>(it - patients.begin());
  };

  PreparedFold<Scalar> out;
  for (const auto& raw : ds.slices) {
    SliceSample s = preprocess_sample(raw, cfg.preprocess);
    const bool in_test = std::find(fold.test.begin(), fold.test.end(), s.patient_id) != fold.test.end();
    if (in_test) {
      out.test.push_back(to_train_slice<Scalar>(s));
      continue;
    }
    const std::uint64_t pp = patient_pos(s.patient_id);
    const auto keys = {streams::kAugment, pp, static_cast<std::uint64_t>(s.phase_index),
                       static_cast<std::uint64_t>(s.slice_index)};
    Rng aug_rng = derive_rng(cfg.seed, keys);
    auto copies = augment(s, aug_rng);

    std::vector<SliceSample> variants{std::move(s), std::move(copies[0]), std::move(copies[1])};
    for (std::size_t c = 0; c < variants.size(); ++c) {
      TrainSlice<Scalar> t = to_train_slice<Scalar>(variants[c]);
      if (cfg.reg_noise_std > 0) {
        Rng noise_rng = derive_rng(cfg.seed, {streams::kRegNoise, pp, static_cast<std::uint64_t>(t.phase_index),
                                              static_cast<std::uint64_t>(t.slice_index), static_cast<std::uint64_t>(c)});
        t.area_target += noise_rng.normal(0.0, cfg.reg_noise_std);
      }
      out.train.push_back(std::move(t));
    }
  }
  return out;
}

/// 2D Dice of a thresholded probability map against a binary mask; the
/// both-empty convention is 1.
template <typename Scalar>
double slice_dice(const Tensor<Scalar>& prob, const Tensor<Scalar>& mask, double threshold = 0.5) {
  if (prob.shape != mask.shape) throw std::invalid_argument("slice_dice: shape mismatch");
  Index np = 0, nm = 0, inter = 0;
  for (Index i = 0; i < prob.size(); ++i) {
    const bool p = static_cast<double>(prob.data[i]) >= threshold;
    const bool m = mask.data[i] != Scalar(0);
    np += p;
    nm += m;
    inter += (p && m);
  }
  if (np + nm == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(np + nm);
}

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double l1 = 0.0;
  double l2 = 0.0;
  double s1 = 0.0;
  double s2 = 0.0;
  double test_dice = 0.0;
};

struct FoldResult {
  int best_epoch = -1;
  double best_dice = 0.0;
  std::vector<EpochLog> log;
};

struct UncertaintyReport {
  double s1_final = 0.0;  // regression log-uncertainty
  double s2_final = 0.0;  // segmentation log-uncertainty
  double weight_ratio = 1.0;  // segmentation weight / regression weight
};

inline UncertaintyReport learned_uncertainty_report(const std::vector<EpochLog>& log, LossForm form) {
  if (log.empty()) throw std::invalid_argument("learned_uncertainty_report: empty training log");
  UncertaintyReport r;
  r.s1_final = log.back().s1;
  r.s2_final = log.back().s2;
  r.weight_ratio = effective_weight_ratio({r.s1_final, r.s2_final, form});
  return r;
}

template <typename Scalar>
double mean_test_dice(const MultiTaskUNet<Scalar>& net, const std::vector<TrainSlice<Scalar>>& slices) {
  if (slices.empty()) return 0.0;
  double sum = 0;
  for (const auto& s : slices) {
    Tape<Scalar> tape;
    auto bound = net.bind(tape, false);
    auto out = net.forward(tape, bound, s.image);
    sum += slice_dice(tape.value(out.seg_prob), s.mask);
  }
  return sum / static_cast<double>(slices.size());
}

struct FoldPaths {
  std::filesystem::path log;
  std::filesystem::path best;
  std::filesystem::path last;
};

inline FoldPaths fold_paths(const std::filesystem::path& out_dir, bool multi_task, int fold_id) {
  const std::string stem = std::string(multi_task ? "mtn" : "unet") + "_fold" + std::to_string(fold_id);
  return {out_dir / (stem + ".log.jsonl"), out_dir / (stem + "_best.ckpt"), out_dir / (stem + "_last.ckpt")};
}

/// One fold of the training protocol: RMSProp on the joint loss (multi-task)
/// or on cross-entropy alone (baseline), learning rate decayed per epoch,
/// the checkpoint with the best selection Dice kept, per-epoch JSONL log.
template <typename Scalar>
FoldResult train_fold(const std::vector<TrainSlice<Scalar>>& train, const std::vector<TrainSlice<Scalar>>& test,
                      const TrainConfig& cfg, bool multi_task, int fold_id, const std::filesystem::path& out_dir,
                      bool resume = false) {
  cfg.validate();
  if (train.empty()) throw std::invalid_argument("train_fold: empty training set");
  std::filesystem::create_directories(out_dir);
  const FoldPaths paths = fold_paths(out_dir, multi_task, fold_id);

  auto net = MultiTaskUNet<Scalar>::build(cfg.net, multi_task);
  std::vector<Tensor<Scalar>> vstate;
  for (const auto& p : net.parameters()) vstate.push_back(Tensor<Scalar>(p.shape));

  CheckpointMeta meta;
  meta.train_seed = cfg.seed;
  meta.fold = fold_id;
  meta.target_spacing_mm = cfg.preprocess.target_spacing_mm;
  meta.crop_size = cfg.preprocess.size;
  meta.loss_form = to_string(cfg.loss_form);

  FoldResult result;
  int start_epoch = 0;
  if (resume && std::filesystem::exists(paths.last)) {
    auto loaded = load_checkpoint<Scalar>(paths.last);
    if (!loaded.meta.has_opt_state) throw std::runtime_error("train_fold: resume checkpoint has no optimizer state");
    net = std::move(loaded.net);
    vstate = std::move(loaded.opt_state);
    start_epoch = loaded.meta.epoch + 1;
    result.best_dice = loaded.meta.best_dice;
    if (std::filesystem::exists(paths.best)) result.best_epoch = load_checkpoint<Scalar>(paths.best).meta.epoch;
  } else {
    net.init_kaiming_uniform(derive_seed(cfg.seed, {static_cast<std::uint64_t>(fold_id)}));
    std::ofstream trunc(paths.log, std::ios::trunc);  // fresh log
  }

  std::ofstream log_os(paths.log, std::ios::app);
  if (!log_os) throw std::runtime_error("train_fold: cannot write log " + paths.log.string());

  std::vector<std::size_t> order(train.size());

  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at_epoch(cfg, epoch);
    // shuffle the identity permutation with a per-epoch stream, so epoch e's
    // batch order does not depend on earlier epochs (resume-safe)
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng = derive_rng(cfg.seed, {streams::kShuffle, static_cast<std::uint64_t>(fold_id),
                                            static_cast<std::uint64_t>(epoch)});
    for (std::size_t i = order.size() - 1; i > 0; --i)
      std::swap(order[i], order[static_cast<std::size_t>(shuffle_rng.uniform_int(static_cast<Index>(i) + 1))]);

    double epoch_l1 = 0, epoch_l2 = 0;
    int n_batches = 0;
    for (std::size_t batch_start = 0; batch_start < order.size(); batch_start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t batch_end = std::min(order.size(), batch_start + static_cast<std::size_t>(cfg.batch_size));
      const double bsize = static_cast<double>(batch_end - batch_start);
      try {
        Tape<Scalar> tape;
        auto bound = net.bind(tape, true);
        Var<Scalar> sum_ce, sum_mad;
        for (std::size_t bi = batch_start; bi < batch_end; ++bi) {
          const TrainSlice<Scalar>& s = train[order[bi]];
          auto out = net.forward_var(tape, bound, tape.constant(s.image));
          Var<Scalar> ce = binary_cross_entropy(out.seg_prob, tape.constant(s.mask));
          sum_ce = (bi == batch_start) ? ce : add(sum_ce, ce);
          if (multi_task) {
            Var<Scalar> mad = abs(add_scalar(out.area, -s.area_target));
            sum_mad = (bi == batch_start) ? mad : add(sum_mad, mad);
          }
        }
        Var<Scalar> l2 = scale(sum_ce, 1.0 / bsize);
        Var<Scalar> total = l2;
        double l1_value = 0;
        if (multi_task) {
          Var<Scalar> l1 = scale(sum_mad, 1.0 / bsize);
          total = joint_loss_var(l1, l2, bound.s1, bound.s2, cfg.loss_form);
          l1_value = static_cast<double>(tape.value(l1).item());
        }
        tape.backward(total);
        epoch_l1 += l1_value;
        epoch_l2 += static_cast<double>(tape.value(l2).item());
        ++n_batches;
        for (std::size_t i = 0; i < net.parameters().size(); ++i)
          rmsprop_step(net.parameters()[i], tape.grad(bound.params[i]), vstate[i], lr, cfg.rmsprop);
      } catch (const std::runtime_error& e) {
        std::string slices;
        for (std::size_t bi = batch_start; bi < batch_end; ++bi) {
          const auto& s = train[order[bi]];
          slices += " " + s.patient_id + "/ph" + std::to_string(s.phase_index) + "/sl" + std::to_string(s.slice_index);
        }
        throw std::runtime_error("train_fold: aborted at epoch " + std::to_string(epoch) + ", batch " +
                                 std::to_string(n_batches) + " (slices:" + slices + "): " + e.what());
      }
    }

    EpochLog entry;
    entry.epoch = epoch;
    entry.lr = lr;
    entry.l1 = n_batches ? epoch_l1 / n_batches : 0.0;
    entry.l2 = n_batches ? epoch_l2 / n_batches : 0.0;
    entry.s1 = net.s1();
    entry.s2 = net.s2();
    entry.test_dice = mean_test_dice(net, test);
    result.log.push_back(entry);

    nlohmann::json jl = {{"epoch", entry.epoch}, {"lr", entry.lr},       {"l1", entry.l1},
                         {"l2", entry.l2},       {"s1", entry.s1},       {"s2", entry.s2},
                         {"test_dice", entry.test_dice}};
    log_os << jl.dump() << '\n';
    log_os.flush();

    const double selection_dice = cfg.select_on_train ? mean_test_dice(net, train) : entry.test_dice;
    if (result.best_epoch < 0 || selection_dice > result.best_dice) {
      result.best_dice = selection_dice;
      result.best_epoch = epoch;
      meta.epoch = epoch;
      meta.best_dice = selection_dice;
      save_checkpoint(paths.best, meta, net);
    }
    meta.epoch = epoch;
    meta.best_dice = result.best_dice;
    save_checkpoint(paths.last, meta, net, &vstate);
  }
  return result;
}

/// Trains every configured fold; fold splits are derived from the dataset's
/// patient list and the run seed, so evaluation can reconstruct them.
template <typename Scalar>
std::vector<FoldResult> cross_validate(const Dataset& ds, const TrainConfig& cfg, bool multi_task,
                                       const std::filesystem::path& out_dir, bool resume = false) {
  cfg.validate();
  auto folds = split_folds(ds.patient_ids(), cfg.seed);
  std::vector<FoldResult> results;
  for (int f : cfg.folds) {
    const FoldSplit& fold = folds[static_cast<std::size_t>(f)];
    // patient-level disjointness is a hard precondition of the protocol
    for (const auto& p : fold.test)
      if (std::find(fold.train.begin(), fold.train.end(), p) != fold.train.end())
        throw std::logic_error("cross_validate: patient " + p + " leaks between train and test");
    PreparedFold<Scalar> prepared = prepare_fold<Scalar>(ds, fold, cfg);
    results.push_back(train_fold<Scalar>(prepared.train, prepared.test, cfg, multi_task, f, out_dir, resume));
  }
  return results;
}

}  // namespace mtseg

#endif  // MTSEG_TRAINER_HPP
