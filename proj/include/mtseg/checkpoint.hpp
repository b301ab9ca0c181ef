#ifndef MTSEG_CHECKPOINT_HPP
#define MTSEG_CHECKPOINT_HPP

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtseg/loss.hpp"
#include "mtseg/network.hpp"

namespace mtseg {

/// Checkpoint container: one JSON header line (config, epoch, best Dice,
/// log-uncertainties, provenance needed to rebuild the evaluation split),
/// then the parameter tensors as concatenated TNSR blocks in declaration
/// order. Optimizer state, when present, follows as one more block per
/// parameter.
struct CheckpointMeta {
  NetConfig net;
  bool multi_task = true;
  int epoch = 0;
  double best_dice = 0.0;
  std::optional<double> s1;
  std::optional<double> s2;
  bool has_opt_state = false;
  // provenance for evaluation
  std::uint64_t train_seed = 0;
  int fold = 0;
  double target_spacing_mm = 1.0;
  int crop_size = 0;
  std::string loss_form = "precision";
};

namespace detail {

inline nlohmann::json meta_to_json(const CheckpointMeta& m) {
  nlohmann::json j;
  j["format"] = "mtseg-ckpt";
  j["version"] = 1;
  j["net"] = {{"input_size", m.net.input_size},
              {"depth", m.net.depth},
              {"base_channels", m.net.base_channels},
              {"seed", m.net.seed}};
  j["multi_task"] = m.multi_task;
  j["epoch"] = m.epoch;
  j["best_dice"] = m.best_dice;
  if (m.s1) j["s1"] = *m.s1;
  if (m.s2) j["s2"] = *m.s2;
  j["has_opt_state"] = m.has_opt_state;
  j["train_seed"] = m.train_seed;
  j["fold"] = m.fold;
  j["target_spacing_mm"] = m.target_spacing_mm;
  j["crop_size"] = m.crop_size;
  j["loss_form"] = m.loss_form;
  return j;
}

inline CheckpointMeta meta_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "mtseg-ckpt") throw std::runtime_error("checkpoint: unrecognized header");
  CheckpointMeta m;
  m.net.input_size = j.at("net").at("input_size").get<int>();
  m.net.depth = j.at("net").at("depth").get<int>();
  m.net.base_channels = j.at("net").at("base_channels").get<int>();
  m.net.seed = j.at("net").at("seed").get<std::uint64_t>();
  m.multi_task = j.at("multi_task").get<bool>();
  m.epoch = j.at("epoch").get<int>();
  m.best_dice = j.at("best_dice").get<double>();
  if (j.contains("s1")) m.s1 = j.at("s1").get<double>();
  if (j.contains("s2")) m.s2 = j.at("s2").get<double>();
  m.has_opt_state = j.at("has_opt_state").get<bool>();
  m.train_seed = j.at("train_seed").get<std::uint64_t>();
  m.fold = j.at("fold").get<int>();
  m.target_spacing_mm = j.at("target_spacing_mm").get<double>();
  m.crop_size = j.at("crop_size").get<int>();
  m.loss_form = j.at("loss_form").get<std::string>();
  return m;
}

}  // namespace detail

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, CheckpointMeta meta, const MultiTaskUNet<Scalar>& net,
                     const std::vector<Tensor<Scalar>>* opt_state = nullptr) {
  meta.multi_task = net.multi_task();
  meta.net = net.config();
  if (net.multi_task()) {
    meta.s1 = net.s1();
    meta.s2 = net.s2();
  } else {
    meta.s1.reset();
    meta.s2.reset();
  }
  meta.has_opt_state = opt_state != nullptr;

  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path.string());
  os << detail::meta_to_json(meta).dump() << '\n';
  for (const auto& p : net.parameters()) write_tnsr(os, p);
  if (opt_state) {
    if (opt_state->size() != net.parameters().size())
      throw std::invalid_argument("save_checkpoint: optimizer state count mismatch");
    for (const auto& v : *opt_state) write_tnsr(os, v);
  }
  if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path.string());
}

template <typename Scalar>
struct LoadedCheckpoint {
  CheckpointMeta meta;
  MultiTaskUNet<Scalar> net;
  std::vector<Tensor<Scalar>> opt_state;  // empty unless meta.has_opt_state
};

template <typename Scalar>
LoadedCheckpoint<Scalar> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path.string());
  std::string header;
  if (!std::getline(is, header)) throw std::runtime_error("load_checkpoint: missing header in " + path.string());

  LoadedCheckpoint<Scalar> out;
  out.meta = detail::meta_from_json(nlohmann::json::parse(header));
  out.net = MultiTaskUNet<Scalar>::build(out.meta.net, out.meta.multi_task);
  for (std::size_t i = 0; i < out.net.num_params(); ++i) {
    Tensor<double> t = read_tnsr(is);
    if (t.shape != out.net.parameters()[i].shape)
      throw std::runtime_error("load_checkpoint: tensor " + out.net.param_info()[i].name + " has shape " +
                               shape_str(t.shape) + ", expected " + shape_str(out.net.parameters()[i].shape));
    out.net.parameters()[i].data = t.data.template cast<Scalar>();
  }
  if (out.meta.has_opt_state) {
    for (std::size_t i = 0; i < out.net.num_params(); ++i) {
      Tensor<double> t = read_tnsr(is);
      out.opt_state.push_back(t.template cast<Scalar>());
    }
  }
  return out;
}

}  // namespace mtseg

#endif  // MTSEG_CHECKPOINT_HPP
