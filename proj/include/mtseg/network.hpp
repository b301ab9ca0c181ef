#ifndef MTSEG_NETWORK_HPP
#define MTSEG_NETWORK_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "mtseg/ops.hpp"
#include "mtseg/rng.hpp"
#include "mtseg/tape.hpp"

namespace mtseg {

/// Topology knobs for the two-headed U-Net. Channel counts double with every
/// down-sampling stage starting from base_channels.
struct NetConfig {
  int input_size = 192;
  int depth = 4;
  int base_channels = 64;
  std::uint64_t seed = 0;

  void validate() const {
    if (depth < 1) throw std::invalid_argument("NetConfig: depth must be >= 1, got " + std::to_string(depth));
    if (base_channels < 1)
      throw std::invalid_argument("NetConfig: base_channels must be >= 1, got " + std::to_string(base_channels));
    if (input_size < 1)
      throw std::invalid_argument("NetConfig: input_size must be >= 1, got " + std::to_string(input_size));
    if (input_size % (1 << depth) != 0)
      throw std::invalid_argument("NetConfig: input_size " + std::to_string(input_size) +
                                  " not divisible by 2^depth = " + std::to_string(1 << depth));
    if (input_size % 4 != 0)
      throw std::invalid_argument("NetConfig: input_size " + std::to_string(input_size) +
                                  " not divisible by 4 (quarter-size pooling in the regression head)");
  }

  bool operator==(const NetConfig&) const = default;
};

/// Encoder-decoder segmentation network with an optional area-regression
/// branch. The two paths share everything up to and including the last
/// up-sampling + skip concatenation; from there the segmentation path runs
/// two 3x3 conv+relu blocks and a 1x1 conv + sigmoid, while the regression
/// branch runs one 3x3 conv+relu, max-pools the map to a quarter of its
/// spatial size, and applies a fully-connected layer to produce one scalar.
/// Two extra scalar parameters hold the log-uncertainties of the regression
/// (s1) and segmentation (s2) tasks.
template <typename Scalar>
class MultiTaskUNet {
 public:
  struct ParamInfo {
    std::string name;
    Index fan_in;   // 0 for biases and log-uncertainties: initialized to zero
    bool is_weight;  // drawn from the Kaiming uniform distribution
  };

  static MultiTaskUNet build(const NetConfig& cfg, bool multi_task = true) {
    cfg.validate();
    MultiTaskUNet net;
    net.cfg_ = cfg;
    net.multi_task_ = multi_task;

    const Index s = cfg.input_size;
    std::vector<Index> ch(static_cast<std::size_t>(cfg.depth) + 1);
    for (int d = 0; d <= cfg.depth; ++d) ch[static_cast<std::size_t>(d)] = Index(cfg.base_channels) << d;

    auto conv_pair = [&](const std::string& prefix, Index c_in, Index c_mid) {
      net.add_conv(prefix + ".conv1", c_mid, c_in, 3);
      net.add_conv(prefix + ".conv2", c_mid, c_mid, 3);
    };

    Index c_prev = 1;
    for (int d = 0; d < cfg.depth; ++d) {
      conv_pair("enc" + std::to_string(d), c_prev, ch[static_cast<std::size_t>(d)]);
      c_prev = ch[static_cast<std::size_t>(d)];
    }
    conv_pair("bottleneck", c_prev, ch[static_cast<std::size_t>(cfg.depth)]);

    for (int d = cfg.depth - 1; d >= 0; --d) {
      const Index cd = ch[static_cast<std::size_t>(d)];
      net.add_tconv("dec" + std::to_string(d) + ".up", ch[static_cast<std::size_t>(d) + 1], cd);
      if (d > 0) conv_pair("dec" + std::to_string(d), 2 * cd, cd);
    }
    // segmentation path after the split
    conv_pair("seg", 2 * ch[0], ch[0]);
    net.add_conv("seg.out", 1, ch[0], 1);

    if (multi_task) {
      net.add_conv("reg.conv", Index(cfg.base_channels), 2 * ch[0], 3);
      const Index flat = Index(cfg.base_channels) * (s / 4) * (s / 4);
      net.add_linear("reg.fc", 1, flat);
      net.s1_index_ = net.add_scalar_param("s1");
      net.s2_index_ = net.add_scalar_param("s2");
    }
    return net;
  }

  /// Kaiming uniform: weights ~ U(-b, b) with b = sqrt(6 / fan_in); biases
  /// and log-uncertainties zero. One stream, consumed in declaration order,
  /// so nets sharing a prefix of the parameter list (multi-task vs single
  /// task) agree on the shared weights for the same seed.
  void init_kaiming_uniform(std::uint64_t seed) {
    Rng rng = derive_rng(seed, {streams::kInit});
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (info_[i].is_weight) {
        const double bound = std::sqrt(6.0 / static_cast<double>(info_[i].fan_in));
        for (Index j = 0; j < params_[i].size(); ++j) params_[i].data[j] = Scalar(rng.uniform(-bound, bound));
      } else {
        params_[i].data.setZero();
      }
    }
  }

  struct Bound {
    std::vector<Var<Scalar>> params;
    Var<Scalar> s1;  // invalid for single-task nets
    Var<Scalar> s2;
  };

  Bound bind(Tape<Scalar>& tape, bool requires_grad = true) const {
    Bound b;
    b.params.reserve(params_.size());
    for (const auto& p : params_) {
      Tensor<Scalar> copy = p;
      copy.requires_grad = requires_grad;
      b.params.push_back(tape.leaf(std::move(copy)));
    }
    if (multi_task_) {
      b.s1 = b.params[static_cast<std::size_t>(s1_index_)];
      b.s2 = b.params[static_cast<std::size_t>(s2_index_)];
    }
    return b;
  }

  struct Output {
    Var<Scalar> seg_prob;
    Var<Scalar> area;  // invalid for single-task nets
  };

  Output forward(Tape<Scalar>& tape, const Bound& bound, Tensor<Scalar> image) const {
    if (image.shape != Shape{1, cfg_.input_size, cfg_.input_size})
      throw std::invalid_argument("forward: expected image of shape [1," + std::to_string(cfg_.input_size) + "," +
                                  std::to_string(cfg_.input_size) + "], got " + shape_str(image.shape));
    return forward_var(tape, bound, tape.constant(std::move(image)));
  }

  Output forward_var(Tape<Scalar>& tape, const Bound& bound, Var<Scalar> image) const {
    auto p = [&](const std::string& name) { return bound.params[static_cast<std::size_t>(index_of(name))]; };
    auto block = [&](Var<Scalar> h, const std::string& prefix) {
      h = relu(conv2d(h, p(prefix + ".conv1.w"), p(prefix + ".conv1.b"), 1));
      return relu(conv2d(h, p(prefix + ".conv2.w"), p(prefix + ".conv2.b"), 1));
    };

    std::vector<Var<Scalar>> skips;
    Var<Scalar> h = image;
    for (int d = 0; d < cfg_.depth; ++d) {
      h = block(h, "enc" + std::to_string(d));
      skips.push_back(h);
      h = max_pool2d(h, 2);
    }
    h = block(h, "bottleneck");
    for (int d = cfg_.depth - 1; d >= 1; --d) {
      h = transposed_conv2d(h, p("dec" + std::to_string(d) + ".up.w"));
      h = concat_channels(skips[static_cast<std::size_t>(d)], h);
      h = block(h, "dec" + std::to_string(d));
    }
    h = transposed_conv2d(h, p("dec0.up.w"));
    Var<Scalar> cat0 = concat_channels(skips[0], h);  // split point

    Var<Scalar> s = block(cat0, "seg");
    Output out;
    out.seg_prob = sigmoid(conv2d(s, p("seg.out.w"), p("seg.out.b"), 0));

    if (multi_task_) {
      Var<Scalar> r = relu(conv2d(cat0, p("reg.conv.w"), p("reg.conv.b"), 1));
      r = max_pool2d(r, 4);
      out.area = linear(r, p("reg.fc.w"), p("reg.fc.b"));
    }
    return out;
  }

  const NetConfig& config() const { return cfg_; }
  bool multi_task() const { return multi_task_; }
  std::size_t num_params() const { return params_.size(); }
  Index num_scalars() const {
    Index n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
  }
  std::vector<Tensor<Scalar>>& parameters() { return params_; }
  const std::vector<Tensor<Scalar>>& parameters() const { return params_; }
  const std::vector<ParamInfo>& param_info() const { return info_; }
  int s1_index() const { return s1_index_; }
  int s2_index() const { return s2_index_; }
  double s1() const { return multi_task_ ? static_cast<double>(params_[static_cast<std::size_t>(s1_index_)].data[0]) : 0.0; }
  double s2() const { return multi_task_ ? static_cast<double>(params_[static_cast<std::size_t>(s2_index_)].data[0]) : 0.0; }
  void set_s(double s1v, double s2v) {
    if (!multi_task_) throw std::logic_error("set_s: single-task net has no log-uncertainties");
    params_[static_cast<std::size_t>(s1_index_)].data[0] = Scalar(s1v);
    params_[static_cast<std::size_t>(s2_index_)].data[0] = Scalar(s2v);
  }

  Index index_of(const std::string& name) const {
    for (std::size_t i = 0; i < info_.size(); ++i)
      if (info_[i].name == name) return static_cast<Index>(i);
    throw std::logic_error("MultiTaskUNet: unknown parameter " + name);
  }

 private:
  void add_conv(const std::string& name, Index c_out, Index c_in, Index k) {
    params_.push_back(Tensor<Scalar>({c_out, c_in, k, k}));
    info_.push_back({name + ".w", c_in * k * k, true});
    params_.push_back(Tensor<Scalar>({c_out}));
    info_.push_back({name + ".b", 0, false});
  }
  void add_tconv(const std::string& name, Index c_in, Index c_out) {
    params_.push_back(Tensor<Scalar>({c_in, c_out, 2, 2}));
    info_.push_back({name + ".w", c_in * 4, true});
  }
  void add_linear(const std::string& name, Index fan_out, Index fan_in) {
    params_.push_back(Tensor<Scalar>({fan_out, fan_in}));
    info_.push_back({name + ".w", fan_in, true});
    params_.push_back(Tensor<Scalar>({fan_out}));
    info_.push_back({name + ".b", 0, false});
  }
  int add_scalar_param(const std::string& name) {
    params_.push_back(Tensor<Scalar>({1}));
    info_.push_back({name, 0, false});
    return static_cast<int>(params_.size() - 1);
  }

  NetConfig cfg_;
  bool multi_task_ = true;
  std::vector<Tensor<Scalar>> params_;
  std::vector<ParamInfo> info_;
  int s1_index_ = -1;
  int s2_index_ = -1;
};

template <typename Scalar>
MultiTaskUNet<Scalar> build_single_task(const NetConfig& cfg) {
  return MultiTaskUNet<Scalar>::build(cfg, /*multi_task=*/false);
}

}  // namespace mtseg

#endif  // MTSEG_NETWORK_HPP
