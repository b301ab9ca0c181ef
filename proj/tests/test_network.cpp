#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mtseg/gradcheck.hpp"
#include "mtseg/loss.hpp"
#include "mtseg/network.hpp"
#include "mtseg/rng.hpp"

using namespace mtseg;

namespace {

Tensor<double> random_image(int s, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> img({1, s, s});
  for (Index i = 0; i < img.size(); ++i) img.data[i] = rng.uniform(0.0, 1.0);
  return img;
}

}  // namespace

TEST_CASE("config validation names the violated constraint") {
  const NetConfig bad_div{.input_size = 40, .depth = 4, .base_channels = 8};
  CHECK_THROWS_WITH_AS(bad_div.validate(), doctest::Contains("2^depth"), std::invalid_argument);
  const NetConfig bad_depth{.input_size = 32, .depth = 0, .base_channels = 8};
  CHECK_THROWS_WITH_AS(bad_depth.validate(), doctest::Contains("depth"), std::invalid_argument);
  const NetConfig bad_base{.input_size = 32, .depth = 2, .base_channels = 0};
  CHECK_THROWS_WITH_AS(bad_base.validate(), doctest::Contains("base_channels"), std::invalid_argument);
  const NetConfig ok{.input_size = 32, .depth = 2, .base_channels = 4};
  CHECK_NOTHROW(ok.validate());
}

TEST_CASE("toy net produces a full-size probability map and one finite area") {
  NetConfig cfg{.input_size = 32, .depth = 2, .base_channels = 4, .seed = 1};
  auto net = MultiTaskUNet<double>::build(cfg);
  net.init_kaiming_uniform(cfg.seed);
  Tape<double> tape;
  auto bound = net.bind(tape, /*requires_grad=*/false);
  auto out = net.forward(tape, bound, random_image(32, 2));
  const auto& seg = tape.value(out.seg_prob);
  REQUIRE(seg.shape == Shape{1, 32, 32});
  for (Index i = 0; i < seg.size(); ++i) {
    CHECK(seg.data[i] > 0.0);
    CHECK(seg.data[i] < 1.0);
  }
  REQUIRE(tape.value(out.area).size() == 1);
  CHECK(std::isfinite(tape.value(out.area).item()));
}

TEST_CASE("paper-scale config builds") {
  NetConfig cfg{.input_size = 192, .depth = 4, .base_channels = 64, .seed = 0};
  auto net = MultiTaskUNet<double>::build(cfg);
  CHECK(net.num_params() > 0);
  CHECK(net.s1() == 0.0);
  CHECK(net.s2() == 0.0);
  // initial joint-loss weights are exp(0) = 1 for both tasks
  LossState st{net.s1(), net.s2(), LossForm::precision};
  CHECK(task_weight_1(st) == 1.0);
  CHECK(task_weight_2(st) == 1.0);
}

TEST_CASE("zero image at a fresh init maps to a constant 0.5 probability map") {
  // biases start at zero, so a zero image keeps every pre-activation at zero
  NetConfig cfg{.input_size = 32, .depth = 2, .base_channels = 4, .seed = 3};
  auto net = MultiTaskUNet<double>::build(cfg);
  net.init_kaiming_uniform(cfg.seed);
  Tape<double> tape;
  auto bound = net.bind(tape, false);
  auto out = net.forward(tape, bound, Tensor<double>({1, 32, 32}));
  const auto& seg = tape.value(out.seg_prob);
  for (Index i = 0; i < seg.size(); ++i) {
    CHECK(seg.data[i] == 0.5);
    CHECK(seg.data[i] > 0.0);
    CHECK(seg.data[i] < 1.0);
  }
}

TEST_CASE("depth-3 topology keeps skip and upsampled extents aligned") {
  NetConfig cfg{.input_size = 32, .depth = 3, .base_channels = 4, .seed = 8};
  auto net = MultiTaskUNet<double>::build(cfg);
  net.init_kaiming_uniform(cfg.seed);
  Tape<double> tape;
  auto bound = net.bind(tape, false);
  auto out = net.forward(tape, bound, random_image(32, 12));
  CHECK(tape.value(out.seg_prob).shape == Shape{1, 32, 32});
  CHECK(std::isfinite(tape.value(out.area).item()));
}

TEST_CASE("wrong input size is rejected") {
  NetConfig cfg{.input_size = 32, .depth = 2, .base_channels = 4, .seed = 1};
  auto net = MultiTaskUNet<double>::build(cfg);
  Tape<double> tape;
  auto bound = net.bind(tape, false);
  CHECK_THROWS_AS(net.forward(tape, bound, random_image(16, 3)), std::invalid_argument);
}

TEST_CASE("forward is deterministic") {
  NetConfig cfg{.input_size = 32, .depth = 2, .base_channels = 4, .seed = 5};
  auto net = MultiTaskUNet<double>::build(cfg);
  net.init_kaiming_uniform(cfg.seed);
  Tensor<double> img = random_image(32, 9);
  auto run = [&]() {
    Tape<double> tape;
    auto bound = net.bind(tape, false);
    auto out = net.forward(tape, bound, img);
    return std::pair<Tensor<double>, double>(tape.value(out.seg_prob), tape.value(out.area).item());
  };
  auto [seg_a, area_a] = run();
  auto [seg_b, area_b] = run();
  CHECK(area_a == area_b);
  for (Index i = 0; i < seg_a.size(); ++i) CHECK(seg_a.data[i] == seg_b.data[i]);
}

TEST_CASE("kaiming uniform: bound arithmetic, reproducibility, moments") {
  // fan_in 6 -> bound exactly 1
  CHECK(std::sqrt(6.0 / 6.0) == 1.0);

  NetConfig cfg{.input_size = 32, .depth = 2, .base_channels = 4, .seed = 7};
  auto a = MultiTaskUNet<double>::build(cfg);
  auto b = MultiTaskUNet<double>::build(cfg);
  a.init_kaiming_uniform(123);
  b.init_kaiming_uniform(123);
  for (std::size_t i = 0; i < a.num_params(); ++i)
    for (Index j = 0; j < a.parameters()[i].size(); ++j)
      CHECK(a.parameters()[i].data[j] == b.parameters()[i].data[j]);

  // all weights within their bound; biases and log-uncertainties zero
  for (std::size_t i = 0; i < a.num_params(); ++i) {
    const auto& info = a.param_info()[i];
    if (info.is_weight) {
      const double bound = std::sqrt(6.0 / static_cast<double>(info.fan_in));
      for (Index j = 0; j < a.parameters()[i].size(); ++j) {
        CHECK(a.parameters()[i].data[j] >= -bound);
        CHECK(a.parameters()[i].data[j] <= bound);
      }
    } else {
      for (Index j = 0; j < a.parameters()[i].size(); ++j) CHECK(a.parameters()[i].data[j] == 0.0);
    }
  }

  // sample variance of a large layer close to bound^2 / 3
  NetConfig big{.input_size = 64, .depth = 2, .base_channels = 48, .seed = 0};
  auto net = MultiTaskUNet<double>::build(big);
  net.init_kaiming_uniform(99);
  const Index w_idx = net.index_of("bottleneck.conv2.w");  // 192*192*9 > 1e5 draws
  const auto& w = net.parameters()[static_cast<std::size_t>(w_idx)];
  REQUIRE(w.size() >= 100000);
  const double mean = w.data.mean();
  const double var = (w.data - mean).square().sum() / static_cast<double>(w.size());
  const double bound = std::sqrt(6.0 / static_cast<double>(net.param_info()[static_cast<std::size_t>(w_idx)].fan_in));
  CHECK(var == doctest::Approx(bound * bound / 3.0).epsilon(0.05));
}

TEST_CASE("single-task variant: fewer parameters, same shared init, seg-only output") {
  NetConfig cfg{.input_size = 32, .depth = 2, .base_channels = 4, .seed = 11};
  auto mtn = MultiTaskUNet<double>::build(cfg);
  auto unet = build_single_task<double>(cfg);
  CHECK(unet.num_scalars() < mtn.num_scalars());
  CHECK(!unet.multi_task());

  mtn.init_kaiming_uniform(202);
  unet.init_kaiming_uniform(202);
  // the single-task parameter list is a prefix of the multi-task one
  for (std::size_t i = 0; i < unet.num_params(); ++i) {
    CHECK(unet.param_info()[i].name == mtn.param_info()[i].name);
    for (Index j = 0; j < unet.parameters()[i].size(); ++j)
      CHECK(unet.parameters()[i].data[j] == mtn.parameters()[i].data[j]);
  }

  Tape<double> tape;
  auto bound = unet.bind(tape, false);
  auto out = unet.forward(tape, bound, random_image(32, 4));
  CHECK(tape.value(out.seg_prob).shape == Shape{1, 32, 32});
  CHECK(!out.area.valid());
}

TEST_CASE("regression head sees a quarter-size feature map") {
  // fc fan_in must be base * (S/4)^2
  NetConfig cfg{.input_size = 32, .depth = 3, .base_channels = 4, .seed = 0};
  auto net = MultiTaskUNet<double>::build(cfg);
  const auto& fc = net.parameters()[static_cast<std::size_t>(net.index_of("reg.fc.w"))];
  CHECK(fc.shape == Shape{1, 4 * 8 * 8});
}

TEST_CASE("one backward pass of the joint loss reaches s1 and s2") {
  NetConfig cfg{.input_size = 16, .depth = 2, .base_channels = 2, .seed = 21};
  auto net = MultiTaskUNet<double>::build(cfg);
  net.init_kaiming_uniform(cfg.seed);

  Tensor<double> mask({1, 16, 16});
  for (Index i = 0; i < mask.size(); ++i) mask.data[i] = (i % 5 == 0) ? 1.0 : 0.0;

  Tape<double> tape;
  auto bound = net.bind(tape, true);
  auto out = net.forward(tape, bound, random_image(16, 6));
  Var<double> l2 = binary_cross_entropy(out.seg_prob, tape.constant(mask));
  Var<double> l1 = abs(add_scalar(out.area, -120.0));
  Var<double> total = joint_loss_var(l1, l2, bound.s1, bound.s2, LossForm::precision);
  tape.backward(total);

  CHECK(tape.grad(bound.s1)[0] != 0.0);
  CHECK(tape.grad(bound.s2)[0] != 0.0);
  // every parameter received a gradient buffer
  for (const auto& v : bound.params) CHECK(tape.has_grad(v));
}

TEST_CASE("toy multi-task net: analytic gradients match finite differences") {
  NetConfig cfg{.input_size = 8, .depth = 1, .base_channels = 2, .seed = 31};
  auto net = MultiTaskUNet<double>::build(cfg);
  net.init_kaiming_uniform(cfg.seed);
  // Check at a generic parameter point: with zero biases, upstream dead-relu
  // regions make some pre-activations exactly zero and the difference
  // quotient straddles the kink.
  Rng prng(derive_seed(cfg.seed, {0xb1a5}));
  for (std::size_t i = 0; i < net.num_params(); ++i)
    if (!net.param_info()[i].is_weight)
      for (Index j = 0; j < net.parameters()[i].size(); ++j)
        net.parameters()[i].data[j] = prng.uniform(0.05, 0.25) * (prng.uniform() < 0.5 ? -1.0 : 1.0);

  Tensor<double> img = random_image(8, 7);
  Tensor<double> mask({1, 8, 8});
  Rng mrng(8);
  for (Index i = 0; i < mask.size(); ++i) mask.data[i] = mrng.uniform() < 0.4 ? 1.0 : 0.0;
  const double target_area = 42.0;

  auto loss_value = [&]() {
    Tape<double> tape;
    auto bound = net.bind(tape, false);
    auto out = net.forward(tape, bound, img);
    Var<double> l2 = binary_cross_entropy(out.seg_prob, tape.constant(mask));
    Var<double> l1 = abs(add_scalar(out.area, -target_area));
    return tape.value(joint_loss_var(l1, l2, bound.s1, bound.s2, LossForm::precision)).item();
  };

  Tape<double> tape;
  auto bound = net.bind(tape, true);
  auto out = net.forward(tape, bound, img);
  Var<double> l2 = binary_cross_entropy(out.seg_prob, tape.constant(mask));
  Var<double> l1 = abs(add_scalar(out.area, -target_area));
  tape.backward(joint_loss_var(l1, l2, bound.s1, bound.s2, LossForm::precision));

  std::vector<Tensor<double>*> ptrs;
  for (auto& p : net.parameters()) ptrs.push_back(&p);
  auto numeric = finite_diff_grad(loss_value, ptrs, 1e-5);

  double worst = 0.0;
  for (std::size_t i = 0; i < ptrs.size(); ++i) {
    Tensor<double> g(ptrs[i]->shape);
    g.data = tape.grad(bound.params[i]);
    worst = std::max(worst, max_rel_error(g, numeric[i]));
  }
  CHECK(worst < 1e-4);
}
