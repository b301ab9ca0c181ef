#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <array>
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <sstream>

#include "mtseg/rng.hpp"
#include "mtseg/tensor.hpp"

using namespace mtseg;

TEST_CASE("shape/data consistency is enforced") {
  Tensor<double> t({2, 3});
  CHECK(t.size() == 6);
  CHECK(t.rank() == 2);
  CHECK_THROWS_AS(Tensor<double>({2, 3}, Tensor<double>::Storage::Zero(5)), std::invalid_argument);
  CHECK_THROWS_AS(Tensor<double>({-1, 3}), std::invalid_argument);
}

TEST_CASE("zero extents are allowed and size zero") {
  Tensor<double> t({0, 4, 4});
  CHECK(t.size() == 0);
}

TEST_CASE("grad slot matches data shape") {
  Tensor<double> t({4});
  CHECK(!t.has_grad());
  t.ensure_grad();
  CHECK(t.has_grad());
  CHECK(t.grad.size() == t.data.size());
}

TEST_CASE("item() only on scalars") {
  CHECK(Tensor<double>::scalar(2.5).item() == 2.5);
  CHECK_THROWS_AS(Tensor<double>({2}).item(), std::invalid_argument);
}

TEST_CASE("check_finite rejects inf and nan") {
  Tensor<double> t = Tensor<double>::from({2}, {1.0, 2.0});
  CHECK_NOTHROW(check_finite(t, "op"));
  t.data[1] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(check_finite(t, "op"), std::runtime_error);
  t.data[1] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(check_finite(t, "op"), std::runtime_error);
}

TEST_CASE("TNSR round-trip preserves shape and bits") {
  Rng rng(7);
  Tensor<double> t({3, 4, 5});
  for (Index i = 0; i < t.size(); ++i) t.data[i] = rng.normal();
  std::stringstream ss;
  write_tnsr(ss, t);
  Tensor<double> back = read_tnsr(ss);
  CHECK(back.shape == t.shape);
  for (Index i = 0; i < t.size(); ++i) CHECK(back.data[i] == t.data[i]);
}

TEST_CASE("TNSR header format") {
  Tensor<double> t = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
  std::stringstream ss;
  write_tnsr(ss, t);
  std::string header;
  std::getline(ss, header);
  CHECK(header == "TNSR v1 2 2 2");
}

TEST_CASE("TNSR float tensors are widened to 64-bit on disk") {
  Tensor<float> t = Tensor<float>::from({3}, {0.5f, -1.25f, 3.0f});
  std::stringstream ss;
  write_tnsr(ss, t);
  Tensor<double> back = read_tnsr(ss);
  CHECK(back.data[0] == 0.5);
  CHECK(back.data[1] == -1.25);
  CHECK(back.data[2] == 3.0);
}

TEST_CASE("TNSR rejects bad headers and truncated payloads") {
  {
    std::stringstream ss("BLOB v1 1 3\n");
    CHECK_THROWS_AS(read_tnsr(ss), std::runtime_error);
  }
  {
    std::stringstream ss("TNSR v1 1 3\nxx");
    CHECK_THROWS_AS(read_tnsr(ss), std::runtime_error);
  }
}

TEST_CASE("rng streams are deterministic and substreams independent") {
  Rng a(42), b(42), c(43);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  CHECK(Rng(42).next_u64() != c.next_u64());
  CHECK(derive_seed(1, {2, 3}) != derive_seed(1, {3, 2}));
  CHECK(derive_seed(1, {2, 3}) == derive_seed(1, {2, 3}));
}

TEST_CASE("rng uniform stays in range and has sane mean") {
  Rng rng(5);
  double sum = 0;
  for (int i = 0; i < 20000; ++i) {
    const double u = rng.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    sum += u;
  }
  CHECK(sum / 20000 == doctest::Approx(0.5).epsilon(0.02));
}

TEST_CASE("rng normal moments") {
  Rng rng(9);
  double sum = 0, sq = 0;
  const int n = 50000;
  for (int i = 0; i < n; ++i) {
    const double v = rng.normal();
    sum += v;
    sq += v * v;
  }
  CHECK(std::fabs(sum / n) < 0.02);
  CHECK(sq / n == doctest::Approx(1.0).epsilon(0.03));
}

TEST_CASE("uniform_int covers [0,n)") {
  Rng rng(11);
  std::array<int, 5> counts{};
  for (int i = 0; i < 5000; ++i) {
    const auto v = rng.uniform_int(5);
    REQUIRE(v >= 0);
    REQUIRE(v < 5);
    counts[static_cast<std::size_t>(v)]++;
  }
  for (int c : counts) CHECK(c > 800);
}
