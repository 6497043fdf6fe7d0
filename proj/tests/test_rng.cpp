#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "rrl/rng.hpp"

using rrl::Rng;

TEST_CASE("identical seed and stream reproduce the same sequence") {
  Rng a(42, 7), b(42, 7);
  for (int i = 0; i < 1000; ++i) REQUIRE(a() == b());
}

TEST_CASE("different streams decorrelate") {
  Rng a(42, 0), b(42, 1);
  int agree = 0;
  for (int i = 0; i < 1000; ++i)
    if (a() == b()) ++agree;
  REQUIRE(agree == 0);
}

TEST_CASE("split is deterministic and decorrelated from the parent") {
  const Rng parent(123, 5);
  Rng c1 = parent.split(3);
  Rng c2 = parent.split(3);
  Rng c3 = parent.split(4);
  Rng p = parent;
  bool same_as_sibling = true;
  bool differs_from_other = false;
  bool differs_from_parent = false;
  for (int i = 0; i < 200; ++i) {
    const auto x1 = c1(), x2 = c2(), x3 = c3(), xp = p();
    same_as_sibling = same_as_sibling && (x1 == x2);
    differs_from_other = differs_from_other || (x1 != x3);
    differs_from_parent = differs_from_parent || (x1 != xp);
  }
  REQUIRE(same_as_sibling);
  REQUIRE(differs_from_other);
  REQUIRE(differs_from_parent);
}

TEST_CASE("uniform01 stays in [0,1) with mean near one half") {
  Rng rng(7);
  double sum = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform01();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    sum += u;
  }
  REQUIRE(std::abs(sum / n - 0.5) < 0.01);
}

TEST_CASE("uniform maps to the requested interval") {
  Rng rng(8);
  for (int i = 0; i < 1000; ++i) {
    const double u = rng.uniform(-2.0, 3.0);
    REQUIRE(u >= -2.0);
    REQUIRE(u < 3.0);
  }
}

TEST_CASE("uniform_int covers all buckets evenly") {
  Rng rng(9);
  const int k = 6, n = 60000;
  std::vector<int> counts(k, 0);
  for (int i = 0; i < n; ++i) {
    const int x = rng.uniform_int(k);
    REQUIRE(x >= 0);
    REQUIRE(x < k);
    ++counts[static_cast<std::size_t>(x)];
  }
  for (int c : counts) REQUIRE(std::abs(static_cast<double>(c) / n - 1.0 / k) < 0.01);
}

TEST_CASE("normal moments match the standard law") {
  Rng rng(10);
  const int n = 50000;
  double s1 = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    s1 += x;
    s2 += x * x;
  }
  const double mean = s1 / n;
  const double var = s2 / n - mean * mean;
  REQUIRE(std::abs(mean) < 0.03);
  REQUIRE(std::abs(var - 1.0) < 0.05);
}

TEST_CASE("categorical follows the weights") {
  Rng rng(11);
  const int n = 100000;
  std::vector<int> counts(2, 0);
  for (int i = 0; i < n; ++i) ++counts[static_cast<std::size_t>(rng.categorical({0.3, 0.7}))];
  REQUIRE(std::abs(counts[0] / static_cast<double>(n) - 0.3) < 0.01);
  REQUIRE(std::abs(counts[1] / static_cast<double>(n) - 0.7) < 0.01);
}

TEST_CASE("categorical accepts unnormalized weights") {
  Rng rng(12);
  const int n = 50000;
  std::vector<int> counts(3, 0);
  for (int i = 0; i < n; ++i) ++counts[static_cast<std::size_t>(rng.categorical({2.0, 1.0, 1.0}))];
  REQUIRE(std::abs(counts[0] / static_cast<double>(n) - 0.5) < 0.01);
  REQUIRE(std::abs(counts[1] / static_cast<double>(n) - 0.25) < 0.01);
}

TEST_CASE("categorical rejects empty and all-zero weight sets") {
  Rng rng(13);
  REQUIRE_THROWS_AS(rng.categorical({}), std::invalid_argument);
  REQUIRE_THROWS_AS(rng.categorical({0.0, 0.0}), std::invalid_argument);
}
