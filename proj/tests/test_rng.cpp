#include <doctest.h>

#include <cmath>
#include <vector>

#include "smelt/rng.hpp"

using namespace smelt;

TEST_CASE("identical seeds give identical streams") {
  RngStream a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("child streams are independent of draw order") {
  RngStream root(7);
  auto s1 = root.child("episode", 3);
  auto s2 = root.child("episode", 4);
  uint64_t first_of_s2 = s2.next_u64();
  // Drawing from s1 must not affect s2's sequence.
  RngStream root2(7);
  auto t1 = root2.child("episode", 3);
  for (int i = 0; i < 10; ++i) (void)t1.next_u64();
  auto t2 = root2.child("episode", 4);
  CHECK(t2.next_u64() == first_of_s2);
}

TEST_CASE("uniform stays in range and covers it") {
  RngStream r(1);
  double lo = 1.0, hi = 0.0;
  for (int i = 0; i < 10000; ++i) {
    double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    lo = std::min(lo, u);
    hi = std::max(hi, u);
  }
  CHECK(lo < 0.01);
  CHECK(hi > 0.99);
}

TEST_CASE("uniform_open avoids endpoints") {
  RngStream r(2);
  for (int i = 0; i < 1000; ++i) {
    double u = r.uniform_open(1e-6);
    CHECK(u >= 1e-6);
    CHECK(u <= 1.0 - 1e-6);
  }
}

TEST_CASE("normal moments are sane") {
  RngStream r(3);
  int n = 200000;
  double s = 0, s2 = 0;
  for (int i = 0; i < n; ++i) {
    double x = r.normal();
    s += x;
    s2 += x * x;
  }
  double mean = s / n;
  double var = s2 / n - mean * mean;
  CHECK(std::fabs(mean) < 0.02);
  CHECK(std::fabs(var - 1.0) < 0.03);
}

TEST_CASE("different tags decorrelate") {
  RngStream root(9);
  auto a = root.child("gumbel", 0, 0);
  auto b = root.child("gate", 0, 0);
  CHECK(a.next_u64() != b.next_u64());
}
