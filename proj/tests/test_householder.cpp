#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "deltaproduct/householder.hpp"
#include "deltaproduct/rng.hpp"

using namespace dp;

namespace {

Vec random_unit(Rng& rng, int n) {
  Vec k(n);
  double s = 0.0;
  while (s < 1e-6) {
    for (double& v : k) v = rng.normal();
    s = norm2(k);
  }
  for (double& v : k) v /= s;
  return k;
}

HouseholderProduct random_product(Rng& rng, int n, int n_h, bool gated) {
  HouseholderProduct p;
  for (int j = 0; j < n_h; ++j)
    p.factors.push_back(make_factor(random_unit(rng, n), rng.uniform(0.0, 2.0)));
  p.gate = gated ? rng.uniform(0.0, 1.0) : 1.0;
  return p;
}

}  // namespace

TEST_CASE("make_factor validates unit norm and beta range") {
  REQUIRE_THROWS_AS(make_factor({1.0, 1.0}, 1.0), std::invalid_argument);
  REQUIRE_THROWS_AS(make_factor({1.0, 0.0}, 2.5), std::invalid_argument);
  REQUIRE_THROWS_AS(make_factor({1.0, 0.0}, -0.5), std::invalid_argument);
  REQUIRE_NOTHROW(make_factor({1.0, 0.0}, 2.0));
}

TEST_CASE("beta=2 factor reflects along its key") {
  const auto f = make_factor({1.0, 0.0, 0.0}, 2.0);
  const Vec h{3.0, -1.0, 2.0};
  const Vec r = apply_factor(f, h);
  REQUIRE(r[0] == -3.0);
  REQUIRE(r[1] == -1.0);
  REQUIRE(r[2] == 2.0);
}

TEST_CASE("realize of a single beta=2 e1 factor is diag(-1,1,1)") {
  HouseholderProduct p;
  p.factors.push_back(make_factor({1.0, 0.0, 0.0}, 2.0));
  const Matrix m = realize(p);
  const Matrix want(3, 3, {-1, 0, 0, 0, 1, 0, 0, 0, 1});
  REQUIRE(max_abs_diff(m, want) == 0.0);
}

TEST_CASE("realize applies factor 1 first (factor n_h leftmost)") {
  Rng rng(42);
  const auto f1 = make_factor(random_unit(rng, 4), 1.3);
  const auto f2 = make_factor(random_unit(rng, 4), 0.7);
  HouseholderProduct p1{{f1}, 1.0}, p2{{f2}, 1.0}, both{{f1, f2}, 1.0};
  const Matrix want = matmul(realize(p2), realize(p1));
  REQUIRE(max_abs_diff(realize(both), want) < 1e-14);
}

TEST_CASE("apply_product equals realize times vector") {
  Rng rng(43);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = static_cast<int>(rng.uniform_int(2, 8));
    const auto p = random_product(rng, n, static_cast<int>(rng.uniform_int(1, 4)), true);
    Vec h(n);
    for (double& v : h) v = rng.normal();
    const Vec got = apply_product(p, h);
    const Matrix m = realize(p);
    for (int i = 0; i < n; ++i) {
      double want = 0.0;
      for (int j = 0; j < n; ++j) want += m(i, j) * h[j];
      REQUIRE(got[i] == Catch::Approx(want).margin(1e-12));
    }
  }
}

TEST_CASE("gated products keep operator norm at most one") {
  Rng rng(44);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = static_cast<int>(rng.uniform_int(2, 10));
    const auto p = random_product(rng, n, static_cast<int>(rng.uniform_int(1, 5)), trial % 2 == 0);
    REQUIRE(spectral_norm(realize(p)) <= 1.0 + 1e-9);
  }
}

TEST_CASE("gate scales the realized matrix") {
  HouseholderProduct p;
  p.factors.push_back(make_factor({0.0, 1.0}, 0.0));
  p.gate = 0.25;
  const Matrix m = realize(p);
  REQUIRE(m(0, 0) == 0.25);
  REQUIRE(m(1, 1) == 0.25);
  REQUIRE(m(0, 1) == 0.0);
}

TEST_CASE("same-key collapse formula") {
  // b* = b1 + b2 - b1 b2; two full reflections cancel.
  REQUIRE(collapse_same_key({2.0, 2.0}) == 0.0);
  REQUIRE(collapse_same_key({1.0, 0.7}) == 1.0);
  REQUIRE(collapse_same_key({0.5}) == 0.5);
  // Matches the dense product of same-key factors.
  Rng rng(45);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = static_cast<int>(rng.uniform_int(2, 6));
    const Vec k = random_unit(rng, n);
    std::vector<double> betas;
    HouseholderProduct chain;
    for (int j = 0; j < static_cast<int>(rng.uniform_int(2, 5)); ++j) {
      betas.push_back(rng.uniform(0.0, 2.0));
      chain.factors.push_back(make_factor(k, betas.back()));
    }
    HouseholderProduct single;
    single.factors.push_back({k, collapse_same_key(betas)});
    REQUIRE(max_abs_diff(realize(chain), realize(single)) < 1e-12);
  }
}

TEST_CASE("orthogonal keys give the sum form with spectrum {1-beta} union {1}") {
  HouseholderProduct p;
  p.factors.push_back(make_factor({1.0, 0.0, 0.0, 0.0}, 1.5));
  p.factors.push_back(make_factor({0.0, 1.0, 0.0, 0.0}, 0.25));
  const OrthogonalSumForm f = orthogonal_sum_form(p);
  REQUIRE(max_abs_diff(f.a, realize(p)) < 1e-12);
  REQUIRE(f.eigenvalues == Vec{-0.5, 0.75, 1.0, 1.0});
  // Diagonal in the key basis here, so eigenvalues are literal.
  REQUIRE(f.a(0, 0) == -0.5);
  REQUIRE(f.a(1, 1) == 0.75);
  REQUIRE(f.a(2, 2) == 1.0);
}

TEST_CASE("orthogonal_sum_form rejects non-orthogonal keys") {
  HouseholderProduct p;
  p.factors.push_back(make_factor({1.0, 0.0}, 1.0));
  p.factors.push_back(make_factor({std::sqrt(0.5), std::sqrt(0.5)}, 1.0));
  REQUIRE_THROWS_AS(orthogonal_sum_form(p), std::invalid_argument);
}

TEST_CASE("two beta=2 factors at angle theta rotate by 2 theta") {
  // cos(theta) = cos(pi/3): trace -1, det 1, eigenvalues exp(+-i 2pi/3).
  const Spectrum2 sp = two_factor_spectrum(2.0, 2.0, std::cos(M_PI / 3.0));
  REQUIRE(sp.discriminant < 0.0);
  REQUIRE(sp.lambda1.real() == Catch::Approx(-0.5).epsilon(1e-14));
  REQUIRE(sp.lambda1.imag() == Catch::Approx(std::sin(2.0 * M_PI / 3.0)).epsilon(1e-13));
}

TEST_CASE("two-factor spectrum matches dense eig on the plane") {
  Rng rng(46);
  for (int trial = 0; trial < 50; ++trial) {
    const double b1 = rng.uniform(0.0, 2.0), b2 = rng.uniform(0.0, 2.0);
    const double th = rng.uniform(0.0, M_PI);
    HouseholderProduct p;
    p.factors.push_back(make_factor({1.0, 0.0}, b1));
    p.factors.push_back(make_factor({std::cos(th), std::sin(th)}, b2));
    const Spectrum2 dense = eig2x2(realize(p));
    const Spectrum2 restricted = two_factor_spectrum(b1, b2, std::cos(th));
    REQUIRE(restricted.lambda1.real() == Catch::Approx(dense.lambda1.real()).margin(1e-10));
    REQUIRE(std::abs(restricted.lambda1.imag()) ==
            Catch::Approx(std::abs(dense.lambda1.imag())).margin(1e-10));
  }
}

TEST_CASE("complex region bounds") {
  SECTION("equal betas 1.5 give (0, 8/9)") {
    const auto b = complex_region_bounds(1.5, 1.5);
    REQUIRE(b.has_value());
    REQUIRE(b->first == 0.0);
    REQUIRE(b->second == Catch::Approx(8.0 / 9.0).epsilon(1e-14));
  }
  SECTION("no complex region unless both betas exceed one") {
    REQUIRE_FALSE(complex_region_bounds(1.0, 1.5).has_value());
    REQUIRE_FALSE(complex_region_bounds(1.8, 0.9).has_value());
    REQUIRE_FALSE(complex_region_bounds(0.5, 0.5).has_value());
  }
  SECTION("inside the interval the spectrum is complex, outside it is real") {
    Rng rng(47);
    int checked = 0;
    for (int trial = 0; trial < 2000; ++trial) {
      const double b1 = rng.uniform(0.0, 2.0), b2 = rng.uniform(0.0, 2.0);
      const double c2 = rng.uniform(0.0, 1.0);
      const auto bounds = complex_region_bounds(b1, b2);
      const Spectrum2 sp = two_factor_spectrum(b1, b2, std::sqrt(c2));
      const bool inside = bounds.has_value() && c2 > bounds->first && c2 < bounds->second;
      const double margin = 1e-9;
      if (bounds.has_value() &&
          (std::abs(c2 - bounds->first) < margin || std::abs(c2 - bounds->second) < margin))
        continue;  // boundary: discriminant crosses zero there
      REQUIRE((sp.discriminant < 0.0) == inside);
      ++checked;
    }
    REQUIRE(checked > 1900);
  }
}

TEST_CASE("rwkv7_realize reproduces the pinned alternating pair") {
  const double s3 = std::sqrt(3.0);
  const double th = M_PI / 3.0;
  const Matrix a = rwkv7_realize({1.0, 1.0}, {std::sin(th), std::cos(th)}, {0.0, 1.0}, 1.0);
  const Matrix want_a(2, 2, {1.0, -s3 / 4.0, 0.0, 3.0 / 4.0});
  REQUIRE(max_abs_diff(a, want_a) < 1e-15);
  const Matrix ap = rwkv7_realize({1.0, 1.0}, {std::cos(th), std::sin(th)}, {1.0, 0.0}, 1.0);
  const Matrix want_ap(2, 2, {3.0 / 4.0, 0.0, -s3 / 4.0, 1.0});
  REQUIRE(max_abs_diff(ap, want_ap) < 1e-15);
  // c = 2 with k = a = e1 copies nothing but scales: I - 2 e1 e1^T on coords.
  const Matrix c2 = rwkv7_realize({1.0, 1.0}, {1.0, 0.0}, {1.0, 1.0}, 2.0);
  REQUIRE(c2(0, 0) == -1.0);
  REQUIRE(c2(1, 1) == 1.0);
}

TEST_CASE("alternating rwkv7 product is unstable") {
  const InstabilityDemo d = rwkv7_instability_demo(100);
  REQUIRE(d.rho == Catch::Approx((27.0 + std::sqrt(153.0)) / 32.0).epsilon(1e-14));
  REQUIRE(d.norm_trace.size() == 100u);
  // After two steps the product is A A'.
  REQUIRE(d.norm_trace[1] ==
          Catch::Approx(spectral_norm(matmul(d.a, d.a_prime))).epsilon(1e-12));
  // Each factor alone is a valid non-expanding-looking update, yet the
  // product grows like rho^(steps/2).
  REQUIRE(d.norm_trace.back() > 1e4);
  REQUIRE(d.norm_trace.back() > std::pow(d.rho, 50.0) / 2.0);
  for (std::size_t i = 3; i < d.norm_trace.size(); i += 2)
    REQUIRE(d.norm_trace[i] > d.norm_trace[i - 2]);
}

TEST_CASE("instability demo validates step count") {
  REQUIRE_THROWS_AS(rwkv7_instability_demo(3), std::invalid_argument);
  REQUIRE_THROWS_AS(rwkv7_instability_demo(0), std::invalid_argument);
}
