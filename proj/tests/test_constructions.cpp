#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numbers>

#include "deltaproduct/constructions.hpp"
#include "deltaproduct/householder.hpp"
#include "deltaproduct/recurrence.hpp"

using dp::Matrix;
using dp::Permutation;
using dp::Vec;

namespace {

Matrix permutation_matrix(const Permutation& p) {
  Matrix m(p.size(), p.size());
  for (int j = 0; j < p.size(); ++j) m(p(j), j) = 1.0;
  return m;
}

Permutation apply_swaps(int n, const std::vector<std::pair<int, int>>& swaps) {
  Permutation acc = Permutation::identity(n);
  for (auto [a, b] : swaps) {
    std::vector<int> t(n);
    for (int i = 0; i < n; ++i) t[i] = i;
    std::swap(t[a], t[b]);
    acc = dp::compose(Permutation(std::move(t)), acc);  // later swaps act after
  }
  return acc;
}

}  // namespace

TEST_CASE("permutation plumbing: validation, compose, inverse, sign") {
  REQUIRE_THROWS_AS(Permutation({0, 0, 2}), std::invalid_argument);
  REQUIRE_THROWS_AS(Permutation({0, 3}), std::invalid_argument);

  Permutation p({1, 2, 0});  // 3-cycle
  Permutation q({0, 2, 1});  // swap
  REQUIRE(dp::compose(p, dp::inverse(p)) == Permutation::identity(3));
  REQUIRE(dp::compose(p, q).map == std::vector<int>{1, 0, 2});
  REQUIRE(dp::perm_sign(p) == 1);
  REQUIRE(dp::perm_sign(q) == -1);
  REQUIRE(dp::perm_sign(Permutation::identity(5)) == 1);
}

TEST_CASE("lexicographic rank and unrank invert each other") {
  for (long long r = 0; r < dp::factorial(4); ++r)
    REQUIRE(dp::perm_rank(dp::perm_unrank(4, r)) == r);
  REQUIRE(dp::perm_rank(Permutation::identity(5)) == 0);
  REQUIRE(dp::perm_unrank(3, 5).map == std::vector<int>{2, 1, 0});
  REQUIRE_THROWS_AS(dp::perm_unrank(3, 6), std::invalid_argument);
}

TEST_CASE("perm_to_swaps decomposes with at most n-1 transpositions") {
  REQUIRE(dp::perm_to_swaps(Permutation::identity(4)).empty());

  Permutation swap01({1, 0});
  auto s = dp::perm_to_swaps(swap01);
  REQUIRE(s == std::vector<std::pair<int, int>>{{0, 1}});

  Permutation cyc({1, 2, 3, 0});  // 0->1->2->3->0
  auto sw = dp::perm_to_swaps(cyc);
  REQUIRE(sw.size() == 3);
  REQUIRE(apply_swaps(4, sw) == cyc);

  for (long long r = 0; r < dp::factorial(5); ++r) {
    Permutation p = dp::perm_unrank(5, r);
    auto swaps = dp::perm_to_swaps(p);
    REQUIRE(swaps.size() <= 4);
    REQUIRE(apply_swaps(5, swaps) == p);
  }
}

TEST_CASE("S_2 transition is the single reflection swap") {
  dp::SnOneLayerModel model(2);
  dp::StepInputs s = model.transition(static_cast<int>(dp::perm_rank(Permutation({1, 0}))));
  REQUIRE(s.keys.size() == 1);
  REQUIRE(s.betas[0] == 2.0);
  const double inv = 1.0 / std::sqrt(2.0);
  REQUIRE(s.keys[0][0] == Catch::Approx(inv));
  REQUIRE(s.keys[0][1] == Catch::Approx(-inv));

  dp::StepInputs id = model.transition(0);
  REQUIRE(id.betas[0] == 0.0);
  Matrix before = model.state();
  model.feed(0);
  REQUIRE(dp::max_abs_diff(before, model.state()) == 0.0);
}

TEST_CASE("S_n transitions realize permutation matrices") {
  for (int n : {3, 4, 5}) {
    dp::SnOneLayerModel model(n);
    dp::Rng rng(100 + n);
    for (int trial = 0; trial < 20; ++trial) {
      const int tok = static_cast<int>(rng.uniform_int(0, model.vocab() - 1));
      dp::TokenAffine ta = dp::token_affine(model.transition(tok), n, 1);
      REQUIRE(dp::max_abs_diff(ta.a, permutation_matrix(dp::perm_unrank(n, tok))) < 1e-9);
      REQUIRE(dp::max_abs_diff(ta.b, Matrix::zeros(n, 1)) == 0.0);
    }
  }
}

TEST_CASE("S_n one-layer model tracks the word problem exactly") {
  for (int n : {2, 3, 4, 5}) {
    dp::SnOneLayerModel model(n);
    dp::SnOracle oracle(n);
    auto rep =
        dp::verify_construction(model, oracle, model.vocab(), 10, 128, 1000 + n, "sn");
    INFO("n=" << n);
    REQUIRE(rep.pass);
    REQUIRE(rep.positions == 10LL * 128);
  }
}

TEST_CASE("mod counter transition is the 2pi/d rotation") {
  for (int d : {2, 3, 4, 7, 12}) {
    dp::ModCounterModel model(d);
    dp::TokenAffine ta = dp::token_affine(model.transition(), 2, 1);
    const double th = 2.0 * std::numbers::pi / d;
    Matrix rot(2, 2, {std::cos(th), -std::sin(th), std::sin(th), std::cos(th)});
    INFO("d=" << d);
    REQUIRE(dp::max_abs_diff(ta.a, rot) < 1e-12);
  }
}

TEST_CASE("mod counter returns home after d steps and counts correctly") {
  dp::ModCounterModel four(4);
  Matrix start = four.state();
  for (int i = 0; i < 4; ++i) four.feed(0);
  REQUIRE(dp::max_abs_diff(start, four.state()) < 1e-9);

  dp::ModCounterModel two(2);
  two.feed(0);
  REQUIRE(two.output() == 1);
  two.feed(0);
  REQUIRE(two.output() == 0);

  dp::ModCounterModel seven(7);
  for (int t = 1; t <= 100; ++t) {
    seven.feed(0);
    REQUIRE(seven.output() == t % 7);
  }

  for (int d = 2; d <= 12; ++d) {
    dp::ModCounterModel model(d);
    dp::ModOracle oracle(d);
    auto rep = dp::verify_construction(model, oracle, 3, 5, 200, 2000 + d, "mod");
    INFO("d=" << d);
    REQUIRE(rep.pass);
    REQUIRE(model.decoder_margin() > 1e-5);
  }
}

TEST_CASE("dihedral composition table is a group") {
  const int m = 4;
  for (int a = 0; a < 2 * m; ++a) {
    REQUIRE(dp::dihedral_compose(m, 0, a) == a);
    REQUIRE(dp::dihedral_compose(m, a, 0) == a);
    for (int b = 0; b < 2 * m; ++b)
      for (int c = 0; c < 2 * m; ++c)
        REQUIRE(dp::dihedral_compose(m, dp::dihedral_compose(m, a, b), c) ==
                dp::dihedral_compose(m, a, dp::dihedral_compose(m, b, c)));
  }
  // s_i s_j = r_{i-j}
  REQUIRE(dp::dihedral_compose(5, 5 + 3, 5 + 1) == 2);
  REQUIRE(dp::dihedral_compose(5, 5 + 1, 5 + 3) == 3);  // (1-3) mod 5
}

TEST_CASE("dihedral model: identity stream and the two-reflection law") {
  dp::DihedralTwoLayerModel model(6);
  for (int t = 0; t < 10; ++t) {
    model.feed(0);
    REQUIRE(model.output() == 0);
  }

  for (int m : {3, 5, 8}) {
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < m; ++j) {
        dp::DihedralTwoLayerModel dm(m);
        dm.feed(m + i);
        dm.feed(m + j);
        INFO("m=" << m << " i=" << i << " j=" << j);
        REQUIRE(dm.output() == ((i - j) % m + m) % m);
      }
  }
}

TEST_CASE("dihedral two-layer model tracks the word problem exactly") {
  for (int m = 2; m <= 10; ++m) {
    dp::DihedralTwoLayerModel model(m);
    dp::DihedralOracle oracle(m);
    auto rep =
        dp::verify_construction(model, oracle, model.vocab(), 10, 100, 3000 + m, "dihedral");
    INFO("m=" << m);
    REQUIRE(rep.pass);
    REQUIRE(model.decoder_margin() > 1e-5);
  }
}

TEST_CASE("constructed transitions stay orthogonal") {
  dp::SnOneLayerModel sn(5);
  dp::Rng rng(71);
  for (int trial = 0; trial < 10; ++trial) {
    const int tok = static_cast<int>(rng.uniform_int(0, sn.vocab() - 1));
    Matrix a = dp::token_affine(sn.transition(tok), 5, 1).a;
    REQUIRE(dp::max_abs_diff(dp::matmul(dp::transpose(a), a), Matrix::identity(5)) < 1e-9);
  }
  dp::ModCounterModel mc(9);
  Matrix a = dp::token_affine(mc.transition(), 2, 1).a;
  REQUIRE(dp::max_abs_diff(dp::matmul(dp::transpose(a), a), Matrix::identity(2)) < 1e-12);
}

TEST_CASE("verify_construction flags a broken oracle") {
  dp::ModCounterModel model(5);
  dp::ModOracle wrong(4);
  auto rep = dp::verify_construction(model, wrong, 2, 2, 40, 99, "broken");
  REQUIRE_FALSE(rep.pass);
  REQUIRE(rep.mismatches > 0);
  REQUIRE_THROWS_AS(dp::verify_construction(model, wrong, 2, 0, 40, 99, "bad"),
                    std::invalid_argument);
}
