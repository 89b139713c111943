#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <vector>

#include "deltaproduct/autodiff.hpp"
#include "deltaproduct/recurrence.hpp"
#include "deltaproduct/rng.hpp"

using dp::Matrix;
using dp::NodeId;
using dp::Tape;
using dp::Vec;

namespace {

Matrix random_matrix(dp::Rng& rng, int rows, int cols, double scale = 1.0) {
  Matrix m(rows, cols);
  for (double& v : m.a) v = scale * rng.normal();
  return m;
}

// Builds the graph with fresh param leaves each call; returns the loss node.
using GraphBuilder = std::function<NodeId(Tape&, const std::vector<NodeId>&)>;

// FD-checks d(loss)/d(param) for every parameter against the tape gradients.
double fd_check(const GraphBuilder& build, std::vector<Matrix>& params) {
  std::vector<Matrix> sinks;
  sinks.reserve(params.size());
  for (const Matrix& p : params) sinks.push_back(Matrix::zeros(p.rows, p.cols));

  auto run = [&](bool with_grad) {
    Tape tape;
    std::vector<NodeId> ids;
    for (std::size_t i = 0; i < params.size(); ++i)
      ids.push_back(tape.param(&params[i], with_grad ? &sinks[i] : nullptr));
    NodeId loss = build(tape, ids);
    double value = tape.value(loss)(0, 0);
    if (with_grad) tape.backward(loss);
    return value;
  };

  run(true);
  std::vector<std::pair<std::string, Matrix*>> named;
  for (std::size_t i = 0; i < params.size(); ++i) named.push_back({"p" + std::to_string(i), &params[i]});
  auto rep = dp::finite_difference_check([&] { return run(false); }, named, sinks);
  return rep.max_tensor_rel_err;
}

NodeId sum_all(Tape& tape, NodeId x) {
  const Matrix& v = tape.value(x);
  Matrix ones(v.cols, 1);
  for (double& e : ones.a) e = 1.0;
  Matrix onesr(1, v.rows);
  for (double& e : onesr.a) e = 1.0;
  NodeId col = tape.matmul(x, tape.input(std::move(ones)));
  return tape.matmul(tape.input(std::move(onesr)), col);
}

// Nonuniform weights keep reductions from cancelling gradient structure.
NodeId weighted_sum(Tape& tape, NodeId x, dp::Rng& rng) {
  const Matrix& v = tape.value(x);
  Matrix w(v.rows, v.cols);
  for (double& e : w.a) e = rng.uniform(0.5, 1.5);
  return sum_all(tape, tape.mul(x, tape.input(std::move(w))));
}

}  // namespace

TEST_CASE("silu derivative matches the closed form") {
  for (double x : {-3.0, -0.5, 0.0, 0.5, 2.0}) {
    Tape tape;
    Matrix in(1, 1);
    in(0, 0) = x;
    NodeId a = tape.input(std::move(in), true);
    NodeId y = tape.silu(a);
    tape.backward(y);
    const double s = dp::sigmoid_scalar(x);
    REQUIRE(tape.grad(a)(0, 0) == Catch::Approx(s * (1.0 + x * (1.0 - s))).margin(1e-14));
  }
}

TEST_CASE("matmul and matmul_nt agree and both pass a gradient check") {
  dp::Rng rng(11);
  Matrix a = random_matrix(rng, 3, 4);
  Matrix b = random_matrix(rng, 5, 4);

  Tape tape;
  NodeId na = tape.input(a);
  NodeId nb = tape.input(b);
  NodeId nt = tape.matmul_nt(na, nb);
  NodeId bt = tape.input(dp::transpose(b));
  NodeId plain = tape.matmul(na, bt);
  REQUIRE(dp::max_abs_diff(tape.value(nt), tape.value(plain)) < 1e-14);

  dp::Rng wrng(12);
  std::vector<Matrix> params = {a, b};
  double err = fd_check(
      [&](Tape& t, const std::vector<NodeId>& p) {
        dp::Rng local(99);
        return weighted_sum(t, t.matmul_nt(p[0], p[1]), local);
      },
      params);
  REQUIRE(err < 1e-7);

  std::vector<Matrix> nnparams = {a, random_matrix(rng, 4, 5)};
  err = fd_check(
      [&](Tape& t, const std::vector<NodeId>& p) {
        dp::Rng local(100);
        return weighted_sum(t, t.matmul(p[0], p[1]), local);
      },
      nnparams);
  REQUIRE(err < 1e-7);
}

TEST_CASE("elementwise and broadcast primitives pass gradient checks") {
  dp::Rng rng(21);
  std::vector<Matrix> two = {random_matrix(rng, 4, 3), random_matrix(rng, 4, 3)};
  REQUIRE(fd_check(
              [](Tape& t, const std::vector<NodeId>& p) {
                dp::Rng local(1);
                return weighted_sum(t, t.mul(t.add(p[0], p[1]), p[1]), local);
              },
              two) < 1e-7);

  std::vector<Matrix> sb = {random_matrix(rng, 5, 4), random_matrix(rng, 1, 4)};
  REQUIRE(fd_check(
              [](Tape& t, const std::vector<NodeId>& p) {
                dp::Rng local(2);
                return weighted_sum(t, t.bias_add_row(t.scale(p[0], 0.7), p[1]), local);
              },
              sb) < 1e-7);

  std::vector<Matrix> one = {random_matrix(rng, 4, 6)};
  REQUIRE(fd_check(
              [](Tape& t, const std::vector<NodeId>& p) {
                dp::Rng local(3);
                return weighted_sum(t, t.silu(p[0]), local);
              },
              one) < 1e-7);
  REQUIRE(fd_check(
              [](Tape& t, const std::vector<NodeId>& p) {
                dp::Rng local(4);
                return weighted_sum(t, t.sigmoid(p[0]), local);
              },
              one) < 1e-7);
}

TEST_CASE("row normalizations: forward semantics and gradients") {
  dp::Rng rng(31);
  Matrix x = random_matrix(rng, 5, 7);

  Tape tape;
  NodeId nx = tape.input(x);
  NodeId ny = tape.l2normalize_rows(nx);
  for (int i = 0; i < 5; ++i) {
    double s = 0.0;
    for (int j = 0; j < 7; ++j) s += tape.value(ny)(i, j) * tape.value(ny)(i, j);
    REQUIRE(std::sqrt(s) == Catch::Approx(1.0).margin(1e-12));
  }

  Matrix z = Matrix::zeros(2, 3);
  Tape tz;
  NodeId nz = tz.input(z, true);
  NodeId nn = tz.l2normalize_rows(nz);
  NodeId loss = tz.matmul(nn, tz.input(Matrix::zeros(3, 1)));
  (void)loss;
  REQUIRE(dp::frobenius_norm(tz.value(nn)) == 0.0);

  std::vector<Matrix> one = {x};
  REQUIRE(fd_check(
              [](Tape& t, const std::vector<NodeId>& p) {
                dp::Rng local(5);
                return weighted_sum(t, t.l2normalize_rows(p[0]), local);
              },
              one) < 1e-7);

  std::vector<Matrix> rn = {random_matrix(rng, 5, 7), random_matrix(rng, 1, 7, 0.3)};
  for (double& v : rn[1].a) v += 1.0;
  REQUIRE(fd_check(
              [](Tape& t, const std::vector<NodeId>& p) {
                dp::Rng local(6);
                return weighted_sum(t, t.rmsnorm_rows(p[0], p[1], 1e-5), local);
              },
              rn) < 1e-7);

  // rmsnorm row with scale = 1: y = x / sqrt(eps + mean(x^2)).
  Matrix xr(1, 4, {1.0, 2.0, 3.0, 4.0});
  Matrix sc(1, 4, {1.0, 1.0, 1.0, 1.0});
  Tape tr;
  NodeId out = tr.rmsnorm_rows(tr.input(xr), tr.input(sc), 1e-5);
  const double r = 1.0 / std::sqrt(1e-5 + 30.0 / 4.0);
  for (int j = 0; j < 4; ++j)
    REQUIRE(tr.value(out)(0, j) == Catch::Approx(xr(0, j) * r).margin(1e-14));
}

TEST_CASE("causal depthwise conv is causal and differentiates") {
  dp::Rng rng(41);
  Matrix x = random_matrix(rng, 8, 3);
  Matrix w = random_matrix(rng, 3, 4, 0.5);

  Tape tape;
  NodeId ny = tape.conv_causal_depthwise(tape.input(x), tape.input(w));
  // Position 0 only sees tap 0.
  for (int ch = 0; ch < 3; ++ch)
    REQUIRE(tape.value(ny)(0, ch) == Catch::Approx(w(ch, 0) * x(0, ch)).margin(1e-14));
  // Perturbing a future input must not change an earlier output.
  Matrix x2 = x;
  x2(5, 1) += 10.0;
  Tape t2;
  NodeId ny2 = t2.conv_causal_depthwise(t2.input(x2), t2.input(w));
  for (int i = 0; i < 5; ++i)
    for (int ch = 0; ch < 3; ++ch)
      REQUIRE(t2.value(ny2)(i, ch) == Catch::Approx(tape.value(ny)(i, ch)).margin(1e-14));

  std::vector<Matrix> params = {x, w};
  REQUIRE(fd_check(
              [](Tape& t, const std::vector<NodeId>& p) {
                dp::Rng local(7);
                return weighted_sum(t, t.conv_causal_depthwise(p[0], p[1]), local);
              },
              params) < 1e-7);
}

TEST_CASE("embed gathers rows and scatter-adds duplicates in backward") {
  Matrix table(3, 2, {1.0, 2.0, 3.0, 4.0, 5.0, 6.0});
  Tape tape;
  Matrix sink = Matrix::zeros(3, 2);
  NodeId nt = tape.param(&table, &sink);
  NodeId e = tape.embed(nt, {2, 0, 2});
  REQUIRE(tape.value(e)(0, 0) == 5.0);
  REQUIRE(tape.value(e)(1, 1) == 2.0);
  NodeId loss = sum_all(tape, e);
  tape.backward(loss);
  REQUIRE(sink(2, 0) == Catch::Approx(2.0));  // used twice
  REQUIRE(sink(0, 0) == Catch::Approx(1.0));
  REQUIRE(sink(1, 0) == 0.0);

  Tape bad;
  NodeId tb = bad.input(table);
  REQUIRE_THROWS_AS(bad.embed(tb, {3}), std::invalid_argument);
}

TEST_CASE("dp_scan forward matches the plain recurrence") {
  dp::Rng rng(51);
  const int t = 7, n = 4, d = 3, n_h = 2;
  std::vector<Matrix> keys, vals;
  std::vector<Matrix> betas;
  for (int j = 0; j < n_h; ++j) {
    Matrix k = random_matrix(rng, t, n);
    for (int i = 0; i < t; ++i) {
      double s = 0.0;
      for (int c = 0; c < n; ++c) s += k(i, c) * k(i, c);
      for (int c = 0; c < n; ++c) k(i, c) /= std::sqrt(s);
    }
    keys.push_back(k);
    vals.push_back(random_matrix(rng, t, d));
    Matrix b(t, 1);
    for (double& v : b.a) v = rng.uniform(0.0, 2.0);
    betas.push_back(b);
  }
  Matrix gate(t, 1);
  for (double& v : gate.a) v = rng.uniform(0.0, 1.0);

  Tape tape;
  std::vector<NodeId> nk, nb, nv;
  for (int j = 0; j < n_h; ++j) {
    nk.push_back(tape.input(keys[j]));
    nb.push_back(tape.input(betas[j]));
    nv.push_back(tape.input(vals[j]));
  }
  NodeId ng = tape.input(gate);
  NodeId s = tape.dp_scan(nk, nb, nv, ng);

  std::vector<dp::StepInputs> seq(t);
  for (int i = 0; i < t; ++i) {
    for (int j = 0; j < n_h; ++j) {
      Vec k(n), v(d);
      for (int c = 0; c < n; ++c) k[c] = keys[j](i, c);
      for (int c = 0; c < d; ++c) v[c] = vals[j](i, c);
      seq[i].keys.push_back(k);
      seq[i].values.push_back(v);
      seq[i].betas.push_back(betas[j](i, 0));
    }
    seq[i].gate = gate(i, 0);
  }
  auto states = dp::forward_sequential(Matrix::zeros(n, d), seq);
  for (int i = 0; i < t; ++i)
    for (std::size_t e = 0; e < states[i].size(); ++e)
      REQUIRE(tape.value(s)(i, static_cast<int>(e)) == states[i].a[e]);
}

TEST_CASE("dp_scan gradients pass a finite difference check") {
  dp::Rng rng(61);
  const int t = 5, n = 3, d = 2;

  auto build = [&](int n_h, bool gated) {
    std::vector<Matrix> params;
    for (int j = 0; j < n_h; ++j) {
      params.push_back(random_matrix(rng, t, n));  // raw keys, normalized on tape
      Matrix b(t, 1);
      for (double& v : b.a) v = rng.normal();
      params.push_back(b);  // raw betas, squashed on tape
      params.push_back(random_matrix(rng, t, d));
    }
    if (gated) {
      Matrix g(t, 1);
      for (double& v : g.a) v = rng.normal();
      params.push_back(g);
    }
    return params;
  };

  for (bool gated : {false, true}) {
    for (int n_h : {1, 2, 3}) {
      std::vector<Matrix> params = build(n_h, gated);
      double err = fd_check(
          [n_h, gated](Tape& tp, const std::vector<NodeId>& p) {
            std::vector<NodeId> nk, nb, nv;
            for (int j = 0; j < n_h; ++j) {
              nk.push_back(tp.l2normalize_rows(p[3 * j]));
              nb.push_back(tp.scale(tp.sigmoid(p[3 * j + 1]), 2.0));
              nv.push_back(p[3 * j + 2]);
            }
            NodeId gate = gated ? tp.sigmoid(p[3 * n_h]) : -1;
            dp::Rng local(8);
            return weighted_sum(tp, tp.dp_scan(nk, nb, nv, gate), local);
          },
          params);
      INFO("n_h=" << n_h << " gated=" << gated);
      REQUIRE(err < 1e-7);
    }
  }
}

TEST_CASE("state_readout contracts states against queries") {
  dp::Rng rng(71);
  const int t = 4, n = 3, d = 2;
  Matrix s = random_matrix(rng, t, n * d);
  Matrix q = random_matrix(rng, t, n);

  Tape tape;
  NodeId r = tape.state_readout(tape.input(s), tape.input(q), n, d);
  for (int i = 0; i < t; ++i)
    for (int c = 0; c < d; ++c) {
      double want = 0.0;
      for (int row = 0; row < n; ++row) want += q(i, row) * s(i, row * d + c);
      REQUIRE(tape.value(r)(i, c) == Catch::Approx(want).margin(1e-12));
    }

  std::vector<Matrix> params = {s, q};
  REQUIRE(fd_check(
              [n, d](Tape& tp, const std::vector<NodeId>& p) {
                dp::Rng local(9);
                return weighted_sum(tp, tp.state_readout(p[0], p[1], n, d), local);
              },
              params) < 1e-7);
}

TEST_CASE("softmax cross entropy: value, mask, and gradient") {
  Matrix logits(3, 4, {0.1, 0.2, 0.3, 0.4, 2.0, -1.0, 0.0, 0.5, -0.3, 0.8, 0.1, -0.2});
  std::vector<int> targets = {2, 0, 1};
  std::vector<bool> mask = {true, false, true};

  double want = 0.0;
  for (int i : {0, 2}) {
    double mx = logits(i, 0);
    for (int j = 1; j < 4; ++j) mx = std::max(mx, logits(i, j));
    double z = 0.0;
    for (int j = 0; j < 4; ++j) z += std::exp(logits(i, j) - mx);
    want -= logits(i, targets[i]) - mx - std::log(z);
  }
  want /= 2.0;

  Tape tape;
  Matrix sink = Matrix::zeros(3, 4);
  NodeId nl = tape.param(&logits, &sink);
  NodeId loss = tape.softmax_xent(nl, targets, mask);
  REQUIRE(tape.value(loss)(0, 0) == Catch::Approx(want).margin(1e-12));
  tape.backward(loss);
  for (int j = 0; j < 4; ++j) REQUIRE(sink(1, j) == 0.0);  // masked row
  double rowsum = 0.0;
  for (int j = 0; j < 4; ++j) rowsum += sink(0, j);
  REQUIRE(rowsum == Catch::Approx(0.0).margin(1e-12));

  std::vector<Matrix> params = {logits};
  REQUIRE(fd_check(
              [&](Tape& tp, const std::vector<NodeId>& p) {
                return tp.softmax_xent(p[0], targets, mask);
              },
              params) < 1e-7);

  Tape bad;
  NodeId nb = bad.input(logits);
  REQUIRE_THROWS_AS(bad.softmax_xent(nb, targets, {false, false, false}),
                    std::invalid_argument);
}

TEST_CASE("composite graph mixing every primitive differentiates") {
  dp::Rng rng(81);
  const int l = 5, n = 3, d = 3, vocab = 7;
  std::vector<Matrix> params;
  params.push_back(random_matrix(rng, vocab, l, 0.5));  // embedding
  params.push_back(random_matrix(rng, l, 4, 0.5));      // conv kernel
  params.push_back(random_matrix(rng, n, l, 0.5));      // key proj
  params.push_back(random_matrix(rng, 1, l, 0.5));      // beta proj
  params.push_back(random_matrix(rng, d, l, 0.5));      // value proj
  params.push_back(random_matrix(rng, n, l, 0.5));      // query proj
  params.push_back(random_matrix(rng, 1, d, 0.3));      // rms scale (shifted)
  for (double& v : params.back().a) v += 1.0;
  params.push_back(random_matrix(rng, vocab, d, 0.5));  // head
  std::vector<int> ids = {1, 4, 2, 0, 6, 3};
  std::vector<int> targets = {4, 2, 0, 6, 3, 5};
  std::vector<bool> mask = {true, true, false, true, true, true};

  double err = fd_check(
      [&](Tape& tp, const std::vector<NodeId>& p) {
        NodeId x = tp.embed(p[0], ids);
        x = tp.add(x, tp.conv_causal_depthwise(x, p[1]));
        NodeId k = tp.l2normalize_rows(tp.silu(tp.matmul_nt(x, p[2])));
        NodeId beta = tp.sigmoid(tp.matmul_nt(x, p[3]));
        NodeId v = tp.matmul_nt(x, p[4]);
        NodeId q = tp.l2normalize_rows(tp.silu(tp.matmul_nt(x, p[5])));
        NodeId s = tp.dp_scan({k}, {beta}, {v}, -1);
        NodeId r = tp.rmsnorm_rows(tp.state_readout(s, q, n, d), p[6], 1e-5);
        NodeId logits = tp.matmul_nt(r, p[7]);
        return tp.softmax_xent(logits, targets, mask);
      },
      params);
  REQUIRE(err < 1e-6);
}

TEST_CASE("off-path nodes receive no gradient and params accumulate across tapes") {
  Matrix w(2, 2, {1.0, 2.0, 3.0, 4.0});
  Matrix sink = Matrix::zeros(2, 2);
  for (int rep = 0; rep < 3; ++rep) {
    Tape tape;
    NodeId nw = tape.param(&w, &sink);
    NodeId unused = tape.silu(nw);
    (void)unused;
    NodeId loss = sum_all(tape, nw);
    tape.backward(loss);
  }
  for (double v : sink.a) REQUIRE(v == Catch::Approx(3.0));  // 3 accumulated passes
}
