#pragma once

// Hand-built DeltaProduct models that solve group word problems exactly, plus
// brute-force oracles and a verification driver. Three constructions:
//
//   - S_n in one layer with n_h = n-1: each permutation token becomes at most
//     n-1 swap factors (beta = 2, k = (e_a - e_b)/sqrt(2)) padded with
//     identity factors; the state carries the permuted vector (1..n).
//   - counting modulo d with n_h = 2: two fixed reflections compose to a
//     2pi/d rotation of a 2-D state, independent of the token.
//   - D_m in two layers with n_h = 1: layer 1 tracks rotation and reflection
//     parity with +-1 scalar states; layer 2 applies a reflection H(theta)
//     whose angle depends on the token and a parity-derived selector.
//
// Every transition goes through the real recurrence step(), so these double
// as end-to-end checks of the state update. Decoders are nearest-state
// lookups; margins are orders of magnitude above f64 drift at the lengths
// verified.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "deltaproduct/matrix.hpp"
#include "deltaproduct/recurrence.hpp"
#include "deltaproduct/rng.hpp"

namespace dp {

// ---- permutations ----

// map[j] = image of position j under the permutation.
struct Permutation {
  std::vector<int> map;

  Permutation() = default;
  explicit Permutation(std::vector<int> m) : map(std::move(m)) {
    std::vector<bool> seen(map.size(), false);
    for (int v : map) {
      if (v < 0 || v >= static_cast<int>(map.size()) || seen[v])
        throw std::invalid_argument("Permutation: not a bijection");
      seen[v] = true;
    }
  }

  static Permutation identity(int n) {
    std::vector<int> m(n);
    for (int i = 0; i < n; ++i) m[i] = i;
    return Permutation(std::move(m));
  }

  int size() const { return static_cast<int>(map.size()); }
  int operator()(int i) const { return map[i]; }
  bool operator==(const Permutation& o) const { return map == o.map; }
};

// (a o b)(j) = a(b(j)): b acts first.
inline Permutation compose(const Permutation& a, const Permutation& b) {
  if (a.size() != b.size()) throw std::invalid_argument("compose: size mismatch");
  std::vector<int> m(a.size());
  for (int j = 0; j < a.size(); ++j) m[j] = a(b(j));
  return Permutation(std::move(m));
}

inline Permutation inverse(const Permutation& p) {
  std::vector<int> m(p.size());
  for (int j = 0; j < p.size(); ++j) m[p(j)] = j;
  return Permutation(std::move(m));
}

inline int perm_sign(const Permutation& p) {
  std::vector<bool> seen(p.size(), false);
  int sign = 1;
  for (int i = 0; i < p.size(); ++i) {
    if (seen[i]) continue;
    int len = 0;
    for (int j = i; !seen[j]; j = p(j)) {
      seen[j] = true;
      ++len;
    }
    if (len % 2 == 0) sign = -sign;
  }
  return sign;
}

inline long long factorial(int n) {
  if (n < 0 || n > 20) throw std::invalid_argument("factorial: out of range");
  long long f = 1;
  for (int i = 2; i <= n; ++i) f *= i;
  return f;
}

// Lexicographic rank via the Lehmer code.
inline long long perm_rank(const Permutation& p) {
  long long rank = 0;
  const int n = p.size();
  for (int i = 0; i < n; ++i) {
    int smaller = 0;
    for (int j = i + 1; j < n; ++j) smaller += p(j) < p(i) ? 1 : 0;
    rank += smaller * factorial(n - 1 - i);
  }
  return rank;
}

inline Permutation perm_unrank(int n, long long rank) {
  if (rank < 0 || rank >= factorial(n)) throw std::invalid_argument("perm_unrank: bad rank");
  std::vector<int> pool(n);
  for (int i = 0; i < n; ++i) pool[i] = i;
  std::vector<int> m;
  for (int i = 0; i < n; ++i) {
    const long long f = factorial(n - 1 - i);
    const int idx = static_cast<int>(rank / f);
    rank %= f;
    m.push_back(pool[idx]);
    pool.erase(pool.begin() + idx);
  }
  return Permutation(std::move(m));
}

// Transpositions in application order (first listed acts first), from the
// cycle decomposition with cycles started at their smallest index: a cycle
// (c0 c1 ... c_{k-1}) becomes (c0 c1), (c0 c2), ..., (c0 c_{k-1}).
inline std::vector<std::pair<int, int>> perm_to_swaps(const Permutation& p) {
  std::vector<std::pair<int, int>> swaps;
  std::vector<bool> seen(p.size(), false);
  for (int start = 0; start < p.size(); ++start) {
    if (seen[start]) continue;
    std::vector<int> cycle;
    for (int j = start; !seen[j]; j = p(j)) {
      seen[j] = true;
      cycle.push_back(j);
    }
    for (std::size_t i = 1; i < cycle.size(); ++i) swaps.push_back({cycle[0], cycle[i]});
  }
  return swaps;
}

// ---- shared pieces ----

namespace detail {

inline Vec unit_e(int n, int i) {
  Vec v(n, 0.0);
  v[i] = 1.0;
  return v;
}

inline Vec swap_key(int n, int a, int b) {
  Vec k(n, 0.0);
  const double s = 1.0 / std::sqrt(2.0);
  k[a] = s;
  k[b] = -s;
  return k;
}

// Unit key at a plane angle; (I - 2kk^T) with k at angle (theta - pi)/2
// equals the reflection H(theta) = [[cos, sin], [sin, -cos]].
inline Vec plane_key(double angle) { return {std::cos(angle), std::sin(angle)}; }

inline StepInputs identity_padded(std::vector<Vec> keys, Vec betas, int n_h, int n, int d) {
  StepInputs s;
  s.keys = std::move(keys);
  s.betas = std::move(betas);
  while (static_cast<int>(s.keys.size()) < n_h) {
    s.keys.push_back(unit_e(n, 0));
    s.betas.push_back(0.0);
  }
  s.values.assign(s.keys.size(), Vec(d, 0.0));
  s.gate = 1.0;
  return s;
}

}  // namespace detail

// ---- S_n, one layer, n_h = n-1 ----

class SnOneLayerModel {
 public:
  explicit SnOneLayerModel(int n) : n_(n) {
    if (n < 2) throw std::invalid_argument("SnOneLayerModel: n >= 2");
    reset();
  }

  int n() const { return n_; }
  int vocab() const { return static_cast<int>(factorial(n_)); }
  int householders() const { return n_ - 1; }

  void reset() {
    h_ = Matrix(n_, 1);
    for (int i = 0; i < n_; ++i) h_(i, 0) = i + 1;
  }

  StepInputs transition(int token) const {
    const Permutation p = perm_unrank(n_, token);
    std::vector<Vec> keys;
    Vec betas;
    for (auto [a, b] : perm_to_swaps(p)) {
      keys.push_back(detail::swap_key(n_, a, b));
      betas.push_back(2.0);
    }
    return detail::identity_padded(std::move(keys), std::move(betas), n_ - 1, n_, 1);
  }

  void feed(int token) { h_ = step(h_, transition(token)); }

  // The state holds u with u[y(j)] = j+1, so y maps round(u[i]) - 1 to i.
  int output() const {
    std::vector<int> m(n_);
    for (int i = 0; i < n_; ++i) {
      const double raw = h_(i, 0);
      const int val = static_cast<int>(std::lround(raw));
      if (std::abs(raw - val) > 1e-6 || val < 1 || val > n_)
        throw std::runtime_error("SnOneLayerModel: state decoded off-integer");
      m[val - 1] = i;
    }
    return static_cast<int>(perm_rank(Permutation(std::move(m))));
  }

  const Matrix& state() const { return h_; }

 private:
  int n_;
  Matrix h_;
};

class SnOracle {
 public:
  explicit SnOracle(int n) : n_(n), y_(Permutation::identity(n)) {}
  void reset() { y_ = Permutation::identity(n_); }
  void feed(int token) { y_ = compose(perm_unrank(n_, token), y_); }  // y_i = x_i . y_{i-1}
  int output() const { return static_cast<int>(perm_rank(y_)); }

 private:
  int n_;
  Permutation y_;
};

// ---- counting modulo d, n_h = 2 ----

class ModCounterModel {
 public:
  explicit ModCounterModel(int d) : d_(d) {
    if (d < 2) throw std::invalid_argument("ModCounterModel: d >= 2");
    const double pi = std::numbers::pi;
    trans_.keys = {detail::plane_key(0.0), detail::plane_key(pi / d)};
    trans_.betas = {2.0, 2.0};
    trans_.values = {Vec(1, 0.0), Vec(1, 0.0)};
    trans_.gate = 1.0;
    // Reference states from the same arithmetic the recurrence uses.
    Matrix h(2, 1);
    h(0, 0) = 1.0;
    states_.clear();
    for (int i = 0; i < d; ++i) {
      states_.push_back({h(0, 0), h(1, 0)});
      h = step(h, trans_);
    }
    reset();
  }

  int d() const { return d_; }

  void reset() {
    h_ = Matrix(2, 1);
    h_(0, 0) = 1.0;
  }

  const StepInputs& transition() const { return trans_; }

  void feed(int) { h_ = step(h_, trans_); }  // token-independent

  int output() const {
    int best = 0;
    double best_dot = -2.0;
    for (int i = 0; i < d_; ++i) {
      const double dot = states_[i][0] * h_(0, 0) + states_[i][1] * h_(1, 0);
      if (dot > best_dot) {
        best_dot = dot;
        best = i;
      }
    }
    if (1.0 - best_dot > 1e-6) throw std::runtime_error("ModCounterModel: state off-lattice");
    return best;
  }

  // Smallest gap between distinct decoder states, for the margin check.
  double decoder_margin() const {
    double worst = 2.0;
    for (int i = 0; i < d_; ++i)
      for (int j = i + 1; j < d_; ++j) {
        const double dot = states_[i][0] * states_[j][0] + states_[i][1] * states_[j][1];
        worst = std::min(worst, 1.0 - dot);
      }
    return worst;
  }

  const Matrix& state() const { return h_; }

 private:
  int d_;
  StepInputs trans_;
  std::vector<Vec> states_;
  Matrix h_;
};

class ModOracle {
 public:
  explicit ModOracle(int d) : d_(d) {}
  void reset() { count_ = 0; }
  void feed(int) { count_ = (count_ + 1) % d_; }
  int output() const { return count_; }

 private:
  int d_;
  int count_ = 0;
};

// ---- dihedral D_m, two layers, n_h = 1 ----
//
// Element encoding: 0..m-1 are rotations r_i, m..2m-1 are reflections s_{i-m}.
// Composition is in reading order, y_t = y_{t-1} * x_t, with
// r_i r_j = r_{i+j}, r_i s_j = s_{i+j}, s_i r_j = s_{i-j}, s_i s_j = r_{i-j}.

inline int dihedral_compose(int m, int a, int b) {
  const bool ra = a < m, rb = b < m;
  const int i = ra ? a : a - m, j = rb ? b : b - m;
  auto wrap = [m](int v) { return ((v % m) + m) % m; };
  if (ra && rb) return wrap(i + j);
  if (ra && !rb) return m + wrap(i + j);
  if (!ra && rb) return m + wrap(i - j);
  return wrap(i - j);
}

class DihedralTwoLayerModel {
 public:
  explicit DihedralTwoLayerModel(int m) : m_(m) {
    if (m < 2) throw std::invalid_argument("DihedralTwoLayerModel: m >= 2");
    const double pi = std::numbers::pi;
    for (int i = 0; i < m; ++i) {
      dstates_.push_back({std::cos(2 * i * pi / m), std::sin(2 * i * pi / m)});
      cstates_.push_back({std::cos((1 - 2 * i) * pi / m), std::sin((1 - 2 * i) * pi / m)});
    }
    reset();
  }

  int m() const { return m_; }
  int vocab() const { return 2 * m_; }

  void reset() {
    rot_ = Matrix(1, 1);
    rot_(0, 0) = 1.0;
    ref_ = Matrix(1, 1);
    ref_(0, 0) = 1.0;
    h_ = Matrix(2, 1);
    h_(0, 0) = 1.0;
    h_(1, 0) = 0.0;
  }

  void feed(int token) {
    if (token < 0 || token >= 2 * m_)
      throw std::invalid_argument("DihedralTwoLayerModel: token out of range");
    const bool rotation = token < m_;
    const int idx = rotation ? token : token - m_;

    // Layer 1: two scalar heads, state in {+1, -1}; beta = 2 on the tokens
    // the head counts, beta = 0 otherwise.
    rot_ = step(rot_, parity_step(rotation));
    ref_ = step(ref_, parity_step(!rotation));

    // Selector: rotation parity after this token, flipped for reflections.
    const int rot_par = rot_(0, 0) < 0.0 ? 1 : 0;
    const int sel = rotation ? rot_par : 1 - rot_par;

    const double pi = std::numbers::pi;
    double theta;
    if (rotation)
      theta = (sel == 1 ? (1 - 2 * idx) : (1 + 2 * idx)) * pi / m_;
    else
      theta = (sel == 1 ? (-2 * idx) : (2 + 2 * idx)) * pi / m_;

    StepInputs s;
    s.keys = {detail::plane_key((theta - pi) / 2.0)};
    s.betas = {2.0};
    s.values = {Vec(1, 0.0)};
    s.gate = 1.0;
    h_ = step(h_, s);
  }

  // The state lands on d_i or c_i, both carrying rotation index i; which
  // sheet it sits on varies with the interleaving, so the argmax runs over
  // the union and only the index survives. Reflection parity picks whether
  // index i reads as r_i or s_{m-i}.
  int output() const {
    int best = 0;
    double best_dot = -2.0;
    for (int i = 0; i < m_; ++i) {
      const double dd = dstates_[i][0] * h_(0, 0) + dstates_[i][1] * h_(1, 0);
      const double dc = cstates_[i][0] * h_(0, 0) + cstates_[i][1] * h_(1, 0);
      const double dot = std::max(dd, dc);
      if (dot > best_dot) {
        best_dot = dot;
        best = i;
      }
    }
    if (1.0 - best_dot > 1e-6)
      throw std::runtime_error("DihedralTwoLayerModel: state off-lattice");
    const int ref_par = ref_(0, 0) < 0.0 ? 1 : 0;
    return ref_par == 0 ? best : m_ + (m_ - best) % m_;
  }

  // Smallest gap between decoder states that read as different indices
  // (d_i and c_i share an index, so their gap never matters).
  double decoder_margin() const {
    double worst = 2.0;
    auto gap = [&](const Vec& a, const Vec& b) { return 1.0 - (a[0] * b[0] + a[1] * b[1]); };
    for (int i = 0; i < m_; ++i)
      for (int j = 0; j < m_; ++j) {
        if (i == j) continue;
        worst = std::min(worst, gap(dstates_[i], dstates_[j]));
        worst = std::min(worst, gap(cstates_[i], cstates_[j]));
        worst = std::min(worst, gap(dstates_[i], cstates_[j]));
      }
    return worst;
  }

  const Matrix& state() const { return h_; }

 private:
  static StepInputs parity_step(bool toggle) {
    StepInputs s;
    s.keys = {Vec(1, 1.0)};
    s.betas = {toggle ? 2.0 : 0.0};
    s.values = {Vec(1, 0.0)};
    s.gate = 1.0;
    return s;
  }

  int m_;
  Matrix rot_, ref_;  // layer-1 parity states
  Matrix h_;          // layer-2 state
  std::vector<Vec> dstates_, cstates_;
};

class DihedralOracle {
 public:
  explicit DihedralOracle(int m) : m_(m) {}
  void reset() { y_ = 0; }
  void feed(int token) { y_ = dihedral_compose(m_, y_, token); }
  int output() const { return y_; }

 private:
  int m_;
  int y_ = 0;
};

// ---- verification driver ----

struct VerifyReport {
  std::string construction;
  int trials = 0;
  int length = 0;
  long long positions = 0;
  long long mismatches = 0;
  bool pass = false;
};

template <typename ModelT, typename OracleT>
VerifyReport verify_construction(ModelT& model, OracleT& oracle, int vocab, int trials,
                                 int length, std::uint64_t seed, std::string name) {
  if (trials < 1 || length < 1 || vocab < 1)
    throw std::invalid_argument("verify_construction: bad arguments");
  VerifyReport rep;
  rep.construction = std::move(name);
  rep.trials = trials;
  rep.length = length;
  Rng rng(seed);
  for (int trial = 0; trial < trials; ++trial) {
    model.reset();
    oracle.reset();
    for (int i = 0; i < length; ++i) {
      const int tok = static_cast<int>(rng.uniform_int(0, vocab - 1));
      model.feed(tok);
      oracle.feed(tok);
      ++rep.positions;
      if (model.output() != oracle.output()) ++rep.mismatches;
    }
  }
  rep.pass = rep.mismatches == 0;
  return rep;
}

}  // namespace dp
