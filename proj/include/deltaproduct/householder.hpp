#pragma once

// Generalized Householder transformations I - beta k k^T with unit k and
// beta in [0,2], their gated products, and the exact algebra used by the
// theory checks: same-key collapse, the orthogonal-key sum form, the
// two-factor spectrum on span{k1,k2}, and the RWKV-7 style matrices whose
// alternating products blow up.

#include <cmath>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "deltaproduct/matrix.hpp"

namespace dp {

struct HouseholderFactor {
  Vec k;        // unit vector
  double beta;  // in [0,2]
};

inline HouseholderFactor make_factor(Vec k, double beta) {
  const double n = norm2(k);
  if (std::abs(n - 1.0) > 1e-9)
    throw std::invalid_argument("make_factor: key must be unit norm");
  if (beta < -1e-12 || beta > 2.0 + 1e-12)
    throw std::invalid_argument("make_factor: beta outside [0,2]");
  return {std::move(k), beta};
}

// A = gate * (I - beta_{n_h} k k^T) ... (I - beta_1 k k^T); factor 1 acts on
// the state first. gate in [0,1] keeps the operator norm at most 1.
struct HouseholderProduct {
  std::vector<HouseholderFactor> factors;
  double gate = 1.0;
};

inline Vec apply_factor(const HouseholderFactor& f, const Vec& h) {
  const double c = f.beta * dot(f.k, h);
  Vec out = h;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= c * f.k[i];
  return out;
}

inline Vec apply_product(const HouseholderProduct& p, Vec h) {
  for (const auto& f : p.factors) h = apply_factor(f, h);
  for (double& v : h) v *= p.gate;
  return h;
}

inline Matrix realize(const HouseholderProduct& p) {
  if (p.factors.empty()) throw std::invalid_argument("realize: empty product");
  const int n = static_cast<int>(p.factors.front().k.size());
  Matrix m = Matrix::identity(n);
  for (const auto& f : p.factors) {
    if (static_cast<int>(f.k.size()) != n)
      throw std::invalid_argument("realize: key dims disagree");
    // m <- (I - beta k k^T) m, column by column
    for (int j = 0; j < n; ++j) {
      double c = 0.0;
      for (int i = 0; i < n; ++i) c += f.k[i] * m(i, j);
      c *= f.beta;
      for (int i = 0; i < n; ++i) m(i, j) -= c * f.k[i];
    }
  }
  for (double& v : m.a) v *= p.gate;
  return m;
}

// Two factors with the same key merge into one: beta* = b1 + b2 - b1 b2.
// Folding left over the list collapses any run of same-key factors.
inline double collapse_same_key(const std::vector<double>& betas) {
  if (betas.empty()) throw std::invalid_argument("collapse_same_key: empty");
  double acc = betas.front();
  for (std::size_t i = 1; i < betas.size(); ++i)
    acc = acc + betas[i] - acc * betas[i];
  return acc;
}

struct OrthogonalSumForm {
  Matrix a;              // I - sum_j beta_j k_j k_j^T
  Vec eigenvalues;       // {1 - beta_j} then padding 1s, n entries total
};

// Valid only when keys are mutually orthogonal; then the product of factors
// is the sum form and its spectrum is {1 - beta_j} plus 1 with multiplicity
// n - n_h.
inline OrthogonalSumForm orthogonal_sum_form(const HouseholderProduct& p) {
  if (p.factors.empty()) throw std::invalid_argument("orthogonal_sum_form: empty product");
  const int n = static_cast<int>(p.factors.front().k.size());
  for (std::size_t i = 0; i < p.factors.size(); ++i)
    for (std::size_t j = i + 1; j < p.factors.size(); ++j)
      if (std::abs(dot(p.factors[i].k, p.factors[j].k)) > 1e-9)
        throw std::invalid_argument("orthogonal_sum_form: keys not orthogonal");
  OrthogonalSumForm out;
  out.a = Matrix::identity(n);
  for (const auto& f : p.factors)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) out.a(i, j) -= f.beta * f.k[i] * f.k[j];
  for (const auto& f : p.factors) out.eigenvalues.push_back(1.0 - f.beta);
  while (static_cast<int>(out.eigenvalues.size()) < n) out.eigenvalues.push_back(1.0);
  return out;
}

// Spectrum of (I - b2 k2 k2^T)(I - b1 k1 k1^T) restricted to span{k1, k2},
// where cos_theta = k1^T k2. On that 2-d invariant subspace
//   trace = 2 - b1 - b2 + b1 b2 cos^2(theta),  det = (1 - b1)(1 - b2).
inline Spectrum2 two_factor_spectrum(double b1, double b2, double cos_theta) {
  const double c2 = cos_theta * cos_theta;
  const double tr = 2.0 - b1 - b2 + b1 * b2 * c2;
  const double det = (1.0 - b1) * (1.0 - b2);
  return eig_from_trace_det(tr, det);
}

// Open interval of cos^2(theta) where the two-factor spectrum is complex:
//   (sqrt(b1-1) -+ sqrt(b2-1))^2 / (b1 b2).
// Nonempty only when both betas exceed 1 (and the interval collapses when
// b1 == b2 only at the lower end 0).
inline std::optional<std::pair<double, double>> complex_region_bounds(double b1, double b2) {
  if (!(b1 > 1.0) || !(b2 > 1.0)) return std::nullopt;
  const double r1 = std::sqrt(b1 - 1.0), r2 = std::sqrt(b2 - 1.0);
  const double lo = (r1 - r2) * (r1 - r2) / (b1 * b2);
  const double hi = (r1 + r2) * (r1 + r2) / (b1 * b2);
  if (!(lo < hi)) return std::nullopt;  // degenerate open interval
  return std::make_pair(lo, hi);
}

// RWKV-7 style transition: diag(w) - c k (k .* a)^T.
inline Matrix rwkv7_realize(const Vec& w, const Vec& k, const Vec& a, double c) {
  const std::size_t n = w.size();
  if (k.size() != n || a.size() != n)
    throw std::invalid_argument("rwkv7_realize: size mismatch");
  Matrix m(static_cast<int>(n), static_cast<int>(n));
  for (std::size_t i = 0; i < n; ++i) {
    m(static_cast<int>(i), static_cast<int>(i)) = w[i];
    for (std::size_t j = 0; j < n; ++j)
      m(static_cast<int>(i), static_cast<int>(j)) -= c * k[i] * (k[j] * a[j]);
  }
  return m;
}

struct InstabilityDemo {
  Matrix a, a_prime;       // the two alternating transitions
  double rho;              // spectral radius of a * a_prime
  Vec norm_trace;          // ||A_j ... A_1||_2 after each step, A_1 = a_prime
};

// Alternating product of two valid RWKV-7 transitions (w = 1, c = 1,
// unit keys, a in [0,1]^2) whose spectral radius exceeds 1: the recurrence
// is unstable even though each factor alone is well behaved.
inline InstabilityDemo rwkv7_instability_demo(int steps) {
  if (steps < 2 || steps % 2 != 0)
    throw std::invalid_argument("rwkv7_instability_demo: steps must be even and >= 2");
  const double th = M_PI / 3.0;
  const Vec ones{1.0, 1.0};
  InstabilityDemo out;
  out.a = rwkv7_realize(ones, {std::sin(th), std::cos(th)}, {0.0, 1.0}, 1.0);
  out.a_prime = rwkv7_realize(ones, {std::cos(th), std::sin(th)}, {1.0, 0.0}, 1.0);
  const Spectrum2 sp = eig2x2(matmul(out.a, out.a_prime));
  out.rho = std::max(std::abs(sp.lambda1), std::abs(sp.lambda2));
  Matrix p = Matrix::identity(2);
  out.norm_trace.reserve(static_cast<std::size_t>(steps));
  for (int j = 1; j <= steps; ++j) {
    p = matmul(j % 2 == 1 ? out.a_prime : out.a, p);
    out.norm_trace.push_back(spectral_norm(p));
  }
  return out;
}

}  // namespace dp
