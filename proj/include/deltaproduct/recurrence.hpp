#pragma once

// The DeltaProduct recurrence H_i = A(x_i) H_{i-1} + B(x_i) with
//   A(x_i) = g_i (I - b_{i,n_h} k k^T) ... (I - b_{i,1} k k^T)
//   B(x_i) = sum_j (I - b_{i,n_h} k k^T) ... (I - b_{i,j+1} k k^T) b_{i,j} k_{i,j} v_{i,j}^T
// evaluated three ways: token by token, as the expanded single-factor
// sequence, and chunkwise via dense per-chunk affine operators. The gate
// scales only the homogeneous part, i.e. it rides on the first micro-step.

#include <stdexcept>
#include <vector>

#include "deltaproduct/householder.hpp"
#include "deltaproduct/matrix.hpp"

namespace dp {

// Per-token inputs for one head: n_h (key, beta, value) triples plus a gate.
struct StepInputs {
  std::vector<Vec> keys;    // unit vectors, dim n
  Vec betas;                // in [0,2]
  std::vector<Vec> values;  // dim d
  double gate = 1.0;        // in [0,1]; 1 when ungated
};

inline void validate_step_inputs(const StepInputs& s) {
  const std::size_t n_h = s.keys.size();
  if (n_h == 0 || s.betas.size() != n_h || s.values.size() != n_h)
    throw std::invalid_argument("StepInputs: keys/betas/values must share n_h >= 1");
  for (const Vec& k : s.keys)
    if (std::abs(norm2(k) - 1.0) > 1e-9)
      throw std::invalid_argument("StepInputs: keys must be unit norm");
  for (double b : s.betas)
    if (b < -1e-12 || b > 2.0 + 1e-12)
      throw std::invalid_argument("StepInputs: beta outside [0,2]");
  if (s.gate < -1e-12 || s.gate > 1.0 + 1e-12)
    throw std::invalid_argument("StepInputs: gate outside [0,1]");
}

// H <- gamma (H - beta k (k^T H)) + beta k v^T. Both the sequential and the
// expanded form funnel through this one function so they agree bitwise.
inline void micro_step(Matrix& h, const Vec& k, double beta, const Vec& v, double gamma) {
  const int n = h.rows, d = h.cols;
  Vec a(d, 0.0);
  for (int i = 0; i < n; ++i) {
    const double* hi = h.row(i);
    const double ki = k[i];
    for (int j = 0; j < d; ++j) a[j] += ki * hi[j];
  }
  for (int i = 0; i < n; ++i) {
    double* hi = h.row(i);
    const double bk = beta * k[i];
    for (int j = 0; j < d; ++j) hi[j] = gamma * (hi[j] - bk * a[j]) + bk * v[j];
  }
}

inline Matrix step(Matrix h, const StepInputs& s) {
  const std::size_t n_h = s.keys.size();
  for (std::size_t j = 0; j < n_h; ++j)
    micro_step(h, s.keys[j], s.betas[j], s.values[j], j == 0 ? s.gate : 1.0);
  return h;
}

inline std::vector<Matrix> forward_sequential(const Matrix& h0,
                                              const std::vector<StepInputs>& seq) {
  std::vector<Matrix> states;
  states.reserve(seq.size());
  Matrix h = h0;
  for (const StepInputs& s : seq) {
    h = step(std::move(h), s);
    states.push_back(h);
  }
  return states;
}

// Same arithmetic as forward_sequential, phrased as the length n_h * t
// single-factor recurrence with gates [g_1, 1, ..., 1, g_2, 1, ...]; only
// every n_h-th state is a token state.
inline std::vector<Matrix> forward_expanded(const Matrix& h0,
                                            const std::vector<StepInputs>& seq) {
  struct Micro {
    const Vec* k;
    const Vec* v;
    double beta, gamma;
  };
  std::vector<Micro> flat;
  std::vector<std::size_t> keep;
  for (const StepInputs& s : seq) {
    for (std::size_t j = 0; j < s.keys.size(); ++j)
      flat.push_back({&s.keys[j], &s.values[j], s.betas[j], j == 0 ? s.gate : 1.0});
    keep.push_back(flat.size() - 1);
  }
  std::vector<Matrix> states;
  states.reserve(seq.size());
  Matrix h = h0;
  std::size_t next_keep = 0;
  for (std::size_t i = 0; i < flat.size(); ++i) {
    micro_step(h, *flat[i].k, flat[i].beta, *flat[i].v, flat[i].gamma);
    if (next_keep < keep.size() && keep[next_keep] == i) {
      states.push_back(h);
      ++next_keep;
    }
  }
  return states;
}

// One token as a dense affine map H -> A H + B.
struct TokenAffine {
  Matrix a;  // n x n
  Matrix b;  // n x d
};

inline TokenAffine token_affine(const StepInputs& s, int n, int d) {
  TokenAffine t{Matrix::identity(n), Matrix::zeros(n, d)};
  for (std::size_t j = 0; j < s.keys.size(); ++j) {
    const Vec& k = s.keys[j];
    const double beta = s.betas[j];
    const double gamma = j == 0 ? s.gate : 1.0;
    // (A, B) <- (gamma F A, gamma F B + beta k v^T) with F = I - beta k k^T
    for (Matrix* m : {&t.a, &t.b}) {
      for (int c = 0; c < m->cols; ++c) {
        double acc = 0.0;
        for (int r = 0; r < m->rows; ++r) acc += k[r] * (*m)(r, c);
        acc *= beta;
        for (int r = 0; r < m->rows; ++r)
          (*m)(r, c) = gamma * ((*m)(r, c) - acc * k[r]);
      }
    }
    const Vec& v = s.values[j];
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < d; ++c) t.b(r, c) += beta * k[r] * v[c];
  }
  return t;
}

// Chunkwise evaluation: each chunk's tokens are composed into dense prefix
// operators relative to the chunk start, boundary states hop chunk to chunk
// through the full-chunk operator, and interior states are read off the
// prefixes. All work inside a chunk depends only on its boundary state.
// chunk == 1 is the sequential recurrence and takes that code path.
inline std::vector<Matrix> forward_chunked(const Matrix& h0,
                                           const std::vector<StepInputs>& seq, int chunk) {
  if (chunk < 1) throw std::invalid_argument("forward_chunked: chunk must be >= 1");
  if (chunk == 1) return forward_sequential(h0, seq);
  const int n = h0.rows, d = h0.cols;
  const std::size_t t = seq.size();
  std::vector<Matrix> states(t);
  Matrix boundary = h0;
  for (std::size_t start = 0; start < t; start += chunk) {
    const std::size_t end = std::min(t, start + chunk);
    std::vector<TokenAffine> prefix;
    prefix.reserve(end - start);
    TokenAffine acc{Matrix::identity(n), Matrix::zeros(n, d)};
    for (std::size_t i = start; i < end; ++i) {
      const TokenAffine tok = token_affine(seq[i], n, d);
      acc.a = matmul(tok.a, acc.a);
      acc.b = add(matmul(tok.a, acc.b), tok.b);
      prefix.push_back(acc);
    }
    for (std::size_t i = start; i < end; ++i) {
      const TokenAffine& p = prefix[i - start];
      states[i] = add(matmul(p.a, boundary), p.b);
    }
    boundary = states[end - 1];
  }
  return states;
}

}  // namespace dp
