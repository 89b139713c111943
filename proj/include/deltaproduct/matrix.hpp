#pragma once

// Dense row-major f64 matrices and the numerics the library is built on:
// matmul with a fixed summation order, 2x2 spectra, one-sided Jacobi SVD,
// and PCA on top of the SVD. Everything is double precision.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace dp {

using Vec = std::vector<double>;

struct Matrix {
  int rows = 0, cols = 0;
  std::vector<double> a;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), a(static_cast<std::size_t>(r) * c, 0.0) {
    if (r < 0 || c < 0) throw std::invalid_argument("Matrix: negative shape");
  }
  Matrix(int r, int c, std::initializer_list<double> vals) : Matrix(r, c) {
    if (static_cast<int>(vals.size()) != r * c)
      throw std::invalid_argument("Matrix: initializer size mismatch");
    std::copy(vals.begin(), vals.end(), a.begin());
  }

  double& operator()(int i, int j) { return a[static_cast<std::size_t>(i) * cols + j]; }
  double operator()(int i, int j) const { return a[static_cast<std::size_t>(i) * cols + j]; }
  double* row(int i) { return a.data() + static_cast<std::size_t>(i) * cols; }
  const double* row(int i) const { return a.data() + static_cast<std::size_t>(i) * cols; }
  std::size_t size() const { return a.size(); }

  static Matrix zeros(int r, int c) { return Matrix(r, c); }
  static Matrix identity(int n) {
    Matrix m(n, n);
    for (int i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }
};

inline void check_same_shape(const Matrix& x, const Matrix& y, const char* who) {
  if (x.rows != y.rows || x.cols != y.cols)
    throw std::invalid_argument(std::string(who) + ": shape mismatch");
}

// C[i][j] accumulates A[i][k]*B[k][j] for k = 0,1,2,... in that order, so
// results are reproducible run to run and independent of blocking.
inline Matrix matmul(const Matrix& A, const Matrix& B) {
  if (A.cols != B.rows) throw std::invalid_argument("matmul: inner dim mismatch");
  Matrix C(A.rows, B.cols);
  for (int i = 0; i < A.rows; ++i) {
    double* ci = C.row(i);
    const double* ai = A.row(i);
    for (int k = 0; k < A.cols; ++k) {
      const double aik = ai[k];
      const double* bk = B.row(k);
      for (int j = 0; j < B.cols; ++j) ci[j] += aik * bk[j];
    }
  }
  return C;
}

inline Vec matvec(const Matrix& M, const Vec& x) {
  if (M.cols != static_cast<int>(x.size()))
    throw std::invalid_argument("matvec: dim mismatch");
  Vec y(M.rows, 0.0);
  for (int i = 0; i < M.rows; ++i) {
    const double* mi = M.row(i);
    for (int j = 0; j < M.cols; ++j) y[i] += mi[j] * x[j];
  }
  return y;
}

inline Matrix transpose(const Matrix& M) {
  Matrix T(M.cols, M.rows);
  for (int i = 0; i < M.rows; ++i)
    for (int j = 0; j < M.cols; ++j) T(j, i) = M(i, j);
  return T;
}

inline Matrix add(const Matrix& x, const Matrix& y) {
  check_same_shape(x, y, "add");
  Matrix r = x;
  for (std::size_t i = 0; i < r.size(); ++i) r.a[i] += y.a[i];
  return r;
}

inline Matrix sub(const Matrix& x, const Matrix& y) {
  check_same_shape(x, y, "sub");
  Matrix r = x;
  for (std::size_t i = 0; i < r.size(); ++i) r.a[i] -= y.a[i];
  return r;
}

inline Matrix scale(const Matrix& x, double s) {
  Matrix r = x;
  for (double& v : r.a) v *= s;
  return r;
}

inline double frobenius_norm(const Matrix& m) {
  double s = 0.0;
  for (double v : m.a) s += v * v;
  return std::sqrt(s);
}

inline double max_abs_diff(const Matrix& x, const Matrix& y) {
  check_same_shape(x, y, "max_abs_diff");
  double d = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) d = std::max(d, std::abs(x.a[i] - y.a[i]));
  return d;
}

inline double dot(const Vec& x, const Vec& y) {
  if (x.size() != y.size()) throw std::invalid_argument("dot: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
  return s;
}

inline double norm2(const Vec& x) { return std::sqrt(dot(x, x)); }

struct Spectrum2 {
  std::complex<double> lambda1, lambda2;  // lambda1 carries +sqrt branch
  double discriminant = 0.0;              // trace^2 - 4 det
};

inline Spectrum2 eig_from_trace_det(double tr, double det) {
  Spectrum2 s;
  s.discriminant = tr * tr - 4.0 * det;
  if (s.discriminant >= 0.0) {
    const double r = std::sqrt(s.discriminant);
    s.lambda1 = {(tr + r) / 2.0, 0.0};
    s.lambda2 = {(tr - r) / 2.0, 0.0};
  } else {
    const double im = std::sqrt(-s.discriminant) / 2.0;
    s.lambda1 = {tr / 2.0, im};
    s.lambda2 = {tr / 2.0, -im};
  }
  return s;
}

inline Spectrum2 eig2x2(const Matrix& m) {
  if (m.rows != 2 || m.cols != 2) throw std::invalid_argument("eig2x2: need 2x2");
  return eig_from_trace_det(m(0, 0) + m(1, 1), m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0));
}

struct SvdResult {
  Vec sigma;    // descending
  Matrix v;     // right singular vectors as columns, aligned with sigma
  int sweeps = 0;
  bool converged = false;
};

// One-sided Jacobi on the columns of M (Hestenes). Only the right singular
// vectors are accumulated; that is all PCA and the norm routines need.
// Intended for sizes up to a few hundred.
inline SvdResult svd_onesided_jacobi(const Matrix& M, bool want_v = false) {
  constexpr int kMaxSweeps = 100;
  constexpr double kTol = 1e-12;
  const int m = M.rows, n = M.cols;
  Matrix w = M;
  Matrix v = want_v ? Matrix::identity(n) : Matrix();
  SvdResult out;
  out.sweeps = 0;
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    ++out.sweeps;
    bool rotated = false;
    for (int p = 0; p < n - 1; ++p) {
      for (int q = p + 1; q < n; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (int i = 0; i < m; ++i) {
          const double* wi = w.row(i);
          alpha += wi[p] * wi[p];
          beta += wi[q] * wi[q];
          gamma += wi[p] * wi[q];
        }
        if (alpha == 0.0 || beta == 0.0) continue;
        if (std::abs(gamma) <= kTol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0.0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t), s = c * t;
        for (int i = 0; i < m; ++i) {
          double* wi = w.row(i);
          const double wp = wi[p], wq = wi[q];
          wi[p] = c * wp - s * wq;
          wi[q] = s * wp + c * wq;
        }
        if (want_v) {
          for (int i = 0; i < n; ++i) {
            double* vi = v.row(i);
            const double vp = vi[p], vq = vi[q];
            vi[p] = c * vp - s * vq;
            vi[q] = s * vp + c * vq;
          }
        }
      }
    }
    if (!rotated) { out.converged = true; break; }
  }
  out.sigma.resize(n);
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (int j = 0; j < n; ++j) {
    double s = 0.0;
    for (int i = 0; i < m; ++i) s += w(i, j) * w(i, j);
    out.sigma[j] = std::sqrt(s);
  }
  std::stable_sort(order.begin(), order.end(),
                   [&](int x, int y) { return out.sigma[x] > out.sigma[y]; });
  Vec sorted(n);
  for (int j = 0; j < n; ++j) sorted[j] = out.sigma[order[j]];
  out.sigma = std::move(sorted);
  if (want_v) {
    Matrix vs(n, n);
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < n; ++i) vs(i, j) = v(i, order[j]);
    out.v = std::move(vs);
  }
  return out;
}

inline Vec singular_values(const Matrix& M) {
  // Transposing keeps the spectrum and puts the short side on the columns,
  // where one-sided Jacobi converges fastest.
  if (M.rows < M.cols) return svd_onesided_jacobi(transpose(M)).sigma;
  return svd_onesided_jacobi(M).sigma;
}

inline double spectral_norm(const Matrix& M) {
  const Vec s = singular_values(M);
  return s.empty() ? 0.0 : s.front();
}

struct PcaResult {
  Matrix components;       // rows = principal directions, descending variance
  Vec explained_ratio;     // sums to 1
  Vec mean;                // column means removed before the SVD
};

// Rows of data are samples. Throws when the centered data has no variance.
inline PcaResult pca(const Matrix& data) {
  if (data.rows < 2) throw std::invalid_argument("pca: need at least 2 samples");
  const int m = data.rows, n = data.cols;
  PcaResult out;
  out.mean.assign(n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.mean[j] += data(i, j);
  for (int j = 0; j < n; ++j) out.mean[j] /= m;
  Matrix centered(m, n);
  double scale = 0.0;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      centered(i, j) = data(i, j) - out.mean[j];
      scale = std::max(scale, std::abs(centered(i, j)));
    }
  if (scale == 0.0) throw std::runtime_error("pca: zero variance (all samples equal)");
  SvdResult svd = svd_onesided_jacobi(centered, /*want_v=*/true);
  double total = 0.0;
  for (double s : svd.sigma) total += s * s;
  if (total == 0.0) throw std::runtime_error("pca: zero variance");
  out.explained_ratio.resize(n);
  for (int j = 0; j < n; ++j) out.explained_ratio[j] = svd.sigma[j] * svd.sigma[j] / total;
  out.components = transpose(svd.v);
  return out;
}

}  // namespace dp
