#pragma once

// Tape-based reverse-mode autodiff over dense f64 matrices. Nodes are
// appended in topological order, so backward is a single reverse scan.
// Parameters live outside the tape: leaves can point at external value
// storage and accumulate their gradient straight into an external sink,
// which is how per-sample tapes add up into one batch gradient without a
// second reduction pass. The DeltaProduct scan is one primitive with a
// hand-derived backward.

#include <cassert>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "deltaproduct/matrix.hpp"

namespace dp {

using NodeId = int;

inline double silu_scalar(double x) { return x / (1.0 + std::exp(-x)); }
inline double sigmoid_scalar(double x) { return 1.0 / (1.0 + std::exp(-x)); }

class Tape {
 public:
  // Computed or constant leaf (owned storage).
  NodeId input(Matrix value, bool needs_grad = false) {
    Node n;
    n.owned = std::move(value);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size()) - 1;
  }

  // Parameter leaf: value is read through the pointer, gradient accumulates
  // into *grad_sink (pre-sized by the caller, zeroed once per batch).
  NodeId param(const Matrix* value, Matrix* grad_sink) {
    Node n;
    n.external = value;
    n.sink = grad_sink;
    n.needs_grad = grad_sink != nullptr;
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size()) - 1;
  }

  const Matrix& value(NodeId id) const { return nodes_[id].v(); }

  Matrix& grad(NodeId id) {
    Node& n = nodes_[id];
    if (n.sink) return *n.sink;
    if (n.grad.size() == 0) {
      const Matrix& v = n.v();
      n.grad = Matrix::zeros(v.rows, v.cols);
    }
    return n.grad;
  }

  bool has_grad(NodeId id) const {
    return nodes_[id].sink != nullptr || nodes_[id].grad.size() != 0;
  }

  // ---- primitives ----

  // A (m x k) times B (k x n).
  NodeId matmul(NodeId a, NodeId b) {
    const Matrix& av = value(a);
    const Matrix& bv = value(b);
    NodeId out = emit(dp::matmul(av, bv), {a, b});
    set_backward(out, [this, a, b, out] {
      const Matrix& g = grad_of(out);
      if (wants(a)) mm_nt_acc(g, value(b), grad(a));   // dA += g B^T
      if (wants(b)) mm_tn_acc(value(a), g, grad(b));   // dB += A^T g
    });
    return out;
  }

  // A (m x k) times B^T with B (n x k); the projection workhorse.
  NodeId matmul_nt(NodeId a, NodeId b) {
    const Matrix& av = value(a);
    const Matrix& bv = value(b);
    if (av.cols != bv.cols) throw std::invalid_argument("matmul_nt: inner dim mismatch");
    Matrix c(av.rows, bv.rows);
    mm_nt_acc(av, bv, c);
    NodeId out = emit(std::move(c), {a, b});
    set_backward(out, [this, a, b, out] {
      const Matrix& g = grad_of(out);
      if (wants(a)) {
        Matrix& ga = grad(a);
        const Matrix& bv2 = value(b);
        for (int i = 0; i < g.rows; ++i) {  // dA += g B
          double* gi = ga.row(i);
          const double* grow = g.row(i);
          for (int r = 0; r < bv2.rows; ++r) {
            const double s = grow[r];
            const double* br = bv2.row(r);
            for (int j = 0; j < bv2.cols; ++j) gi[j] += s * br[j];
          }
        }
      }
      if (wants(b)) mm_tn_acc(g, value(a), grad(b));  // dB += g^T A
    });
    return out;
  }

  NodeId add(NodeId a, NodeId b) {
    NodeId out = emit(dp::add(value(a), value(b)), {a, b});
    set_backward(out, [this, a, b, out] {
      const Matrix& g = grad_of(out);
      if (wants(a)) acc(grad(a), g);
      if (wants(b)) acc(grad(b), g);
    });
    return out;
  }

  NodeId mul(NodeId a, NodeId b) {
    const Matrix& av = value(a);
    const Matrix& bv = value(b);
    check_same_shape(av, bv, "tape mul");
    Matrix c = av;
    for (std::size_t i = 0; i < c.size(); ++i) c.a[i] *= bv.a[i];
    NodeId out = emit(std::move(c), {a, b});
    set_backward(out, [this, a, b, out] {
      const Matrix& g = grad_of(out);
      if (wants(a)) {
        Matrix& ga = grad(a);
        const Matrix& bv2 = value(b);
        for (std::size_t i = 0; i < g.size(); ++i) ga.a[i] += g.a[i] * bv2.a[i];
      }
      if (wants(b)) {
        Matrix& gb = grad(b);
        const Matrix& av2 = value(a);
        for (std::size_t i = 0; i < g.size(); ++i) gb.a[i] += g.a[i] * av2.a[i];
      }
    });
    return out;
  }

  NodeId scale(NodeId a, double s) {
    NodeId out = emit(dp::scale(value(a), s), {a});
    set_backward(out, [this, a, s, out] {
      if (!wants(a)) return;
      const Matrix& g = grad_of(out);
      Matrix& ga = grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga.a[i] += s * g.a[i];
    });
    return out;
  }

  // x (t x c) plus a (1 x c) bias broadcast over rows.
  NodeId bias_add_row(NodeId x, NodeId bias) {
    const Matrix& xv = value(x);
    const Matrix& bv = value(bias);
    if (bv.rows != 1 || bv.cols != xv.cols)
      throw std::invalid_argument("bias_add_row: bias must be 1 x cols");
    Matrix y = xv;
    for (int i = 0; i < y.rows; ++i) {
      double* yi = y.row(i);
      for (int j = 0; j < y.cols; ++j) yi[j] += bv(0, j);
    }
    NodeId out = emit(std::move(y), {x, bias});
    set_backward(out, [this, x, bias, out] {
      const Matrix& g = grad_of(out);
      if (wants(x)) acc(grad(x), g);
      if (wants(bias)) {
        Matrix& gb = grad(bias);
        for (int i = 0; i < g.rows; ++i)
          for (int j = 0; j < g.cols; ++j) gb(0, j) += g(i, j);
      }
    });
    return out;
  }

  NodeId silu(NodeId a) {
    Matrix y = value(a);
    for (double& v : y.a) v = silu_scalar(v);
    NodeId out = emit(std::move(y), {a});
    set_backward(out, [this, a, out] {
      if (!wants(a)) return;
      const Matrix& g = grad_of(out);
      const Matrix& x = value(a);
      Matrix& ga = grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double s = sigmoid_scalar(x.a[i]);
        ga.a[i] += g.a[i] * s * (1.0 + x.a[i] * (1.0 - s));
      }
    });
    return out;
  }

  NodeId sigmoid(NodeId a) {
    Matrix y = value(a);
    for (double& v : y.a) v = sigmoid_scalar(v);
    NodeId out = emit(std::move(y), {a});
    set_backward(out, [this, a, out] {
      if (!wants(a)) return;
      const Matrix& g = grad_of(out);
      const Matrix& y2 = value(out);
      Matrix& ga = grad(a);
      for (std::size_t i = 0; i < g.size(); ++i)
        ga.a[i] += g.a[i] * y2.a[i] * (1.0 - y2.a[i]);
    });
    return out;
  }

  // Rows scaled to unit l2 norm; all-zero rows stay zero (and pass no grad).
  NodeId l2normalize_rows(NodeId a) {
    const Matrix& x = value(a);
    Matrix y = x;
    Vec norms(x.rows, 0.0);
    for (int i = 0; i < x.rows; ++i) {
      double s = 0.0;
      const double* xi = x.row(i);
      for (int j = 0; j < x.cols; ++j) s += xi[j] * xi[j];
      norms[i] = std::sqrt(s);
      double* yi = y.row(i);
      if (norms[i] > 1e-12)
        for (int j = 0; j < x.cols; ++j) yi[j] /= norms[i];
      else
        for (int j = 0; j < x.cols; ++j) yi[j] = 0.0;
    }
    NodeId out = emit(std::move(y), {a});
    set_backward(out, [this, a, out, norms] {
      if (!wants(a)) return;
      const Matrix& g = grad_of(out);
      const Matrix& y2 = value(out);
      Matrix& ga = grad(a);
      for (int i = 0; i < g.rows; ++i) {
        if (norms[i] <= 1e-12) continue;
        const double* gi = g.row(i);
        const double* yi = y2.row(i);
        double dotyg = 0.0;
        for (int j = 0; j < g.cols; ++j) dotyg += yi[j] * gi[j];
        double* gai = ga.row(i);
        for (int j = 0; j < g.cols; ++j) gai[j] += (gi[j] - yi[j] * dotyg) / norms[i];
      }
    });
    return out;
  }

  // y = scale .* x / sqrt(eps + mean(x^2)) per row; scale is 1 x c.
  NodeId rmsnorm_rows(NodeId x, NodeId scale_param, double eps) {
    const Matrix& xv = value(x);
    const Matrix& sv = value(scale_param);
    if (sv.rows != 1 || sv.cols != xv.cols)
      throw std::invalid_argument("rmsnorm_rows: scale must be 1 x cols");
    Matrix y(xv.rows, xv.cols);
    Vec rinv(xv.rows);
    for (int i = 0; i < xv.rows; ++i) {
      const double* xi = xv.row(i);
      double ms = 0.0;
      for (int j = 0; j < xv.cols; ++j) ms += xi[j] * xi[j];
      rinv[i] = 1.0 / std::sqrt(eps + ms / xv.cols);
      double* yi = y.row(i);
      for (int j = 0; j < xv.cols; ++j) yi[j] = sv(0, j) * xi[j] * rinv[i];
    }
    NodeId out = emit(std::move(y), {x, scale_param});
    set_backward(out, [this, x, scale_param, out, rinv] {
      const Matrix& g = grad_of(out);
      const Matrix& xv2 = value(x);
      const Matrix& sv2 = value(scale_param);
      const int c = xv2.cols;
      if (wants(scale_param)) {
        Matrix& gs = grad(scale_param);
        for (int i = 0; i < g.rows; ++i) {
          const double* gi = g.row(i);
          const double* xi = xv2.row(i);
          for (int j = 0; j < c; ++j) gs(0, j) += gi[j] * xi[j] * rinv[i];
        }
      }
      if (wants(x)) {
        Matrix& gx = grad(x);
        for (int i = 0; i < g.rows; ++i) {
          const double* gi = g.row(i);
          const double* xi = xv2.row(i);
          double inner = 0.0;
          for (int j = 0; j < c; ++j) inner += gi[j] * sv2(0, j) * xi[j];
          const double r = rinv[i];
          const double k = r * r * r * inner / c;
          double* gxi = gx.row(i);
          for (int j = 0; j < c; ++j) gxi[j] += r * sv2(0, j) * gi[j] - k * xi[j];
        }
      }
    });
    return out;
  }

  // Causal depthwise conv along rows: y[t][c] = sum_tau w[c][tau] x[t-tau][c].
  NodeId conv_causal_depthwise(NodeId x, NodeId w) {
    const Matrix& xv = value(x);
    const Matrix& wv = value(w);
    if (wv.rows != xv.cols) throw std::invalid_argument("conv: kernel rows != channels");
    const int t = xv.rows, c = xv.cols, width = wv.cols;
    Matrix y(t, c);
    for (int i = 0; i < t; ++i) {
      double* yi = y.row(i);
      for (int tau = 0; tau < width && tau <= i; ++tau) {
        const double* xr = xv.row(i - tau);
        for (int ch = 0; ch < c; ++ch) yi[ch] += wv(ch, tau) * xr[ch];
      }
    }
    NodeId out = emit(std::move(y), {x, w});
    set_backward(out, [this, x, w, out] {
      const Matrix& g = grad_of(out);
      const Matrix& xv2 = value(x);
      const Matrix& wv2 = value(w);
      const int t = g.rows, c = g.cols, width = wv2.cols;
      if (wants(x)) {
        Matrix& gx = grad(x);
        for (int i = 0; i < t; ++i) {
          double* gxi = gx.row(i);
          for (int tau = 0; tau < width && i + tau < t; ++tau) {
            const double* gr = g.row(i + tau);
            for (int ch = 0; ch < c; ++ch) gxi[ch] += wv2(ch, tau) * gr[ch];
          }
        }
      }
      if (wants(w)) {
        Matrix& gw = grad(w);
        for (int i = 0; i < t; ++i) {
          const double* gr = g.row(i);
          for (int tau = 0; tau < width && tau <= i; ++tau) {
            const double* xr = xv2.row(i - tau);
            for (int ch = 0; ch < c; ++ch) gw(ch, tau) += gr[ch] * xr[ch];
          }
        }
      }
    });
    return out;
  }

  // Row gather from an embedding table; backward scatter-adds.
  NodeId embed(NodeId table, std::vector<int> ids) {
    const Matrix& tv = value(table);
    Matrix y(static_cast<int>(ids.size()), tv.cols);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || ids[i] >= tv.rows) throw std::invalid_argument("embed: id out of range");
      const double* r = tv.row(ids[i]);
      double* yi = y.row(static_cast<int>(i));
      for (int j = 0; j < tv.cols; ++j) yi[j] = r[j];
    }
    NodeId out = emit(std::move(y), {table});
    set_backward(out, [this, table, out, ids = std::move(ids)] {
      if (!wants(table)) return;
      const Matrix& g = grad_of(out);
      Matrix& gt = grad(table);
      for (std::size_t i = 0; i < ids.size(); ++i) {
        double* r = gt.row(ids[i]);
        const double* gi = g.row(static_cast<int>(i));
        for (int j = 0; j < g.cols; ++j) r[j] += gi[j];
      }
    });
    return out;
  }

  // DeltaProduct scan for one head, H_0 = 0. keys[j] is t x n (unit rows),
  // betas[j] t x 1, values[j] t x d, gate t x 1 or -1 for ungated. Output is
  // t x (n*d), row i = H_i flattened row-major. The gate rides on micro-step
  // j = 0 only; B is never gated.
  NodeId dp_scan(const std::vector<NodeId>& keys, const std::vector<NodeId>& betas,
                 const std::vector<NodeId>& values, NodeId gate) {
    const std::size_t n_h = keys.size();
    if (n_h == 0 || betas.size() != n_h || values.size() != n_h)
      throw std::invalid_argument("dp_scan: factor list mismatch");
    const int t = value(keys[0]).rows;
    const int n = value(keys[0]).cols;
    const int d = value(values[0]).cols;
    auto stored = std::make_shared<std::vector<Matrix>>();
    stored->reserve(static_cast<std::size_t>(t) * n_h);
    Matrix h = Matrix::zeros(n, d);
    Matrix s(t, n * d);
    for (int i = 0; i < t; ++i) {
      for (std::size_t j = 0; j < n_h; ++j) {
        stored->push_back(h);
        const double gamma = (j == 0 && gate >= 0) ? value(gate)(i, 0) : 1.0;
        micro_rows(h, value(keys[j]).row(i), value(betas[j])(i, 0), value(values[j]).row(i),
                   gamma);
      }
      double* si = s.row(i);
      for (std::size_t e = 0; e < h.size(); ++e) si[e] = h.a[e];
    }
    std::vector<NodeId> ins(keys);
    ins.insert(ins.end(), betas.begin(), betas.end());
    ins.insert(ins.end(), values.begin(), values.end());
    if (gate >= 0) ins.push_back(gate);
    NodeId out = emit(std::move(s), ins);
    set_backward(out, [this, keys, betas, values, gate, out, stored, t, n, d] {
      const std::size_t n_h = keys.size();
      const Matrix& gs = grad_of(out);
      Matrix gh = Matrix::zeros(n, d);  // dL/dH_i running
      Vec a(d), b(d);
      for (int i = t - 1; i >= 0; --i) {
        const double* grow = gs.row(i);
        for (std::size_t e = 0; e < gh.size(); ++e) gh.a[e] += grow[e];
        for (int j = static_cast<int>(n_h) - 1; j >= 0; --j) {
          const Matrix& hin = (*stored)[static_cast<std::size_t>(i) * n_h + j];
          const double* k = value(keys[j]).row(i);
          const double beta = value(betas[j])(i, 0);
          const double* v = value(values[j]).row(i);
          const double gamma = (j == 0 && gate >= 0) ? value(gate)(i, 0) : 1.0;
          std::fill(a.begin(), a.end(), 0.0);
          std::fill(b.begin(), b.end(), 0.0);
          for (int r = 0; r < n; ++r) {
            const double* hr = hin.row(r);
            const double* gr = gh.row(r);
            const double kr = k[r];
            for (int c = 0; c < d; ++c) {
              a[c] += kr * hr[c];
              b[c] += kr * gr[c];
            }
          }
          double ab = 0.0, vb = 0.0;
          for (int c = 0; c < d; ++c) {
            ab += a[c] * b[c];
            vb += v[c] * b[c];
          }
          if (wants(betas[j])) grad(betas[j])(i, 0) += -gamma * ab + vb;
          if (wants(values[j])) {
            double* gv = grad(values[j]).row(i);
            for (int c = 0; c < d; ++c) gv[c] += beta * b[c];
          }
          if (wants(keys[j])) {
            double* gk = grad(keys[j]).row(i);
            for (int r = 0; r < n; ++r) {
              const double* gr = gh.row(r);
              const double* hr = hin.row(r);
              double s1 = 0.0, s2 = 0.0, s3 = 0.0;
              for (int c = 0; c < d; ++c) {
                s1 += gr[c] * a[c];
                s2 += hr[c] * b[c];
                s3 += gr[c] * v[c];
              }
              gk[r] += -gamma * beta * (s1 + s2) + beta * s3;
            }
          }
          if (j == 0 && gate >= 0 && wants(gate)) {
            double dg = 0.0;
            for (int r = 0; r < n; ++r) {
              const double* gr = gh.row(r);
              const double* hr = hin.row(r);
              for (int c = 0; c < d; ++c) dg += gr[c] * hr[c];
            }
            grad(gate)(i, 0) += dg - beta * ab;
          }
          // dH_in = gamma (gh - beta k b^T)
          for (int r = 0; r < n; ++r) {
            double* gr = gh.row(r);
            const double bk = beta * k[r];
            for (int c = 0; c < d; ++c) gr[c] = gamma * (gr[c] - bk * b[c]);
          }
        }
      }
    });
    return out;
  }

  // R[i] = H_i^T q_i given flattened states (t x n*d) and queries (t x n).
  NodeId state_readout(NodeId states, NodeId q, int n, int d) {
    const Matrix& sv = value(states);
    const Matrix& qv = value(q);
    if (sv.cols != n * d || qv.cols != n || sv.rows != qv.rows)
      throw std::invalid_argument("state_readout: shape mismatch");
    const int t = sv.rows;
    Matrix r(t, d);
    for (int i = 0; i < t; ++i) {
      const double* si = sv.row(i);
      const double* qi = qv.row(i);
      double* ri = r.row(i);
      for (int row = 0; row < n; ++row) {
        const double qr = qi[row];
        const double* hrow = si + row * d;
        for (int c = 0; c < d; ++c) ri[c] += qr * hrow[c];
      }
    }
    NodeId out = emit(std::move(r), {states, q});
    set_backward(out, [this, states, q, out, n, d] {
      const Matrix& g = grad_of(out);
      const Matrix& sv2 = value(states);
      const Matrix& qv2 = value(q);
      const int t = g.rows;
      if (wants(states)) {
        Matrix& gs = grad(states);
        for (int i = 0; i < t; ++i) {
          const double* gi = g.row(i);
          const double* qi = qv2.row(i);
          double* gsi = gs.row(i);
          for (int row = 0; row < n; ++row) {
            const double qr = qi[row];
            double* grow = gsi + row * d;
            for (int c = 0; c < d; ++c) grow[c] += qr * gi[c];
          }
        }
      }
      if (wants(q)) {
        Matrix& gq = grad(q);
        for (int i = 0; i < t; ++i) {
          const double* gi = g.row(i);
          const double* si = sv2.row(i);
          double* gqi = gq.row(i);
          for (int row = 0; row < n; ++row) {
            const double* hrow = si + row * d;
            double s = 0.0;
            for (int c = 0; c < d; ++c) s += hrow[c] * gi[c];
            gqi[row] += s;
          }
        }
      }
    });
    return out;
  }

  // Mean cross entropy over unmasked positions. targets[i] ignored where
  // mask[i] is false; at least one position must be live.
  NodeId softmax_xent(NodeId logits, std::vector<int> targets, std::vector<bool> mask) {
    const Matrix& lv = value(logits);
    const int t = lv.rows, vsz = lv.cols;
    if (static_cast<int>(targets.size()) != t || static_cast<int>(mask.size()) != t)
      throw std::invalid_argument("softmax_xent: targets/mask length mismatch");
    int count = 0;
    for (bool m : mask) count += m ? 1 : 0;
    if (count == 0) throw std::invalid_argument("softmax_xent: empty mask");
    auto probs = std::make_shared<Matrix>(t, vsz);
    double loss = 0.0;
    for (int i = 0; i < t; ++i) {
      const double* li = lv.row(i);
      double mx = li[0];
      for (int j = 1; j < vsz; ++j) mx = std::max(mx, li[j]);
      double z = 0.0;
      double* pi = probs->row(i);
      for (int j = 0; j < vsz; ++j) {
        pi[j] = std::exp(li[j] - mx);
        z += pi[j];
      }
      for (int j = 0; j < vsz; ++j) pi[j] /= z;
      if (mask[i]) {
        if (targets[i] < 0 || targets[i] >= vsz)
          throw std::invalid_argument("softmax_xent: target out of range");
        loss -= std::log(std::max(pi[targets[i]], 1e-300));
      }
    }
    Matrix out(1, 1);
    out(0, 0) = loss / count;
    NodeId id = emit(std::move(out), {logits});
    set_backward(id, [this, logits, id, probs, targets = std::move(targets),
                      mask = std::move(mask), count] {
      if (!wants(logits)) return;
      const double gscale = grad_of(id)(0, 0) / count;
      Matrix& gl = grad(logits);
      for (int i = 0; i < gl.rows; ++i) {
        if (!mask[i]) continue;
        double* gi = gl.row(i);
        const double* pi = probs->row(i);
        for (int j = 0; j < gl.cols; ++j) gi[j] += gscale * pi[j];
        gi[targets[i]] -= gscale;
      }
    });
    return id;
  }

  // Seeds d(loss)/d(loss) = 1 and runs the reverse scan. Nodes that never
  // received gradient are skipped, so off-path subgraphs cost nothing.
  void backward(NodeId loss) {
    const Matrix& lv = value(loss);
    if (lv.rows != 1 || lv.cols != 1) throw std::invalid_argument("backward: loss must be 1x1");
    grad(loss)(0, 0) += 1.0;
    for (NodeId id = loss; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.backward_fn) continue;
      if (!n.needs_grad) continue;
      if (n.sink == nullptr && n.grad.size() == 0) continue;
      n.backward_fn();
    }
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix owned;
    const Matrix* external = nullptr;
    Matrix* sink = nullptr;
    Matrix grad;
    bool needs_grad = false;
    std::function<void()> backward_fn;
    const Matrix& v() const { return external ? *external : owned; }
  };

  NodeId emit(Matrix value, const std::vector<NodeId>& inputs) {
    Node n;
    n.owned = std::move(value);
    for (NodeId i : inputs) n.needs_grad = n.needs_grad || nodes_[i].needs_grad;
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size()) - 1;
  }

  void set_backward(NodeId id, std::function<void()> fn) {
    if (nodes_[id].needs_grad) nodes_[id].backward_fn = std::move(fn);
  }

  bool wants(NodeId id) const { return nodes_[id].needs_grad; }

  const Matrix& grad_of(NodeId id) {
    return grad(id);  // sized on demand; zero if untouched
  }

  static void acc(Matrix& into, const Matrix& g) {
    for (std::size_t i = 0; i < g.size(); ++i) into.a[i] += g.a[i];
  }

  // into += a b^T variants used by matmul backward.
  static void mm_nt_acc(const Matrix& a, const Matrix& b, Matrix& into) {
    for (int i = 0; i < a.rows; ++i) {
      const double* ai = a.row(i);
      double* ci = into.row(i);
      for (int j = 0; j < b.rows; ++j) {
        const double* bj = b.row(j);
        double s = 0.0;
        for (int k = 0; k < a.cols; ++k) s += ai[k] * bj[k];
        ci[j] += s;
      }
    }
  }

  static void mm_tn_acc(const Matrix& a, const Matrix& b, Matrix& into) {
    // into (a.cols x b.cols) += a^T b
    for (int s = 0; s < a.rows; ++s) {
      const double* as = a.row(s);
      const double* bs = b.row(s);
      for (int i = 0; i < a.cols; ++i) {
        const double v = as[i];
        if (v == 0.0) continue;
        double* ci = into.row(i);
        for (int j = 0; j < b.cols; ++j) ci[j] += v * bs[j];
      }
    }
  }

  static void micro_rows(Matrix& h, const double* k, double beta, const double* v,
                         double gamma) {
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

  std::vector<Node> nodes_;
};

// Central-difference gradient check. Analytic gradients must already be in
// grads (same order as params); loss_fn re-evaluates the loss at the current
// parameter values. Relative errors use |a - n| / max(floor, |a| + |n|), at
// tensor granularity via norms; the floor turns the comparison absolute for
// tensors the loss is numerically insensitive to (e.g. saturated gates, where
// the true gradient norm sits below the cancellation noise of the central
// difference itself). The per-scalar worst case is reported as a diagnostic
// (it is noise-dominated whenever a true gradient entry happens to sit near
// zero).
struct FdReport {
  double max_tensor_rel_err = 0.0;
  double worst_scalar_rel_err = 0.0;
  std::string worst_tensor;
};

inline FdReport finite_difference_check(const std::function<double()>& loss_fn,
                                        const std::vector<std::pair<std::string, Matrix*>>& params,
                                        const std::vector<Matrix>& grads, double eps = 1e-5,
                                        double floor = 1e-4) {
  if (params.size() != grads.size())
    throw std::invalid_argument("finite_difference_check: params/grads size mismatch");
  FdReport rep;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Matrix& m = *params[p].second;
    const Matrix& g = grads[p];
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double saved = m.a[i];
      const double h = eps * std::max(1.0, std::abs(saved));
      m.a[i] = saved + h;
      const double up = loss_fn();
      m.a[i] = saved - h;
      const double down = loss_fn();
      m.a[i] = saved;
      const double num = (up - down) / (2.0 * h);
      const double ana = g.a[i];
      diff2 += (ana - num) * (ana - num);
      a2 += ana * ana;
      n2 += num * num;
      const double sc = std::abs(ana - num) / std::max(1e-8, std::abs(ana) + std::abs(num));
      rep.worst_scalar_rel_err = std::max(rep.worst_scalar_rel_err, sc);
    }
    const double rel = std::sqrt(diff2) / std::max(floor, std::sqrt(a2) + std::sqrt(n2));
    if (rel > rep.max_tensor_rel_err) {
      rep.max_tensor_rel_err = rel;
      rep.worst_tensor = params[p].first;
    }
  }
  return rep;
}

}  // namespace dp
