#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <utility>

#include "btdm/tape.hpp"
#include "btdm/tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace btdm::ops {

#ifdef _OPENMP
#define BTDM_PAR_FOR(n) _Pragma("omp parallel for schedule(static) if ((n) > 16384)")
#else
#define BTDM_PAR_FOR(n)
#endif

template <class Real>
using Mat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class Real>
using MatMap = Eigen::Map<Mat<Real>>;
template <class Real>
using ConstMatMap = Eigen::Map<const Mat<Real>>;

template <class Real>
inline bool track(TapeT<Real>* tape, std::initializer_list<const TensorT<Real>*> ins) {
  if (!tape) return false;
  for (auto* t : ins)
    if (t->requires_grad()) return true;
  return false;
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <class Real>
TensorT<Real> add(TapeT<Real>* tape, const TensorT<Real>& a, const TensorT<Real>& b) {
  if (!a.same_shape(b))
    throw TensorError("add: shape mismatch " + shape_str(a.dims()) + " vs " + shape_str(b.dims()));
  TensorT<Real> out{a.dims()};
  const std::int64_t n = out.numel();
  BTDM_PAR_FOR(n)
  for (std::int64_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
  check_finite(out, "add");
  if (track(tape, {&a, &b})) {
    out.set_requires_grad(true);
    TensorT<Real> ac = a, bc = b, oc = out;
    tape->record("add", [ac, bc, oc]() mutable {
      const auto& go = oc.grad();
      if (ac.requires_grad()) {
        auto& ga = ac.grad();
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += go[i];
        check_grad_finite(ga, "add");
      }
      if (bc.requires_grad()) {
        auto& gb = bc.grad();
        for (size_t i = 0; i < gb.size(); ++i) gb[i] += go[i];
        check_grad_finite(gb, "add");
      }
    });
  }
  return out;
}

template <class Real>
TensorT<Real> sub(TapeT<Real>* tape, const TensorT<Real>& a, const TensorT<Real>& b) {
  if (!a.same_shape(b))
    throw TensorError("sub: shape mismatch " + shape_str(a.dims()) + " vs " + shape_str(b.dims()));
  TensorT<Real> out{a.dims()};
  const std::int64_t n = out.numel();
  BTDM_PAR_FOR(n)
  for (std::int64_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
  check_finite(out, "sub");
  if (track(tape, {&a, &b})) {
    out.set_requires_grad(true);
    TensorT<Real> ac = a, bc = b, oc = out;
    tape->record("sub", [ac, bc, oc]() mutable {
      const auto& go = oc.grad();
      if (ac.requires_grad()) {
        auto& ga = ac.grad();
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += go[i];
        check_grad_finite(ga, "sub");
      }
      if (bc.requires_grad()) {
        auto& gb = bc.grad();
        for (size_t i = 0; i < gb.size(); ++i) gb[i] -= go[i];
        check_grad_finite(gb, "sub");
      }
    });
  }
  return out;
}

template <class Real>
TensorT<Real> mul(TapeT<Real>* tape, const TensorT<Real>& a, const TensorT<Real>& b) {
  if (!a.same_shape(b))
    throw TensorError("mul: shape mismatch " + shape_str(a.dims()) + " vs " + shape_str(b.dims()));
  TensorT<Real> out{a.dims()};
  const std::int64_t n = out.numel();
  BTDM_PAR_FOR(n)
  for (std::int64_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
  check_finite(out, "mul");
  if (track(tape, {&a, &b})) {
    out.set_requires_grad(true);
    TensorT<Real> ac = a, bc = b, oc = out;
    tape->record("mul", [ac, bc, oc]() mutable {
      const auto& go = oc.grad();
      if (ac.requires_grad()) {
        auto& ga = ac.grad();
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * bc[i];
        check_grad_finite(ga, "mul");
      }
      if (bc.requires_grad()) {
        auto& gb = bc.grad();
        for (size_t i = 0; i < gb.size(); ++i) gb[i] += go[i] * ac[i];
        check_grad_finite(gb, "mul");
      }
    });
  }
  return out;
}

template <class Real>
TensorT<Real> scale(TapeT<Real>* tape, const TensorT<Real>& a, Real c) {
  TensorT<Real> out{a.dims()};
  const std::int64_t n = out.numel();
  BTDM_PAR_FOR(n)
  for (std::int64_t i = 0; i < n; ++i) out[i] = a[i] * c;
  check_finite(out, "scale");
  if (track(tape, {&a})) {
    out.set_requires_grad(true);
    TensorT<Real> ac = a, oc = out;
    tape->record("scale", [ac, oc, c]() mutable {
      const auto& go = oc.grad();
      auto& ga = ac.grad();
      for (size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * c;
      check_grad_finite(ga, "scale");
    });
  }
  return out;
}

template <class Real>
TensorT<Real> silu(TapeT<Real>* tape, const TensorT<Real>& a) {
  TensorT<Real> out{a.dims()};
  const std::int64_t n = out.numel();
  BTDM_PAR_FOR(n)
  for (std::int64_t i = 0; i < n; ++i) {
    Real s = Real(1) / (Real(1) + std::exp(-a[i]));
    out[i] = a[i] * s;
  }
  check_finite(out, "silu");
  if (track(tape, {&a})) {
    out.set_requires_grad(true);
    TensorT<Real> ac = a, oc = out;
    tape->record("silu", [ac, oc]() mutable {
      const auto& go = oc.grad();
      auto& ga = ac.grad();
      const std::int64_t n = (std::int64_t)ga.size();
      BTDM_PAR_FOR(n)
      for (std::int64_t i = 0; i < n; ++i) {
        Real s = Real(1) / (Real(1) + std::exp(-ac[i]));
        ga[i] += go[i] * (s * (Real(1) + ac[i] * (Real(1) - s)));
      }
      check_grad_finite(ga, "silu");
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// linear: x [..., Din] x W [Dout, Din] + b [Dout]
// ---------------------------------------------------------------------------

template <class Real>
TensorT<Real> linear(TapeT<Real>* tape, const TensorT<Real>& x, const TensorT<Real>& w,
                     const TensorT<Real>& b) {
  if (x.ndim() < 1 || w.ndim() != 2)
    throw TensorError("linear: bad ranks");
  int din = x.dim(x.ndim() - 1);
  int dout = w.dim(0);
  if (w.dim(1) != din) throw TensorError("linear: weight/input dim mismatch");
  if (b.defined() && (b.ndim() != 1 || b.dim(0) != dout))
    throw TensorError("linear: bias dim mismatch");
  std::int64_t rows = x.numel() / din;

  Shape out_dims = x.dims();
  out_dims.back() = dout;
  TensorT<Real> out{out_dims};
  {
    ConstMatMap<Real> X(x.data(), rows, din);
    ConstMatMap<Real> W(w.data(), dout, din);
    MatMap<Real> O(out.data(), rows, dout);
    O.noalias() = X * W.transpose();
    if (b.defined())
      for (std::int64_t r = 0; r < rows; ++r)
        for (int j = 0; j < dout; ++j) O(r, j) += b[j];
  }
  check_finite(out, "linear");
  if (track(tape, {&x, &w, &b})) {
    out.set_requires_grad(true);
    TensorT<Real> xc = x, wc = w, bc = b, oc = out;
    tape->record("linear", [xc, wc, bc, oc, rows, din, dout]() mutable {
      ConstMatMap<Real> GO(oc.grad().data(), rows, dout);
      if (xc.requires_grad()) {
        MatMap<Real> GX(xc.grad().data(), rows, din);
        ConstMatMap<Real> W(wc.data(), dout, din);
        GX.noalias() += GO * W;
        check_grad_finite(xc.grad(), "linear");
      }
      if (wc.requires_grad()) {
        MatMap<Real> GW(wc.grad().data(), dout, din);
        ConstMatMap<Real> X(xc.data(), rows, din);
        GW.noalias() += GO.transpose() * X;
        check_grad_finite(wc.grad(), "linear");
      }
      if (bc.defined() && bc.requires_grad()) {
        auto& gb = bc.grad();
        for (std::int64_t r = 0; r < rows; ++r)
          for (int j = 0; j < dout; ++j) gb[j] += GO(r, j);
        check_grad_finite(gb, "linear");
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// conv2d: x [N,C,H,W], w [Co,C,k,k] (k in {1,3}), b [Co], stride 1|2,
// zero padding `pad` (1 for k=3, 0 for k=1). H' = ceil(H/stride).
// im2col + GEMM; each sample handled independently.
// ---------------------------------------------------------------------------

namespace detail {

template <class Real>
void im2col(const Real* x, int C, int H, int W, int k, int pad, int stride, int Ho, int Wo,
            Real* cols) {
  // cols layout: [C*k*k, Ho*Wo]
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        Real* row = cols + ((c * k + ki) * k + kj) * (std::int64_t)(Ho * Wo);
        for (int oi = 0; oi < Ho; ++oi) {
          int ii = oi * stride + ki - pad;
          if (ii < 0 || ii >= H) {
            std::fill(row + oi * Wo, row + (oi + 1) * Wo, Real(0));
            continue;
          }
          const Real* xrow = x + (c * H + ii) * (std::int64_t)W;
          for (int oj = 0; oj < Wo; ++oj) {
            int jj = oj * stride + kj - pad;
            row[oi * Wo + oj] = (jj < 0 || jj >= W) ? Real(0) : xrow[jj];
          }
        }
      }
    }
  }
}

template <class Real>
void col2im_add(const Real* cols, int C, int H, int W, int k, int pad, int stride, int Ho, int Wo,
                Real* dx) {
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const Real* row = cols + ((c * k + ki) * k + kj) * (std::int64_t)(Ho * Wo);
        for (int oi = 0; oi < Ho; ++oi) {
          int ii = oi * stride + ki - pad;
          if (ii < 0 || ii >= H) continue;
          Real* xrow = dx + (c * H + ii) * (std::int64_t)W;
          for (int oj = 0; oj < Wo; ++oj) {
            int jj = oj * stride + kj - pad;
            if (jj >= 0 && jj < W) xrow[jj] += row[oi * Wo + oj];
          }
        }
      }
    }
  }
}

}  // namespace detail

template <class Real>
TensorT<Real> conv2d(TapeT<Real>* tape, const TensorT<Real>& x, const TensorT<Real>& w,
                     const TensorT<Real>& b, int stride, int pad) {
  if (x.ndim() != 4 || w.ndim() != 4) throw TensorError("conv2d: expects x[N,C,H,W], w[Co,C,k,k]");
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int Co = w.dim(0), k = w.dim(2);
  if (w.dim(1) != C || w.dim(3) != k) throw TensorError("conv2d: kernel shape mismatch");
  if (k != 1 && k != 3) throw TensorError("conv2d: kernel size must be 1 or 3");
  if (stride != 1 && stride != 2) throw TensorError("conv2d: stride must be 1 or 2");
  if (b.defined() && (b.ndim() != 1 || b.dim(0) != Co)) throw TensorError("conv2d: bias mismatch");
  if (H + 2 * pad < k || W + 2 * pad < k)
    throw TensorError("conv2d: padded input smaller than kernel");
  int Ho = (H + 2 * pad - k) / stride + 1;
  int Wo = (W + 2 * pad - k) / stride + 1;
  int ckk = C * k * k;
  std::int64_t spatial = (std::int64_t)Ho * Wo;
  // pointwise convs need no im2col: the input already is the column matrix
  bool direct = k == 1 && stride == 1 && pad == 0;

  TensorT<Real> out{{N, Co, Ho, Wo}};
  TensorT<Real> cols;
  if (!direct) cols = TensorT<Real>{{N, ckk, Ho * Wo}};  // kept for backward
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int n = 0; n < N; ++n) {
    const Real* col_n;
    if (direct) {
      col_n = x.data() + (std::int64_t)n * C * H * W;
    } else {
      Real* scratch = cols.data() + (std::int64_t)n * ckk * spatial;
      detail::im2col(x.data() + (std::int64_t)n * C * H * W, C, H, W, k, pad, stride, Ho, Wo,
                     scratch);
      col_n = scratch;
    }
    ConstMatMap<Real> Wm(w.data(), Co, ckk);
    ConstMatMap<Real> Cm(col_n, ckk, spatial);
    MatMap<Real> Om(out.data() + (std::int64_t)n * Co * spatial, Co, spatial);
    Om.noalias() = Wm * Cm;
    if (b.defined())
      for (int co = 0; co < Co; ++co) Om.row(co).array() += b[co];
  }
  check_finite(out, "conv2d");

  if (track(tape, {&x, &w, &b})) {
    out.set_requires_grad(true);
    TensorT<Real> xc = x, wc = w, bc = b, oc = out, colsc = cols;
    tape->record("conv2d", [xc, wc, bc, oc, colsc, N, C, H, W, Co, k, pad, stride, Ho, Wo, ckk,
                            spatial, direct]() mutable {
      const Real* go = oc.grad().data();
      if (xc.requires_grad()) {
        auto& gx = xc.grad();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (int n = 0; n < N; ++n) {
          ConstMatMap<Real> Wm(wc.data(), Co, ckk);
          ConstMatMap<Real> GOm(go + (std::int64_t)n * Co * spatial, Co, spatial);
          if (direct) {
            MatMap<Real> GX(gx.data() + (std::int64_t)n * C * H * W, ckk, spatial);
            GX.noalias() += Wm.transpose() * GOm;
          } else {
            std::vector<Real> dcols((std::int64_t)ckk * spatial);
            MatMap<Real> DC(dcols.data(), ckk, spatial);
            DC.noalias() = Wm.transpose() * GOm;
            detail::col2im_add(dcols.data(), C, H, W, k, pad, stride, Ho, Wo,
                               gx.data() + (std::int64_t)n * C * H * W);
          }
        }
        check_grad_finite(gx, "conv2d");
      }
      if (wc.requires_grad()) {
        // per-sample partials reduced in fixed order for determinism
        std::vector<Real> partial((std::int64_t)N * Co * ckk);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (int n = 0; n < N; ++n) {
          ConstMatMap<Real> GOm(go + (std::int64_t)n * Co * spatial, Co, spatial);
          const Real* col_n = direct ? xc.data() + (std::int64_t)n * C * H * W
                                     : colsc.data() + (std::int64_t)n * ckk * spatial;
          ConstMatMap<Real> Cm(col_n, ckk, spatial);
          MatMap<Real> P(partial.data() + (std::int64_t)n * Co * ckk, Co, ckk);
          P.noalias() = GOm * Cm.transpose();
        }
        auto& gw = wc.grad();
        for (int n = 0; n < N; ++n) {
          const Real* p = partial.data() + (std::int64_t)n * Co * ckk;
          for (std::int64_t i = 0; i < (std::int64_t)Co * ckk; ++i) gw[i] += p[i];
        }
        check_grad_finite(gw, "conv2d");
      }
      if (bc.defined() && bc.requires_grad()) {
        auto& gb = bc.grad();
        for (int n = 0; n < N; ++n)
          for (int co = 0; co < Co; ++co) {
            const Real* g = go + ((std::int64_t)n * Co + co) * spatial;
            Real s = 0;
            for (std::int64_t i = 0; i < spatial; ++i) s += g[i];
            gb[co] += s;
          }
        check_grad_finite(gb, "conv2d");
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// group_norm over [N,C,H,W]; layer_norm over last dim of [N,L,D]
// ---------------------------------------------------------------------------

template <class Real>
TensorT<Real> group_norm(TapeT<Real>* tape, const TensorT<Real>& x, const TensorT<Real>& gamma,
                         const TensorT<Real>& beta, int groups, Real eps = Real(1e-5)) {
  if (x.ndim() != 4) throw TensorError("group_norm: expects [N,C,H,W]");
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (C % groups != 0) throw ConfigError("group_norm: channels not divisible by groups");
  if (gamma.numel() != C || beta.numel() != C) throw TensorError("group_norm: affine dim mismatch");
  int cg = C / groups;
  std::int64_t m = (std::int64_t)cg * H * W;

  TensorT<Real> out{x.dims()};
  TensorT<Real> mean{{N, groups}}, rstd{{N, groups}};
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int ng = 0; ng < N * groups; ++ng) {
    int n = ng / groups, g = ng % groups;
    const Real* xp = x.data() + ((std::int64_t)n * C + (std::int64_t)g * cg) * H * W;
    double mu = 0;
    for (std::int64_t i = 0; i < m; ++i) mu += xp[i];
    mu /= (double)m;
    double var = 0;
    for (std::int64_t i = 0; i < m; ++i) {
      double d = xp[i] - mu;
      var += d * d;
    }
    var /= (double)m;
    double rs = 1.0 / std::sqrt(var + (double)eps);
    mean[n * groups + g] = (Real)mu;
    rstd[n * groups + g] = (Real)rs;
    Real* op = out.data() + ((std::int64_t)n * C + (std::int64_t)g * cg) * H * W;
    for (int c = 0; c < cg; ++c) {
      Real ga = gamma[g * cg + c], be = beta[g * cg + c];
      for (std::int64_t i = 0; i < (std::int64_t)H * W; ++i) {
        std::int64_t idx = (std::int64_t)c * H * W + i;
        op[idx] = (Real)((xp[idx] - mu) * rs) * ga + be;
      }
    }
  }
  check_finite(out, "group_norm");

  if (track(tape, {&x, &gamma, &beta})) {
    out.set_requires_grad(true);
    TensorT<Real> xc = x, gc = gamma, bc = beta, oc = out, mc = mean, rc = rstd;
    tape->record("group_norm", [xc, gc, bc, oc, mc, rc, N, C, H, W, groups, cg, m]() mutable {
      const Real* go = oc.grad().data();
      // per-(n,g) partial affine gradients; reduced sequentially afterwards so
      // the result does not depend on the thread count
      std::vector<double> dgamma_p((std::int64_t)N * C, 0.0), dbeta_p((std::int64_t)N * C, 0.0);
      Real* gx = xc.requires_grad() ? xc.grad().data() : nullptr;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
      for (int ng = 0; ng < N * groups; ++ng) {
        int n = ng / groups, g = ng % groups;
        std::int64_t base = ((std::int64_t)n * C + (std::int64_t)g * cg) * H * W;
        const Real* xp = xc.data() + base;
        const Real* gop = go + base;
        double mu = mc[n * groups + g], rs = rc[n * groups + g];
        double sum_dxhat = 0, sum_dxhat_xhat = 0;
        for (int c = 0; c < cg; ++c) {
          double ga = gc[g * cg + c];
          double dg = 0, db = 0;
          for (std::int64_t i = 0; i < (std::int64_t)H * W; ++i) {
            std::int64_t idx = (std::int64_t)c * H * W + i;
            double xhat = (xp[idx] - mu) * rs;
            double dy = gop[idx];
            dg += dy * xhat;
            db += dy;
            double dxhat = dy * ga;
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
          }
          dgamma_p[(std::int64_t)n * C + g * cg + c] = dg;
          dbeta_p[(std::int64_t)n * C + g * cg + c] = db;
        }
        if (gx) {
          for (int c = 0; c < cg; ++c) {
            double ga = gc[g * cg + c];
            for (std::int64_t i = 0; i < (std::int64_t)H * W; ++i) {
              std::int64_t idx = (std::int64_t)c * H * W + i;
              double xhat = (xp[idx] - mu) * rs;
              double dxhat = (double)gop[idx] * ga;
              gx[base + idx] +=
                  (Real)(rs * (dxhat - sum_dxhat / (double)m - xhat * sum_dxhat_xhat / (double)m));
            }
          }
        }
      }
      if (gc.requires_grad()) {
        auto& gg = gc.grad();
        for (int n = 0; n < N; ++n)
          for (int c = 0; c < C; ++c) gg[c] += (Real)dgamma_p[(std::int64_t)n * C + c];
        check_grad_finite(gg, "group_norm");
      }
      if (bc.requires_grad()) {
        auto& gb = bc.grad();
        for (int n = 0; n < N; ++n)
          for (int c = 0; c < C; ++c) gb[c] += (Real)dbeta_p[(std::int64_t)n * C + c];
        check_grad_finite(gb, "group_norm");
      }
      if (gx) check_grad_finite(xc.grad(), "group_norm");
    });
  }
  return out;
}

template <class Real>
TensorT<Real> layer_norm(TapeT<Real>* tape, const TensorT<Real>& x, const TensorT<Real>& gamma,
                         const TensorT<Real>& beta, Real eps = Real(1e-5)) {
  if (x.ndim() < 2) throw TensorError("layer_norm: rank must be >= 2");
  int D = x.dim(x.ndim() - 1);
  if (gamma.numel() != D || beta.numel() != D) throw TensorError("layer_norm: affine dim mismatch");
  std::int64_t rows = x.numel() / D;

  TensorT<Real> out{x.dims()};
  TensorT<Real> mean{{(int)rows}}, rstd{{(int)rows}};
  for (std::int64_t r = 0; r < rows; ++r) {
    const Real* xp = x.data() + r * D;
    double mu = 0;
    for (int i = 0; i < D; ++i) mu += xp[i];
    mu /= D;
    double var = 0;
    for (int i = 0; i < D; ++i) {
      double d = xp[i] - mu;
      var += d * d;
    }
    var /= D;
    double rs = 1.0 / std::sqrt(var + (double)eps);
    mean[r] = (Real)mu;
    rstd[r] = (Real)rs;
    Real* op = out.data() + r * D;
    for (int i = 0; i < D; ++i) op[i] = (Real)((xp[i] - mu) * rs) * gamma[i] + beta[i];
  }
  check_finite(out, "layer_norm");

  if (track(tape, {&x, &gamma, &beta})) {
    out.set_requires_grad(true);
    TensorT<Real> xc = x, gc = gamma, bc = beta, oc = out, mc = mean, rc = rstd;
    tape->record("layer_norm", [xc, gc, bc, oc, mc, rc, rows, D]() mutable {
      const Real* go = oc.grad().data();
      for (std::int64_t r = 0; r < rows; ++r) {
        const Real* xp = xc.data() + r * D;
        const Real* gop = go + r * D;
        double mu = mc[r], rs = rc[r];
        double sum_dxhat = 0, sum_dxhat_xhat = 0;
        for (int i = 0; i < D; ++i) {
          double xhat = (xp[i] - mu) * rs;
          double dxhat = (double)gop[i] * gc[i];
          sum_dxhat += dxhat;
          sum_dxhat_xhat += dxhat * xhat;
        }
        if (xc.requires_grad()) {
          auto& gx = xc.grad();
          for (int i = 0; i < D; ++i) {
            double xhat = (xp[i] - mu) * rs;
            double dxhat = (double)gop[i] * gc[i];
            gx[r * D + i] += (Real)(rs * (dxhat - sum_dxhat / D - xhat * sum_dxhat_xhat / D));
          }
        }
        if (gc.requires_grad()) {
          auto& gg = gc.grad();
          for (int i = 0; i < D; ++i) gg[i] += gop[i] * (Real)((xp[i] - mu) * rs);
        }
        if (bc.requires_grad()) {
          auto& gb = bc.grad();
          for (int i = 0; i < D; ++i) gb[i] += gop[i];
        }
      }
      if (xc.requires_grad()) check_grad_finite(xc.grad(), "layer_norm");
      if (gc.requires_grad()) check_grad_finite(gc.grad(), "layer_norm");
      if (bc.requires_grad()) check_grad_finite(bc.grad(), "layer_norm");
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// FiLM: out[n,c,:,:] = (1 + scale[n,c]) * h[n,c,:,:] + shift[n,c]
// ---------------------------------------------------------------------------

template <class Real>
TensorT<Real> film_modulate(TapeT<Real>* tape, const TensorT<Real>& h, const TensorT<Real>& scale_t,
                            const TensorT<Real>& shift_t) {
  if (h.ndim() != 4) throw TensorError("film_modulate: expects h[N,C,H,W]");
  int N = h.dim(0), C = h.dim(1), H = h.dim(2), W = h.dim(3);
  if (scale_t.ndim() != 2 || scale_t.dim(0) != N || scale_t.dim(1) != C ||
      !scale_t.same_shape(shift_t))
    throw TensorError("film_modulate: conditioning shape mismatch, expected [N,C]");
  std::int64_t hw = (std::int64_t)H * W;
  TensorT<Real> out{h.dims()};
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int nc = 0; nc < N * C; ++nc) {
    int n = nc / C, c = nc % C;
    Real s = Real(1) + scale_t[n * C + c], t = shift_t[n * C + c];
    const Real* hp = h.data() + ((std::int64_t)n * C + c) * hw;
    Real* op = out.data() + ((std::int64_t)n * C + c) * hw;
    for (std::int64_t i = 0; i < hw; ++i) op[i] = s * hp[i] + t;
  }
  check_finite(out, "film_modulate");
  if (track(tape, {&h, &scale_t, &shift_t})) {
    out.set_requires_grad(true);
    TensorT<Real> hc = h, sc = scale_t, tc = shift_t, oc = out;
    tape->record("film_modulate", [hc, sc, tc, oc, N, C, hw]() mutable {
      const Real* go = oc.grad().data();
      Real* gh = hc.requires_grad() ? hc.grad().data() : nullptr;
      Real* gs = sc.requires_grad() ? sc.grad().data() : nullptr;
      Real* gt = tc.requires_grad() ? tc.grad().data() : nullptr;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
      for (int nc = 0; nc < N * C; ++nc) {
        int n = nc / C, c = nc % C;
        std::int64_t base = ((std::int64_t)n * C + c) * hw;
        if (gh) {
          Real s = Real(1) + sc[n * C + c];
          for (std::int64_t i = 0; i < hw; ++i) gh[base + i] += go[base + i] * s;
        }
        if (gs) {
          Real acc = 0;
          for (std::int64_t i = 0; i < hw; ++i) acc += go[base + i] * hc[base + i];
          gs[n * C + c] += acc;
        }
        if (gt) {
          Real acc = 0;
          for (std::int64_t i = 0; i < hw; ++i) acc += go[base + i];
          gt[n * C + c] += acc;
        }
      }
      if (gh) check_grad_finite(hc.grad(), "film_modulate");
      if (gs) check_grad_finite(sc.grad(), "film_modulate");
      if (gt) check_grad_finite(tc.grad(), "film_modulate");
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// shape movement
// ---------------------------------------------------------------------------

// [N,C,H,W] -> [N,H*W,C]
template <class Real>
TensorT<Real> to_tokens(TapeT<Real>* tape, const TensorT<Real>& x) {
  if (x.ndim() != 4) throw TensorError("to_tokens: expects [N,C,H,W]");
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  std::int64_t hw = (std::int64_t)H * W;
  TensorT<Real> out{{N, H * W, C}};
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const Real* xp = x.data() + ((std::int64_t)n * C + c) * hw;
      for (std::int64_t i = 0; i < hw; ++i) out[((std::int64_t)n * hw + i) * C + c] = xp[i];
    }
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    TensorT<Real> xc = x, oc = out;
    tape->record("to_tokens", [xc, oc, N, C, hw]() mutable {
      const Real* go = oc.grad().data();
      auto& gx = xc.grad();
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          Real* gp = gx.data() + ((std::int64_t)n * C + c) * hw;
          for (std::int64_t i = 0; i < hw; ++i) gp[i] += go[((std::int64_t)n * hw + i) * C + c];
        }
    });
  }
  return out;
}

// [N,H*W,C] -> [N,C,H,W]
template <class Real>
TensorT<Real> from_tokens(TapeT<Real>* tape, const TensorT<Real>& x, int H, int W) {
  if (x.ndim() != 3 || x.dim(1) != H * W) throw TensorError("from_tokens: shape mismatch");
  int N = x.dim(0), C = x.dim(2);
  std::int64_t hw = (std::int64_t)H * W;
  TensorT<Real> out{{N, C, H, W}};
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int n = 0; n < N; ++n)
    for (std::int64_t i = 0; i < hw; ++i)
      for (int c = 0; c < C; ++c)
        out[((std::int64_t)n * C + c) * hw + i] = x[((std::int64_t)n * hw + i) * C + c];
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    TensorT<Real> xc = x, oc = out;
    tape->record("from_tokens", [xc, oc, N, C, hw]() mutable {
      const Real* go = oc.grad().data();
      auto& gx = xc.grad();
      for (int n = 0; n < N; ++n)
        for (std::int64_t i = 0; i < hw; ++i)
          for (int c = 0; c < C; ++c)
            gx[((std::int64_t)n * hw + i) * C + c] += go[((std::int64_t)n * C + c) * hw + i];
    });
  }
  return out;
}

// [N,L,D] -> [N*H, L, D/H]
template <class Real>
TensorT<Real> split_heads(TapeT<Real>* tape, const TensorT<Real>& x, int heads) {
  if (x.ndim() != 3) throw TensorError("split_heads: expects [N,L,D]");
  int N = x.dim(0), L = x.dim(1), D = x.dim(2);
  if (D % heads != 0) throw ConfigError("split_heads: D not divisible by heads");
  int dh = D / heads;
  TensorT<Real> out{{N * heads, L, dh}};
  for (int n = 0; n < N; ++n)
    for (int h = 0; h < heads; ++h)
      for (int l = 0; l < L; ++l) {
        const Real* src = x.data() + ((std::int64_t)n * L + l) * D + (std::int64_t)h * dh;
        Real* dst = out.data() + (((std::int64_t)(n * heads + h) * L) + l) * dh;
        std::copy(src, src + dh, dst);
      }
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    TensorT<Real> xc = x, oc = out;
    tape->record("split_heads", [xc, oc, N, L, D, heads, dh]() mutable {
      const Real* go = oc.grad().data();
      auto& gx = xc.grad();
      for (int n = 0; n < N; ++n)
        for (int h = 0; h < heads; ++h)
          for (int l = 0; l < L; ++l) {
            Real* dst = gx.data() + ((std::int64_t)n * L + l) * D + (std::int64_t)h * dh;
            const Real* src = go + (((std::int64_t)(n * heads + h) * L) + l) * dh;
            for (int i = 0; i < dh; ++i) dst[i] += src[i];
          }
    });
  }
  return out;
}

// [N*H, L, D/H] -> [N,L,D]
template <class Real>
TensorT<Real> merge_heads(TapeT<Real>* tape, const TensorT<Real>& x, int heads) {
  if (x.ndim() != 3 || x.dim(0) % heads != 0) throw TensorError("merge_heads: shape mismatch");
  int N = x.dim(0) / heads, L = x.dim(1), dh = x.dim(2);
  int D = dh * heads;
  TensorT<Real> out{{N, L, D}};
  for (int n = 0; n < N; ++n)
    for (int h = 0; h < heads; ++h)
      for (int l = 0; l < L; ++l) {
        const Real* src = x.data() + (((std::int64_t)(n * heads + h) * L) + l) * dh;
        Real* dst = out.data() + ((std::int64_t)n * L + l) * D + (std::int64_t)h * dh;
        std::copy(src, src + dh, dst);
      }
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    TensorT<Real> xc = x, oc = out;
    tape->record("merge_heads", [xc, oc, N, L, D, heads, dh]() mutable {
      const Real* go = oc.grad().data();
      auto& gx = xc.grad();
      for (int n = 0; n < N; ++n)
        for (int h = 0; h < heads; ++h)
          for (int l = 0; l < L; ++l) {
            Real* dst = gx.data() + (((std::int64_t)(n * heads + h) * L) + l) * dh;
            const Real* src = go + ((std::int64_t)n * L + l) * D + (std::int64_t)h * dh;
            for (int i = 0; i < dh; ++i) dst[i] += src[i];
          }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// batched matmuls
// ---------------------------------------------------------------------------

// A [B,M,K] x B [B,N,K]^T -> [B,M,N]
template <class Real>
TensorT<Real> bmm_nt(TapeT<Real>* tape, const TensorT<Real>& a, const TensorT<Real>& b) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2))
    throw TensorError("bmm_nt: shape mismatch");
  int B = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(1);
  TensorT<Real> out{{B, M, N}};
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int i = 0; i < B; ++i) {
    ConstMatMap<Real> A(a.data() + (std::int64_t)i * M * K, M, K);
    ConstMatMap<Real> Bm(b.data() + (std::int64_t)i * N * K, N, K);
    MatMap<Real> O(out.data() + (std::int64_t)i * M * N, M, N);
    O.noalias() = A * Bm.transpose();
  }
  check_finite(out, "bmm_nt");
  if (track(tape, {&a, &b})) {
    out.set_requires_grad(true);
    TensorT<Real> ac = a, bc = b, oc = out;
    tape->record("bmm_nt", [ac, bc, oc, B, M, K, N]() mutable {
      const Real* go = oc.grad().data();
      // allocate gradient buffers before the parallel region
      Real* ga = ac.requires_grad() ? ac.grad().data() : nullptr;
      Real* gb = bc.requires_grad() ? bc.grad().data() : nullptr;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
      for (int i = 0; i < B; ++i) {
        ConstMatMap<Real> GO(go + (std::int64_t)i * M * N, M, N);
        if (ga) {
          ConstMatMap<Real> Bm(bc.data() + (std::int64_t)i * N * K, N, K);
          MatMap<Real> GA(ga + (std::int64_t)i * M * K, M, K);
          GA.noalias() += GO * Bm;
        }
        if (gb) {
          ConstMatMap<Real> A(ac.data() + (std::int64_t)i * M * K, M, K);
          MatMap<Real> GB(gb + (std::int64_t)i * N * K, N, K);
          GB.noalias() += GO.transpose() * A;
        }
      }
      if (ga) check_grad_finite(ac.grad(), "bmm_nt");
      if (gb) check_grad_finite(bc.grad(), "bmm_nt");
    });
  }
  return out;
}

// A [B,M,K] x B [B,K,N] -> [B,M,N]
template <class Real>
TensorT<Real> bmm_nn(TapeT<Real>* tape, const TensorT<Real>& a, const TensorT<Real>& b) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    throw TensorError("bmm_nn: shape mismatch");
  int B = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(2);
  TensorT<Real> out{{B, M, N}};
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int i = 0; i < B; ++i) {
    ConstMatMap<Real> A(a.data() + (std::int64_t)i * M * K, M, K);
    ConstMatMap<Real> Bm(b.data() + (std::int64_t)i * K * N, K, N);
    MatMap<Real> O(out.data() + (std::int64_t)i * M * N, M, N);
    O.noalias() = A * Bm;
  }
  check_finite(out, "bmm_nn");
  if (track(tape, {&a, &b})) {
    out.set_requires_grad(true);
    TensorT<Real> ac = a, bc = b, oc = out;
    tape->record("bmm_nn", [ac, bc, oc, B, M, K, N]() mutable {
      const Real* go = oc.grad().data();
      // allocate gradient buffers before the parallel region
      Real* ga = ac.requires_grad() ? ac.grad().data() : nullptr;
      Real* gb = bc.requires_grad() ? bc.grad().data() : nullptr;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
      for (int i = 0; i < B; ++i) {
        ConstMatMap<Real> GO(go + (std::int64_t)i * M * N, M, N);
        if (ga) {
          ConstMatMap<Real> Bm(bc.data() + (std::int64_t)i * K * N, K, N);
          MatMap<Real> GA(ga + (std::int64_t)i * M * K, M, K);
          GA.noalias() += GO * Bm.transpose();
        }
        if (gb) {
          ConstMatMap<Real> A(ac.data() + (std::int64_t)i * M * K, M, K);
          MatMap<Real> GB(gb + (std::int64_t)i * K * N, K, N);
          GB.noalias() += A.transpose() * GO;
        }
      }
      if (ga) check_grad_finite(ac.grad(), "bmm_nn");
      if (gb) check_grad_finite(bc.grad(), "bmm_nn");
    });
  }
  return out;
}

// softmax over the last dimension
template <class Real>
TensorT<Real> softmax_last(TapeT<Real>* tape, const TensorT<Real>& x) {
  if (x.ndim() < 1) throw TensorError("softmax_last: scalar input");
  int D = x.dim(x.ndim() - 1);
  std::int64_t rows = x.numel() / D;
  TensorT<Real> out{x.dims()};
  for (std::int64_t r = 0; r < rows; ++r) {
    const Real* xp = x.data() + r * D;
    Real* op = out.data() + r * D;
    Real mx = xp[0];
    for (int i = 1; i < D; ++i) mx = std::max(mx, xp[i]);
    double z = 0;
    for (int i = 0; i < D; ++i) {
      double e = std::exp((double)(xp[i] - mx));
      op[i] = (Real)e;
      z += e;
    }
    for (int i = 0; i < D; ++i) op[i] = (Real)((double)op[i] / z);
  }
  check_finite(out, "softmax");
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    TensorT<Real> xc = x, oc = out;
    tape->record("softmax", [xc, oc, rows, D]() mutable {
      const Real* go = oc.grad().data();
      auto& gx = xc.grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        const Real* y = oc.data() + r * D;
        const Real* gy = go + r * D;
        double dot = 0;
        for (int i = 0; i < D; ++i) dot += (double)gy[i] * y[i];
        for (int i = 0; i < D; ++i) gx[r * D + i] += (Real)(((double)gy[i] - dot) * y[i]);
      }
      check_grad_finite(gx, "softmax");
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// misc structural ops
// ---------------------------------------------------------------------------

template <class Real>
TensorT<Real> concat_channels(TapeT<Real>* tape, const TensorT<Real>& a, const TensorT<Real>& b) {
  if (a.ndim() != 4 || b.ndim() != 4 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) ||
      a.dim(3) != b.dim(3))
    throw TensorError("concat_channels: shape mismatch");
  int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
  std::int64_t hw = (std::int64_t)H * W;
  TensorT<Real> out{{N, Ca + Cb, H, W}};
  for (int n = 0; n < N; ++n) {
    std::copy(a.data() + (std::int64_t)n * Ca * hw, a.data() + (std::int64_t)(n + 1) * Ca * hw,
              out.data() + (std::int64_t)n * (Ca + Cb) * hw);
    std::copy(b.data() + (std::int64_t)n * Cb * hw, b.data() + (std::int64_t)(n + 1) * Cb * hw,
              out.data() + (std::int64_t)n * (Ca + Cb) * hw + Ca * hw);
  }
  if (track(tape, {&a, &b})) {
    out.set_requires_grad(true);
    TensorT<Real> ac = a, bc = b, oc = out;
    tape->record("concat_channels", [ac, bc, oc, N, Ca, Cb, hw]() mutable {
      const Real* go = oc.grad().data();
      for (int n = 0; n < N; ++n) {
        if (ac.requires_grad()) {
          auto& ga = ac.grad();
          const Real* src = go + (std::int64_t)n * (Ca + Cb) * hw;
          for (std::int64_t i = 0; i < Ca * hw; ++i) ga[(std::int64_t)n * Ca * hw + i] += src[i];
        }
        if (bc.requires_grad()) {
          auto& gb = bc.grad();
          const Real* src = go + (std::int64_t)n * (Ca + Cb) * hw + Ca * hw;
          for (std::int64_t i = 0; i < Cb * hw; ++i) gb[(std::int64_t)n * Cb * hw + i] += src[i];
        }
      }
    });
  }
  return out;
}

template <class Real>
TensorT<Real> upsample_nearest2x(TapeT<Real>* tape, const TensorT<Real>& x) {
  if (x.ndim() != 4) throw TensorError("upsample_nearest2x: expects [N,C,H,W]");
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  TensorT<Real> out{{N, C, H * 2, W * 2}};
  for (std::int64_t nc = 0; nc < (std::int64_t)N * C; ++nc) {
    const Real* xp = x.data() + nc * H * W;
    Real* op = out.data() + nc * H * W * 4;
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        Real v = xp[i * W + j];
        op[(2 * i) * 2 * W + 2 * j] = v;
        op[(2 * i) * 2 * W + 2 * j + 1] = v;
        op[(2 * i + 1) * 2 * W + 2 * j] = v;
        op[(2 * i + 1) * 2 * W + 2 * j + 1] = v;
      }
  }
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    TensorT<Real> xc = x, oc = out;
    tape->record("upsample_nearest2x", [xc, oc, N, C, H, W]() mutable {
      const Real* go = oc.grad().data();
      auto& gx = xc.grad();
      for (std::int64_t nc = 0; nc < (std::int64_t)N * C; ++nc) {
        Real* gp = gx.data() + nc * H * W;
        const Real* op = go + nc * H * W * 4;
        for (int i = 0; i < H; ++i)
          for (int j = 0; j < W; ++j)
            gp[i * W + j] += op[(2 * i) * 2 * W + 2 * j] + op[(2 * i) * 2 * W + 2 * j + 1] +
                             op[(2 * i + 1) * 2 * W + 2 * j] + op[(2 * i + 1) * 2 * W + 2 * j + 1];
      }
    });
  }
  return out;
}

// same data, new shape (copying so gradients stay per-node)
template <class Real>
TensorT<Real> reshape_copy(TapeT<Real>* tape, const TensorT<Real>& x, Shape dims) {
  if (shape_numel(dims) != x.numel()) throw TensorError("reshape_copy: element count mismatch");
  TensorT<Real> out{std::move(dims)};
  std::copy(x.data(), x.data() + x.numel(), out.data());
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    TensorT<Real> xc = x, oc = out;
    tape->record("reshape_copy", [xc, oc]() mutable {
      const auto& go = oc.grad();
      auto& gx = xc.grad();
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += go[i];
    });
  }
  return out;
}

// x [1,...] -> [n,...] repeated along the leading axis
template <class Real>
TensorT<Real> tile_batch(TapeT<Real>* tape, const TensorT<Real>& x, int n) {
  if (x.ndim() < 1 || x.dim(0) != 1) throw TensorError("tile_batch: leading dim must be 1");
  Shape dims = x.dims();
  dims[0] = n;
  TensorT<Real> out{std::move(dims)};
  std::int64_t m = x.numel();
  for (int i = 0; i < n; ++i) std::copy(x.data(), x.data() + m, out.data() + (std::int64_t)i * m);
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    TensorT<Real> xc = x, oc = out;
    tape->record("tile_batch", [xc, oc, n, m]() mutable {
      const auto& go = oc.grad();
      auto& gx = xc.grad();
      for (int i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < m; ++j) gx[j] += go[(std::int64_t)i * m + j];
    });
  }
  return out;
}

// v [E] -> [N,E]
template <class Real>
TensorT<Real> broadcast_row(TapeT<Real>* tape, const TensorT<Real>& v, int n) {
  if (v.ndim() != 1) throw TensorError("broadcast_row: expects a vector");
  int E = v.dim(0);
  TensorT<Real> out{{n, E}};
  for (int i = 0; i < n; ++i) std::copy(v.data(), v.data() + E, out.data() + (std::int64_t)i * E);
  if (track(tape, {&v})) {
    out.set_requires_grad(true);
    TensorT<Real> vc = v, oc = out;
    tape->record("broadcast_row", [vc, oc, n, E]() mutable {
      const Real* go = oc.grad().data();
      auto& gv = vc.grad();
      for (int i = 0; i < n; ++i)
        for (int e = 0; e < E; ++e) gv[e] += go[(std::int64_t)i * E + e];
    });
  }
  return out;
}

// mean over all elements -> scalar tensor [1]
template <class Real>
TensorT<Real> mean_all(TapeT<Real>* tape, const TensorT<Real>& x) {
  std::int64_t n = x.numel();
  double acc = 0;
  for (std::int64_t i = 0; i < n; ++i) acc += (double)x[i];
  TensorT<Real> out{{1}};
  out[0] = (Real)(acc / (double)n);
  check_finite(out, "mean_all");
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    TensorT<Real> xc = x, oc = out;
    tape->record("mean_all", [xc, oc, n]() mutable {
      Real g = oc.grad()[0] / (Real)n;
      auto& gx = xc.grad();
      for (std::int64_t i = 0; i < n; ++i) gx[i] += g;
      check_grad_finite(gx, "mean_all");
    });
  }
  return out;
}

// mean squared error between two same-shape tensors -> scalar
template <class Real>
TensorT<Real> mse(TapeT<Real>* tape, const TensorT<Real>& a, const TensorT<Real>& b) {
  TensorT<Real> d = sub(tape, a, b);
  TensorT<Real> sq = mul(tape, d, d);
  return mean_all(tape, sq);
}

// ---------------------------------------------------------------------------
// multi-head attention with internal projections.
// q [N,Lq,Dq], k/v [N,Lk,Dkv]; output [N,Lq,Dq].
// ---------------------------------------------------------------------------

template <class Real>
struct AttentionParams {
  TensorT<Real> wq, bq;  // [Da, Dq], [Da]
  TensorT<Real> wk, bk;  // [Da, Dkv]
  TensorT<Real> wv, bv;  // [Da, Dkv]
  TensorT<Real> wo, bo;  // [Dq, Da]
};

template <class Real>
TensorT<Real> multi_head_attention(TapeT<Real>* tape, const TensorT<Real>& q,
                                   const TensorT<Real>& k, const TensorT<Real>& v,
                                   const AttentionParams<Real>& p, int heads,
                                   TensorT<Real>* attn_probe = nullptr) {
  if (q.ndim() != 3 || k.ndim() != 3 || v.ndim() != 3)
    throw TensorError("multi_head_attention: expects [N,L,D] inputs");
  if (k.dim(0) != q.dim(0) || v.dim(0) != q.dim(0) || k.dim(1) != v.dim(1) ||
      k.dim(2) != v.dim(2))
    throw TensorError("multi_head_attention: key/value shape mismatch");
  int da = p.wq.dim(0);
  if (da % heads != 0) throw ConfigError("multi_head_attention: dim not divisible by heads");
  int dh = da / heads;

  TensorT<Real> qp = linear(tape, q, p.wq, p.bq);
  TensorT<Real> kp = linear(tape, k, p.wk, p.bk);
  TensorT<Real> vp = linear(tape, v, p.wv, p.bv);
  TensorT<Real> qs = split_heads(tape, qp, heads);
  TensorT<Real> ks = split_heads(tape, kp, heads);
  TensorT<Real> vs = split_heads(tape, vp, heads);
  TensorT<Real> scores = scale(tape, bmm_nt(tape, qs, ks), (Real)(1.0 / std::sqrt((double)dh)));
  TensorT<Real> attn = softmax_last(tape, scores);
  if (attn_probe) *attn_probe = attn.clone();
  TensorT<Real> ctx = bmm_nn(tape, attn, vs);
  TensorT<Real> merged = merge_heads(tape, ctx, heads);
  return linear(tape, merged, p.wo, p.bo);
}

}  // namespace btdm::ops
