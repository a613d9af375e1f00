#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "btdm/tape.hpp"
#include "btdm/tensor.hpp"

namespace testutil {

using btdm::Shape;
using btdm::TensorT;

// Central finite differences against reverse-mode gradients, 64-bit.
// `forward` must rebuild the whole graph from the current input values and
// return the scalar loss. Inputs are perturbed in place.
struct GradCheckResult {
  double max_rel_err = 0;
  std::string worst;
};

inline double rel_err(double a, double b) {
  double denom = std::max({std::abs(a), std::abs(b), 1e-4});
  return std::abs(a - b) / denom;
}

inline GradCheckResult grad_check(std::vector<TensorT<double>*> inputs,
                                  const std::function<double()>& loss_forward,
                                  const std::function<void()>& backward_into_grads,
                                  double eps = 1e-3, int max_coords_per_input = 64,
                                  std::uint64_t seed = 0) {
  for (auto* t : inputs) t->zero_grad();
  backward_into_grads();
  GradCheckResult res;
  std::mt19937_64 pick(seed * 0x9e3779b9u + 12345);
  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    TensorT<double>& t = *inputs[ti];
    std::vector<std::int64_t> coords;
    if (t.numel() <= max_coords_per_input) {
      for (std::int64_t i = 0; i < t.numel(); ++i) coords.push_back(i);
    } else {
      for (int i = 0; i < max_coords_per_input; ++i)
        coords.push_back((std::int64_t)(pick() % (std::uint64_t)t.numel()));
    }
    for (std::int64_t i : coords) {
      double orig = t[i];
      t[i] = orig + eps;
      double lp = loss_forward();
      t[i] = orig - eps;
      double lm = loss_forward();
      t[i] = orig;
      double fd = (lp - lm) / (2 * eps);
      double an = t.grad()[i];
      double e = rel_err(an, fd);
      if (e > res.max_rel_err) {
        res.max_rel_err = e;
        res.worst = "input " + std::to_string(ti) + " coord " + std::to_string(i) + " analytic " +
                    std::to_string(an) + " fd " + std::to_string(fd);
      }
    }
  }
  return res;
}

// Direct-formula multi-head attention reference (independent of the ops
// implementation; plain loops, no Eigen).
inline TensorT<double> mha_reference(const TensorT<double>& q, const TensorT<double>& k,
                                     const TensorT<double>& v, const TensorT<double>& wq,
                                     const TensorT<double>& bq, const TensorT<double>& wk,
                                     const TensorT<double>& bk, const TensorT<double>& wv,
                                     const TensorT<double>& bv, const TensorT<double>& wo,
                                     const TensorT<double>& bo, int heads) {
  int N = q.dim(0), Lq = q.dim(1), Dq = q.dim(2);
  int Lk = k.dim(1), Dkv = k.dim(2);
  int Da = wq.dim(0), dh = Da / heads;
  auto project = [](const TensorT<double>& x, const TensorT<double>& w, const TensorT<double>& b,
                    int rows_n, int rows_l) {
    int din = x.dim(2), dout = w.dim(0);
    TensorT<double> out{{rows_n, rows_l, dout}};
    for (int n = 0; n < rows_n; ++n)
      for (int l = 0; l < rows_l; ++l)
        for (int o = 0; o < dout; ++o) {
          double acc = b[o];
          for (int i = 0; i < din; ++i)
            acc += x[((std::int64_t)n * rows_l + l) * din + i] * w[(std::int64_t)o * din + i];
          out[((std::int64_t)n * rows_l + l) * dout + o] = acc;
        }
    return out;
  };
  TensorT<double> qp = project(q, wq, bq, N, Lq);
  TensorT<double> kp = project(k, wk, bk, N, Lk);
  TensorT<double> vp = project(v, wv, bv, N, Lk);
  TensorT<double> ctx{{N, Lq, Da}};
  for (int n = 0; n < N; ++n)
    for (int h = 0; h < heads; ++h)
      for (int i = 0; i < Lq; ++i) {
        std::vector<double> scores(Lk);
        double mx = -1e300;
        for (int j = 0; j < Lk; ++j) {
          double acc = 0;
          for (int d = 0; d < dh; ++d)
            acc += qp[((std::int64_t)n * Lq + i) * Da + h * dh + d] *
                   kp[((std::int64_t)n * Lk + j) * Da + h * dh + d];
          scores[j] = acc / std::sqrt((double)dh);
          mx = std::max(mx, scores[j]);
        }
        double z = 0;
        for (int j = 0; j < Lk; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          z += scores[j];
        }
        for (int d = 0; d < dh; ++d) {
          double acc = 0;
          for (int j = 0; j < Lk; ++j)
            acc += scores[j] / z * vp[((std::int64_t)n * Lk + j) * Da + h * dh + d];
          ctx[((std::int64_t)n * Lq + i) * Da + h * dh + d] = acc;
        }
      }
  TensorT<double> out{{N, Lq, Dq}};
  for (int n = 0; n < N; ++n)
    for (int i = 0; i < Lq; ++i)
      for (int o = 0; o < Dq; ++o) {
        double acc = bo[o];
        for (int d = 0; d < Da; ++d)
          acc += ctx[((std::int64_t)n * Lq + i) * Da + d] * wo[(std::int64_t)o * Da + d];
        out[((std::int64_t)n * Lq + i) * Dq + o] = acc;
      }
  return out;
}

// Wilson-Hilferty approximation of the chi-square quantile; accurate to a
// fraction of a percent for the dof used in these tests (validated against
// table values in test_training).
inline double chi2_quantile(double p, int dof) {
  // inverse normal via Acklam's rational approximation
  auto inv_norm = [](double q) {
    static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                               -2.759285104469687e+02, 1.383577518672690e+02,
                               -3.066479806614716e+01, 2.506628277459239e+00};
    static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                               -1.556989798598866e+02, 6.680131188771972e+01,
                               -1.328068155288572e+01};
    static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                               -2.400758277161838e+00, -2.549732539343734e+00,
                               4.374664141464968e+00,  2.938163982698783e+00};
    static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                               2.445134137142996e+00, 3.754408661907416e+00};
    double plow = 0.02425, phigh = 1 - plow;
    if (q < plow) {
      double r = std::sqrt(-2 * std::log(q));
      return (((((c[0] * r + c[1]) * r + c[2]) * r + c[3]) * r + c[4]) * r + c[5]) /
             ((((d[0] * r + d[1]) * r + d[2]) * r + d[3]) * r + 1);
    }
    if (q > phigh) {
      double r = std::sqrt(-2 * std::log(1 - q));
      return -(((((c[0] * r + c[1]) * r + c[2]) * r + c[3]) * r + c[4]) * r + c[5]) /
             ((((d[0] * r + d[1]) * r + d[2]) * r + d[3]) * r + 1);
    }
    double r = q - 0.5, s = r * r;
    return (((((a[0] * s + a[1]) * s + a[2]) * s + a[3]) * s + a[4]) * s + a[5]) * r /
           (((((b[0] * s + b[1]) * s + b[2]) * s + b[3]) * s + b[4]) * s + 1);
  };
  double z = inv_norm(p);
  double t = 1.0 - 2.0 / (9.0 * dof) + z * std::sqrt(2.0 / (9.0 * dof));
  return dof * t * t * t;
}

// unique scratch directory under the system temp root
inline std::string scratch_dir(const std::string& tag) {
  auto p = std::filesystem::temp_directory_path() /
           ("btdm_" + tag + "_" + std::to_string(std::random_device{}()));
  std::filesystem::create_directories(p);
  return p.string();
}

}  // namespace testutil
