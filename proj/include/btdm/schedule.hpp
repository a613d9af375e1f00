#pragma once

#include <vector>

#include "btdm/tensor.hpp"

namespace btdm {

struct ScheduleError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Log-SNR noise schedule. lambdas[i] is the per-step log signal-to-noise
// ratio of step k = i+1; alphas[i] = sigmoid(lambdas[i]) is the per-step
// retained-signal fraction, and alpha_bars holds the cumulative products
// with the convention alpha_bar(0) = 1. All schedule math is 64-bit.
struct NoiseSchedule {
  int K = 0;
  double lambda_max = 0, lambda_min = 0;
  std::vector<double> lambdas;     // size K, strictly decreasing
  std::vector<double> alphas;      // size K, sigmoid(lambda)
  std::vector<double> alpha_bars;  // size K+1, alpha_bars[0] = 1

  double lambda_at(int k) const {  // k in [1,K]
    if (k < 1 || k > K) throw ScheduleError("step index out of range");
    return lambdas[k - 1];
  }
  double alpha_at(int k) const {
    if (k < 1 || k > K) throw ScheduleError("step index out of range");
    return alphas[k - 1];
  }
  double alpha_bar_at(int k) const {  // k in [0,K]
    if (k < 0 || k > K) throw ScheduleError("step index out of range");
    return alpha_bars[k];
  }
};

// Linear-in-lambda schedule from lambda_max (k=1) down to lambda_min (k=K).
// Default endpoints keep the cumulative product of sigmoids well inside
// double range at K=1000 while ending in an essentially pure-noise marginal.
NoiseSchedule make_schedule(int K, double lambda_max = 9.2, double lambda_min = 2.5);

// One resolved level of a sampling plan: the conditioning log-SNR fed to the
// denoiser and the marginal retained-signal fraction at that level.
struct PlanLevel {
  double lambda;
  double alpha_bar;
};

// Uniform re-spacing of a schedule to k_sample levels (by index into the
// source schedule, endpoints included). levels[0] is the cleanest retained
// level, levels[k_sample-1] the noisiest; marginals are preserved from the
// source schedule so no retraining is needed.
std::vector<PlanLevel> respace(const NoiseSchedule& sched, int k_sample);

// y_k = sqrt(abar_k) * y0 + sqrt(1 - abar_k) * eps ; k = 0 returns y0 exactly.
template <class Real>
TensorT<Real> forward_marginal(const TensorT<Real>& y0, int k, const TensorT<Real>& eps,
                               const NoiseSchedule& sched) {
  if (k < 0 || k > sched.K) throw ScheduleError("forward_marginal: step index out of range");
  if (!y0.same_shape(eps)) throw TensorError("forward_marginal: eps shape mismatch");
  if (k == 0) return y0.clone();
  double ab = sched.alpha_bar_at(k);
  double cs = std::sqrt(ab), cn = std::sqrt(1.0 - ab);
  TensorT<Real> out{y0.dims()};
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = (Real)(cs * (double)y0[i] + cn * (double)eps[i]);
  check_finite(out, "forward_marginal");
  return out;
}

// Single diffusion step: y_k = sqrt(sigmoid(lambda_k)) * y_{k-1}
//                             + sqrt(sigmoid(-lambda_k)) * eps.
template <class Real>
TensorT<Real> per_step_transition(const TensorT<Real>& y_prev, int k, const TensorT<Real>& eps,
                                  const NoiseSchedule& sched) {
  if (k < 1 || k > sched.K) throw ScheduleError("per_step_transition: step index out of range");
  if (!y_prev.same_shape(eps)) throw TensorError("per_step_transition: eps shape mismatch");
  double lam = sched.lambda_at(k);
  double a = 1.0 / (1.0 + std::exp(-lam));
  double cs = std::sqrt(a), cn = std::sqrt(1.0 - a);
  TensorT<Real> out{y_prev.dims()};
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = (Real)(cs * (double)y_prev[i] + cn * (double)eps[i]);
  check_finite(out, "per_step_transition");
  return out;
}

// Deterministic reverse update between two marginal levels:
//   eps_hat = (y - sqrt(abar_from) * x0_hat) / sqrt(1 - abar_from)
//   y'      = sqrt(abar_to) * x0_hat + sqrt(1 - abar_to) * eps_hat
template <class Real>
TensorT<Real> reverse_step_between(const TensorT<Real>& y, const TensorT<Real>& x0_hat,
                                   double abar_from, double abar_to) {
  if (!y.same_shape(x0_hat)) throw TensorError("reverse_step: shape mismatch");
  check_finite(y, "reverse_step(input)");
  check_finite(x0_hat, "reverse_step(prediction)");
  double sf = std::sqrt(abar_from), nf = std::sqrt(1.0 - abar_from);
  double st = std::sqrt(abar_to), nt = std::sqrt(1.0 - abar_to);
  TensorT<Real> out{y.dims()};
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    double eps_hat = ((double)y[i] - sf * (double)x0_hat[i]) / nf;
    out[i] = (Real)(st * (double)x0_hat[i] + nt * eps_hat);
  }
  check_finite(out, "reverse_step");
  return out;
}

// Schedule-indexed reverse step k -> k-1; k = 1 returns x0_hat exactly.
template <class Real>
TensorT<Real> reverse_step(const TensorT<Real>& y_k, const TensorT<Real>& x0_hat, int k,
                           const NoiseSchedule& sched) {
  if (k < 1 || k > sched.K) throw ScheduleError("reverse_step: step index out of range");
  return reverse_step_between(y_k, x0_hat, sched.alpha_bar_at(k), sched.alpha_bar_at(k - 1));
}

}  // namespace btdm
