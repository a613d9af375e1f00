#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "btdm/params.hpp"

namespace btdm {

// Bias-corrected Adam. Moment buffers are addressed by parameter name in
// store order so optimizer state serializes alongside the parameters.
template <class Real>
class AdamT {
 public:
  AdamT(double lr = 1e-4, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void attach(const ParamStoreT<Real>& params) {
    m_.clear();
    v_.clear();
    params.for_each([&](const std::string&, const TensorT<Real>& p) {
      m_.push_back(TensorT<Real>{p.dims()});
      v_.push_back(TensorT<Real>{p.dims()});
    });
    step_ = 0;
  }

  void update(ParamStoreT<Real>& params, const GradMap<Real>& grads) {
    if (m_.size() != params.size()) throw TensorError("adam: optimizer not attached to this store");
    ++step_;
    double bc1 = 1.0 - std::pow(beta1_, (double)step_);
    double bc2 = 1.0 - std::pow(beta2_, (double)step_);
    size_t idx = 0;
    params.for_each([&](const std::string& name, TensorT<Real>& p) {
      auto it = grads.find(name);
      if (it == grads.end()) throw TensorError("adam: missing gradient for parameter " + name);
      const TensorT<Real>& g = it->second;
      if (!g.same_shape(p)) throw TensorError("adam: gradient shape mismatch for " + name);
      TensorT<Real>&m = m_[idx], &v = v_[idx];
      for (std::int64_t i = 0; i < p.numel(); ++i) {
        double gi = (double)g[i];
        double mi = beta1_ * (double)m[i] + (1.0 - beta1_) * gi;
        double vi = beta2_ * (double)v[i] + (1.0 - beta2_) * gi * gi;
        m[i] = (Real)mi;
        v[i] = (Real)vi;
        double mhat = mi / bc1;
        double vhat = vi / bc2;
        p[i] = (Real)((double)p[i] - lr_ * mhat / (std::sqrt(vhat) + eps_));
      }
      ++idx;
    });
  }

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  double beta1() const { return beta1_; }
  double beta2() const { return beta2_; }
  double eps() const { return eps_; }
  std::int64_t step_count() const { return step_; }
  void set_step_count(std::int64_t s) { step_ = s; }

  std::vector<TensorT<Real>>& moments1() { return m_; }
  std::vector<TensorT<Real>>& moments2() { return v_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::int64_t step_ = 0;
  std::vector<TensorT<Real>> m_, v_;
};

using Adam = AdamT<float>;

}  // namespace btdm
