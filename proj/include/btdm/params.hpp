#pragma once

#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "btdm/tape.hpp"
#include "btdm/tensor.hpp"

namespace btdm {

// Named learnable parameters with deterministic (insertion) iteration order.
template <class Real>
class ParamStoreT {
 public:
  // Returns a handle sharing the stored tensor's node.
  TensorT<Real> create(const std::string& name, Shape dims) {
    if (index_.count(name)) throw TensorError("parameter name already registered: " + name);
    order_.push_back(name);
    index_[name] = tensors_.size();
    tensors_.push_back(TensorT<Real>{std::move(dims)});
    tensors_.back().set_requires_grad(true);
    return tensors_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  TensorT<Real>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw TensorError("unknown parameter: " + name);
    return tensors_[it->second];
  }
  const TensorT<Real>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw TensorError("unknown parameter: " + name);
    return tensors_[it->second];
  }

  const std::vector<std::string>& names() const { return order_; }
  size_t size() const { return tensors_.size(); }

  std::int64_t total_elements() const {
    std::int64_t n = 0;
    for (const auto& t : tensors_) n += t.numel();
    return n;
  }

  void zero_grads() {
    for (auto& t : tensors_) t.zero_grad();
  }

  template <class F>
  void for_each(F&& f) {
    for (size_t i = 0; i < tensors_.size(); ++i) f(order_[i], tensors_[i]);
  }
  template <class F>
  void for_each(F&& f) const {
    for (size_t i = 0; i < tensors_.size(); ++i) f(order_[i], tensors_[i]);
  }

 private:
  std::vector<std::string> order_;
  std::unordered_map<std::string, size_t> index_;
  std::vector<TensorT<Real>> tensors_;
};

using ParamStore = ParamStoreT<float>;

template <class Real>
using GradMap = std::map<std::string, TensorT<Real>>;

// Seeds d(loss)/d(loss) = 1, replays the tape in reverse, and collects the
// gradient of every parameter (zeros for parameters the loss never touched).
// The tape is consumed.
template <class Real>
GradMap<Real> backprop_gradients(TensorT<Real>& loss, ParamStoreT<Real>& params,
                                 TapeT<Real>& tape) {
  if (loss.numel() != 1) throw TensorError("backprop_gradients: loss must be scalar");
  if (!loss.requires_grad() || tape.empty())
    throw TensorError("backprop_gradients: loss was not computed through a recorded graph");
  loss.grad()[0] = Real(1);
  tape.replay_backward();
  GradMap<Real> grads;
  params.for_each([&](const std::string& name, TensorT<Real>& p) {
    TensorT<Real> g{p.dims()};
    if (p.has_grad()) {
      const auto& src = p.grad();
      std::copy(src.begin(), src.end(), g.data());
    }
    grads.emplace(name, std::move(g));
    p.zero_grad();
  });
  loss.zero_grad();
  return grads;
}

}  // namespace btdm
