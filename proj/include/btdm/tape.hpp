#pragma once

#include <functional>
#include <string>
#include <vector>

#include "btdm/tensor.hpp"

namespace btdm {

// Ordered record of executed differentiable operations. Each entry owns a
// closure that propagates output gradients to input gradients. A tape is
// built by one forward computation, replayed in reverse exactly once, and
// cleared afterwards.
template <class Real>
class TapeT {
 public:
  void record(const char* name, std::function<void()> backward_fn) {
    entries_.push_back(Entry{name, std::move(backward_fn)});
  }

  // Replays backward closures in reverse order, then clears the tape.
  void replay_backward() {
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->fn();
    clear();
  }

  size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  void clear() { entries_.clear(); }

 private:
  struct Entry {
    const char* name;
    std::function<void()> fn;
  };
  std::vector<Entry> entries_;
};

using Tape = TapeT<float>;
using Tape64 = TapeT<double>;

// Gradient accumulation helper used by backward closures; surfaces the first
// non-finite gradient with the producing op's name.
template <class Real>
inline void check_grad_finite(const std::vector<Real>& g, const char* op) {
  for (Real v : g) {
    if (!std::isfinite((double)v))
      throw TensorError(std::string("non-finite gradient produced by op '") + op + "'");
  }
}

}  // namespace btdm
