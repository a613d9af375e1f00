#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace btdm {

struct TensorError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) {
    if (d <= 0) throw TensorError("non-positive dimension in shape");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

// Dense row-major tensor. Copies are handles onto one shared node holding
// both the values and the (lazily allocated) gradient accumulator, so every
// handle to a logical tensor sees the same gradient. clone() deep-copies.
template <class Real>
class TensorT {
 public:
  TensorT() = default;
  explicit TensorT(Shape dims, Real fill = Real(0)) : dims_(std::move(dims)) {
    node_ = std::make_shared<Node>();
    node_->data.assign(shape_numel(dims_), fill);
  }

  static TensorT zeros(Shape dims) { return TensorT(std::move(dims)); }
  static TensorT full(Shape dims, Real v) { return TensorT(std::move(dims), v); }
  static TensorT from_vector(Shape dims, std::vector<Real> values) {
    TensorT t;
    t.dims_ = std::move(dims);
    if ((std::int64_t)values.size() != shape_numel(t.dims_))
      throw TensorError("from_vector: data length does not match shape " + shape_str(t.dims_));
    t.node_ = std::make_shared<Node>();
    t.node_->data = std::move(values);
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& dims() const { return dims_; }
  int dim(int i) const { return dims_.at(i); }
  int ndim() const { return (int)dims_.size(); }
  std::int64_t numel() const { return node_ ? (std::int64_t)node_->data.size() : 0; }

  Real* data() { return node_->data.data(); }
  const Real* data() const { return node_->data.data(); }
  std::vector<Real>& vec() { return node_->data; }
  const std::vector<Real>& vec() const { return node_->data; }

  Real& operator[](std::int64_t i) { return node_->data[i]; }
  Real operator[](std::int64_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  TensorT& set_requires_grad(bool b) {
    node_->requires_grad = b;
    return *this;
  }

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  std::vector<Real>& grad() {
    if (node_->grad.empty()) node_->grad.assign(node_->data.size(), Real(0));
    return node_->grad;
  }
  const std::vector<Real>& grad() const {
    if (node_->grad.empty()) throw TensorError("grad accessed before allocation");
    return node_->grad;
  }
  void zero_grad() {
    if (node_ && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), Real(0));
  }
  void drop_grad() {
    if (node_) node_->grad.clear();
  }

  // Deep copy of the values (fresh node, no gradient).
  TensorT clone() const {
    TensorT t;
    t.dims_ = dims_;
    t.node_ = std::make_shared<Node>();
    t.node_->data = node_->data;
    t.node_->requires_grad = node_->requires_grad;
    return t;
  }

  bool same_shape(const TensorT& o) const { return dims_ == o.dims_; }
  bool same_node(const TensorT& o) const { return node_ == o.node_; }

  template <class Other>
  TensorT<Other> cast() const {
    TensorT<Other> t{dims_};
    for (std::int64_t i = 0; i < numel(); ++i) t[i] = (Other)node_->data[i];
    return t;
  }

 private:
  struct Node {
    std::vector<Real> data;
    std::vector<Real> grad;  // empty until first use
    bool requires_grad = false;
  };
  Shape dims_;
  std::shared_ptr<Node> node_;
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

template <class Real>
void check_finite(const TensorT<Real>& t, const char* op) {
  const Real* p = t.data();
  const std::int64_t n = t.numel();
  bool ok = true;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) reduction(&& : ok) if (n > 16384)
#endif
  for (std::int64_t i = 0; i < n; ++i) ok = ok && std::isfinite((double)p[i]);
  if (!ok) throw TensorError(std::string("non-finite value produced by op '") + op + "'");
}

// Deterministic random stream: mt19937_64 plus an explicit Box-Muller pair
// cache, so draws do not depend on the standard library's distribution
// implementations. State is serializable for bit-exact resume.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : eng_(seed) {}

  double uniform() {  // [0,1)
    return (double)(eng_() >> 11) * 0x1.0p-53;
  }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  std::uint64_t integer(std::uint64_t n) {  // uniform in [0, n)
    if (n == 0) throw TensorError("Rng::integer(0)");
    std::uint64_t bound = ~std::uint64_t(0) - (~std::uint64_t(0) % n);
    std::uint64_t x;
    do {
      x = eng_();
    } while (x >= bound);
    return x % n;
  }

  template <class Real>
  void fill_normal(TensorT<Real>& t) {
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = (Real)normal();
  }
  // Truncated at two standard deviations, resampled.
  double trunc_normal(double stddev) {
    double z;
    do {
      z = normal();
    } while (std::abs(z) > 2.0);
    return z * stddev;
  }

  std::string serialize() const {
    std::ostringstream os;
    os << eng_ << " " << (have_spare_ ? 1 : 0) << " ";
    os.precision(17);
    os << spare_;
    return os.str();
  }
  void deserialize(const std::string& s) {
    std::istringstream is(s);
    int sp = 0;
    is >> eng_ >> sp >> spare_;
    if (!is) throw TensorError("bad rng state string");
    have_spare_ = sp != 0;
  }

 private:
  std::mt19937_64 eng_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

template <class Real>
TensorT<Real> randn(Shape dims, Rng& rng) {
  TensorT<Real> t{std::move(dims)};
  rng.fill_normal(t);
  return t;
}

}  // namespace btdm
