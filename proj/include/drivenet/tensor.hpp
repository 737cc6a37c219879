#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace drivenet {

using Index = std::int64_t;

// 64-byte aligned storage keeps Eigen's vectorized kernels on the same
// aligned/peel split every run, so repeated training runs stay bitwise
// identical even though heap addresses differ.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(64)));
  }
  void deallocate(T* p, std::size_t) {
    ::operator delete(p, std::align_val_t(64));
  }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const {
    return true;
  }
  template <class U>
  bool operator!=(const AlignedAllocator<U>&) const {
    return false;
  }
};

template <class T>
using AlignedVec = std::vector<T, AlignedAllocator<T>>;

// Dense n-dimensional array, row-major, owning its storage. Single precision
// is used for training and inference; double is reserved for the gradient
// checking path, so everything downstream is templated on the scalar.
template <class Scalar>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(checked_size(shape_), Scalar(0));
  }

  Tensor(std::vector<int> shape, const std::vector<Scalar>& values)
      : shape_(std::move(shape)), data_(values.begin(), values.end()) {
    if (static_cast<Index>(data_.size()) != checked_size(shape_)) {
      throw std::invalid_argument("tensor: value count " +
                                  std::to_string(data_.size()) +
                                  " does not match shape " + shape_string());
    }
  }

  static Tensor full(std::vector<int> shape, Scalar v) {
    Tensor t(std::move(shape));
    t.fill(v);
    return t;
  }

  int rank() const { return static_cast<int>(shape_.size()); }
  int extent(int axis) const { return shape_[static_cast<size_t>(axis)]; }
  const std::vector<int>& shape() const { return shape_; }
  Index size() const { return static_cast<Index>(data_.size()); }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  Scalar& operator[](Index i) { return data_[static_cast<size_t>(i)]; }
  Scalar operator[](Index i) const { return data_[static_cast<size_t>(i)]; }

  // Row-major multi-index access; bounds-checked, meant for tests and setup
  // code, not inner loops.
  Scalar& at(std::initializer_list<int> idx) {
    return data_[static_cast<size_t>(flat_index(idx))];
  }
  Scalar at(std::initializer_list<int> idx) const {
    return data_[static_cast<size_t>(flat_index(idx))];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  Tensor reshaped(std::vector<int> new_shape) const {
    Index n = checked_size(new_shape);
    if (n != size()) {
      throw std::invalid_argument("reshape: element count mismatch");
    }
    Tensor out;
    out.shape_ = std::move(new_shape);
    out.data_ = data_;
    return out;
  }

  template <class T>
  Tensor<T> cast() const {
    std::vector<T> out(data_.size());
    for (size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<T>(data_[i]);
    return Tensor<T>(shape_, std::move(out));
  }

  void fill(Scalar v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    for (Scalar v : data_) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  void require_finite(const char* what) const {
    if (!all_finite()) {
      throw std::runtime_error(std::string(what) + ": non-finite value");
    }
  }

  std::string shape_string() const {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape_.size(); ++i) {
      if (i) os << ',';
      os << shape_[i];
    }
    os << ']';
    return os.str();
  }

 private:
  Index flat_index(std::initializer_list<int> idx) const {
    if (static_cast<int>(idx.size()) != rank()) {
      throw std::invalid_argument("index rank mismatch");
    }
    Index flat = 0;
    int axis = 0;
    for (int i : idx) {
      if (i < 0 || i >= shape_[static_cast<size_t>(axis)]) {
        throw std::out_of_range("tensor index out of range");
      }
      flat = flat * shape_[static_cast<size_t>(axis)] + i;
      ++axis;
    }
    return flat;
  }

  static Index checked_size(const std::vector<int>& shape) {
    Index n = 1;
    for (int e : shape) {
      if (e < 0) throw std::invalid_argument("negative tensor extent");
      n *= e;
    }
    return n;
  }

  std::vector<int> shape_;
  AlignedVec<Scalar> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

template <class S>
using MatrixRM =
    Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using VectorE = Eigen::Matrix<S, Eigen::Dynamic, 1>;

// Map a contiguous slice of a tensor as a rows x cols row-major matrix.
template <class S>
Eigen::Map<MatrixRM<S>> map_matrix(S* data, Index rows, Index cols) {
  return Eigen::Map<MatrixRM<S>>(data, rows, cols);
}
template <class S>
Eigen::Map<const MatrixRM<S>> map_matrix(const S* data, Index rows,
                                         Index cols) {
  return Eigen::Map<const MatrixRM<S>>(data, rows, cols);
}
template <class S>
Eigen::Map<VectorE<S>> map_vector(S* data, Index n) {
  return Eigen::Map<VectorE<S>>(data, n);
}
template <class S>
Eigen::Map<const VectorE<S>> map_vector(const S* data, Index n) {
  return Eigen::Map<const VectorE<S>>(data, n);
}

// ---------------------------------------------------------------------------
// Free tensor operations

template <class S>
Tensor<S> make_tensor(std::vector<int> shape, std::vector<S> values) {
  Tensor<S> t(std::move(shape), std::move(values));
  t.require_finite("make_tensor");
  return t;
}

// Stack rank-3 [C,H,W] tensors along the channel axis, preserving order.
template <class S>
Tensor<S> concat_channels(const std::vector<Tensor<S>>& frames) {
  if (frames.empty()) throw std::invalid_argument("concat_channels: no input");
  int h = 0, w = 0, c_total = 0;
  for (const auto& f : frames) {
    if (f.rank() != 3) {
      throw std::invalid_argument("concat_channels: tensors must be [C,H,W]");
    }
    if (&f == &frames.front()) {
      h = f.extent(1);
      w = f.extent(2);
    } else if (f.extent(1) != h || f.extent(2) != w) {
      throw std::invalid_argument("concat_channels: spatial dims differ");
    }
    c_total += f.extent(0);
  }
  Tensor<S> out({c_total, h, w});
  S* dst = out.data();
  for (const auto& f : frames) {
    std::copy(f.data(), f.data() + f.size(), dst);
    dst += f.size();
  }
  return out;
}

// Inverse of concat_channels for a given channel partition.
template <class S>
std::vector<Tensor<S>> split_channels(const Tensor<S>& t,
                                      const std::vector<int>& parts) {
  if (t.rank() != 3) throw std::invalid_argument("split_channels: need [C,H,W]");
  int sum = 0;
  for (int p : parts) sum += p;
  if (sum != t.extent(0)) {
    throw std::invalid_argument("split_channels: partition does not cover C");
  }
  std::vector<Tensor<S>> out;
  const Index plane = static_cast<Index>(t.extent(1)) * t.extent(2);
  const S* src = t.data();
  for (int p : parts) {
    Tensor<S> piece({p, t.extent(1), t.extent(2)});
    std::copy(src, src + p * plane, piece.data());
    src += p * plane;
    out.push_back(std::move(piece));
  }
  return out;
}

// Mirror a [C,H,W] tensor along the width axis: (c,h,w) -> (c,h,W-1-w).
template <class S>
Tensor<S> flip_width(const Tensor<S>& t) {
  if (t.rank() != 3) throw std::invalid_argument("flip_width: need [C,H,W]");
  const int c = t.extent(0), h = t.extent(1), w = t.extent(2);
  Tensor<S> out({c, h, w});
  for (int ci = 0; ci < c; ++ci) {
    for (int hi = 0; hi < h; ++hi) {
      const S* src = t.data() + (static_cast<Index>(ci) * h + hi) * w;
      S* dst = out.data() + (static_cast<Index>(ci) * h + hi) * w;
      for (int wi = 0; wi < w; ++wi) dst[wi] = src[w - 1 - wi];
    }
  }
  return out;
}

// Central finite differences of a scalar-valued function; the oracle every
// analytic backward pass in the project is validated against.
inline TensorD finite_diff_grad(const std::function<double(const TensorD&)>& f,
                                const TensorD& x, double eps) {
  if (!(eps > 0)) throw std::invalid_argument("finite_diff_grad: eps <= 0");
  TensorD grad(x.shape());
  TensorD probe = x;
  for (Index i = 0; i < x.size(); ++i) {
    const double v = x[i];
    probe[i] = v + eps;
    const double fp = f(probe);
    probe[i] = v - eps;
    const double fm = f(probe);
    probe[i] = v;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw std::runtime_error("finite_diff_grad: non-finite function value");
    }
    grad[i] = (fp - fm) / (2.0 * eps);
  }
  return grad;
}

// Worst-case relative disagreement between two gradients, scaled by the
// largest magnitude present so exact zeros compare cleanly.
template <class S>
double max_rel_error(const Tensor<S>& a, const Tensor<S>& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("max_rel_error: shape");
  double max_abs = 0, max_diff = 0;
  for (Index i = 0; i < a.size(); ++i) {
    max_abs = std::max({max_abs, std::abs(static_cast<double>(a[i])),
                        std::abs(static_cast<double>(b[i]))});
    max_diff = std::max(
        max_diff, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  if (max_abs == 0) return 0;
  return max_diff / std::max(max_abs, 1e-12);
}

}  // namespace drivenet
