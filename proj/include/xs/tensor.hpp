#ifndef XS_TENSOR_HPP
#define XS_TENSOR_HPP

#include <algorithm>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <vector>

#include "xs/common.hpp"

namespace xs {

namespace detail {
// Default-initializing allocator: resize() leaves scalars uninitialized, so
// kernel outputs that are fully overwritten skip the zero-fill pass.
template <typename T>
struct UninitAlloc : std::allocator<T> {
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    if constexpr (sizeof...(Args) == 0) {
      ::new (static_cast<void*>(p)) U;
    } else {
      ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
  }
};
}  // namespace detail

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

// Dense row-major N-d array. Feature maps use the [N, C, D, H, W] layout
// with x fastest. The scalar type is float for training and double for the
// finite-difference gradient checks.
template <typename T>
class Tensor {
 public:
  using Buffer = std::vector<T, detail::UninitAlloc<T>>;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
    for (int64_t e : shape_) {
      if (e < 1) throw ShapeError("tensor extent must be >= 1, got shape " + shape_str(shape_));
    }
    data_.assign(size_t(shape_numel(shape_)), fill);
  }

  Tensor(Shape shape, const std::vector<T>& data) : shape_(std::move(shape)) {
    if (int64_t(data.size()) != shape_numel(shape_)) {
      throw ShapeError("data length does not match shape " + shape_str(shape_));
    }
    data_.assign(data.begin(), data.end());
  }

  // Same buffer under a new shape with identical element count.
  Tensor reshaped(Shape new_shape) const& {
    Tensor t(*this);
    t.set_shape(std::move(new_shape));
    return t;
  }
  Tensor reshaped(Shape new_shape) && {
    set_shape(std::move(new_shape));
    return std::move(*this);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, T v) { return Tensor(std::move(shape), v); }

  // Uninitialized buffer; caller must overwrite every element.
  static Tensor uninit(Shape shape) {
    Tensor t;
    t.shape_ = std::move(shape);
    for (int64_t e : t.shape_) {
      if (e < 1) throw ShapeError("tensor extent must be >= 1");
    }
    t.data_.resize(size_t(shape_numel(t.shape_)));
    return t;
  }

  static Tensor random_normal(Shape shape, Rng& rng, double mean, double stddev) {
    Tensor t(std::move(shape));
    for (auto& v : t.data_) v = T(rng.normal(mean, stddev));
    return t;
  }

  static Tensor random_uniform(Shape shape, Rng& rng, double lo, double hi) {
    Tensor t(std::move(shape));
    for (auto& v : t.data_) v = T(rng.uniform(lo, hi));
    return t;
  }

  const Shape& shape() const { return shape_; }
  int64_t rank() const { return int64_t(shape_.size()); }
  int64_t extent(int i) const { return shape_[size_t(i)]; }
  int64_t numel() const { return int64_t(data_.size()); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  Buffer& vec() { return data_; }
  const Buffer& vec() const { return data_; }

  T& operator[](int64_t i) { return data_[size_t(i)]; }
  const T& operator[](int64_t i) const { return data_[size_t(i)]; }

  // Linear offset of a multi-index; rank-checked only by assertion-level use.
  int64_t offset(std::initializer_list<int64_t> idx) const {
    int64_t off = 0;
    size_t d = 0;
    for (int64_t i : idx) {
      off = off * shape_[d] + i;
      ++d;
    }
    return off;
  }

  T& at(std::initializer_list<int64_t> idx) { return data_[size_t(offset(idx))]; }
  const T& at(std::initializer_list<int64_t> idx) const { return data_[size_t(offset(idx))]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.reset(shape_);
    for (int64_t i = 0; i < numel(); ++i) out[i] = U(data_[size_t(i)]);
    return out;
  }

  void reset(Shape shape) {
    shape_ = std::move(shape);
    data_.assign(size_t(shape_numel(shape_)), T(0));
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (const T& v : data_) {
      if (!std::isfinite(double(v))) return false;
    }
    return true;
  }

 private:
  void set_shape(Shape s) {
    if (shape_numel(s) != numel()) {
      throw ShapeError("reshape: element count mismatch " + shape_str(s));
    }
    shape_ = std::move(s);
  }

  Shape shape_;
  Buffer data_;
};

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

}  // namespace xs

#endif  // XS_TENSOR_HPP
