#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <new>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mvsdf {

namespace detail {

// Vectorized reductions round differently depending on where a buffer sits
// relative to the SIMD width. Pinning every tensor to one alignment keeps
// results bitwise reproducible across allocations and runs.
template <typename T>
struct AlignedAlloc {
  static constexpr std::size_t kAlign = 64;
  using value_type = T;

  AlignedAlloc() = default;
  template <typename U>
  AlignedAlloc(const AlignedAlloc<U>&) {}

  T* allocate(std::size_t n) {
    if (n == 0) return nullptr;
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(kAlign)));
  }
  void deallocate(T* p, std::size_t n) {
    ::operator delete(p, n * sizeof(T), std::align_val_t(kAlign));
  }
  template <typename U>
  bool operator==(const AlignedAlloc<U>&) const {
    return true;
  }
  template <typename U>
  bool operator!=(const AlignedAlloc<U>&) const {
    return false;
  }
};

}  // namespace detail

// Dense row-major 2D tensor. Everything in the pipeline is naturally
// rank-2 (point batches x channels, tables x features); scalars are [1,1].
template <typename T>
struct Tensor {
  long rows = 0;
  long cols = 0;
  std::vector<T, detail::AlignedAlloc<T>> v;

  Tensor() = default;
  Tensor(long r, long c) : rows(r), cols(c), v(static_cast<size_t>(r) * c) {}

  static Tensor zeros(long r, long c) { return Tensor(r, c); }

  static Tensor full(long r, long c, T x) {
    Tensor t(r, c);
    std::fill(t.v.begin(), t.v.end(), x);
    return t;
  }

  static Tensor scalar(T x) { return full(1, 1, x); }

  static Tensor from_rows(long r, long c, std::initializer_list<T> values) {
    Tensor t(r, c);
    if (static_cast<long>(values.size()) != r * c)
      throw std::runtime_error("Tensor::from_rows: value count does not match shape");
    std::copy(values.begin(), values.end(), t.v.begin());
    return t;
  }

  long size() const { return rows * cols; }

  T& at(long i, long j) { return v[static_cast<size_t>(i) * cols + j]; }
  T at(long i, long j) const { return v[static_cast<size_t>(i) * cols + j]; }

  bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[" << rows << "," << cols << "]";
    return os.str();
  }

  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using FlatArr = Eigen::Array<T, Eigen::Dynamic, 1>;

  Eigen::Map<Mat> mat() { return {v.data(), rows, cols}; }
  Eigen::Map<const Mat> mat() const { return {v.data(), rows, cols}; }
  Eigen::Map<FlatArr> arr() { return {v.data(), static_cast<long>(v.size())}; }
  Eigen::Map<const FlatArr> arr() const { return {v.data(), static_cast<long>(v.size())}; }
};

}  // namespace mvsdf
