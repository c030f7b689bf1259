#pragma once

#include <Eigen/Dense>

#include <cassert>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <vector>

namespace plug {

template <typename T>
using MatMap =
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatMap = Eigen::Map<
    const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// Dense row-major tensor. Shapes are small (<= 4 dims in practice).
template <typename T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(numel_of(shape), T(0)) {}
  Tensor(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    assert((int64_t)data.size() == numel_of(shape));
  }

  static int64_t numel_of(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
  }

  int64_t numel() const { return (int64_t)data.size(); }
  int dim(int i) const { return shape[i]; }
  int ndim() const { return (int)shape.size(); }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  T& operator[](int64_t i) { return data[i]; }
  const T& operator[](int64_t i) const { return data[i]; }

  // 2-d accessors (row-major)
  T& at(int i, int j) { return data[(int64_t)i * shape[1] + j]; }
  const T& at(int i, int j) const { return data[(int64_t)i * shape[1] + j]; }

  // Map the last dim as columns, everything before as rows.
  MatMap<T> mat() {
    int cols = shape.back();
    return MatMap<T>(data.data(), numel() / cols, cols);
  }
  ConstMatMap<T> mat() const {
    int cols = shape.back();
    return ConstMatMap<T>(data.data(), numel() / cols, cols);
  }
  // Arbitrary 2-d map over a contiguous block.
  MatMap<T> block(int64_t offset, int rows, int cols) {
    return MatMap<T>(data.data() + offset, rows, cols);
  }
  ConstMatMap<T> block(int64_t offset, int rows, int cols) const {
    return ConstMatMap<T>(data.data() + offset, rows, cols);
  }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }
  void zero() { fill(T(0)); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape);
    for (int64_t i = 0; i < numel(); ++i) out.data[i] = (U)data[i];
    return out;
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace plug
