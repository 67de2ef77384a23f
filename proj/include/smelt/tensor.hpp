#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "smelt/errors.hpp"

namespace smelt {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int e : s) n *= e;
  return n;
}

// Dense row-major tensor of doubles, rank 1 or 2. Rank-1 tensors behave as a
// single row [1 x n] wherever a matrix view is required. Immutable by
// convention once handed to a Tape.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate();
  }

  static Tensor zeros(Shape shape) {
    std::vector<double> d(static_cast<size_t>(shape_numel(shape)), 0.0);
    return Tensor(std::move(shape), std::move(d));
  }
  static Tensor full(Shape shape, double v) {
    std::vector<double> d(static_cast<size_t>(shape_numel(shape)), v);
    return Tensor(std::move(shape), std::move(d));
  }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor row(std::vector<double> v) {
    Shape s{static_cast<int>(v.size())};
    return Tensor(std::move(s), std::move(v));
  }
  static Tensor matrix(int r, int c, std::vector<double> v) {
    if (static_cast<int64_t>(v.size()) != static_cast<int64_t>(r) * c)
      throw ShapeError("matrix: data length does not match " + std::to_string(r) + "x" + std::to_string(c));
    return Tensor(Shape{r, c}, std::move(v));
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }

  // Matrix view: rank-1 is a single row.
  int rows() const { return rank() == 2 ? shape_[0] : 1; }
  int cols() const { return rank() == 2 ? shape_[1] : (rank() == 1 ? shape_[0] : 0); }

  bool is_scalar() const { return numel() == 1; }
  double scalar_value() const {
    if (!is_scalar()) throw ShapeError("scalar_value: tensor has " + std::to_string(numel()) + " elements");
    return data_[0];
  }

  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }
  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  double at(int r, int c) const { return data_[static_cast<size_t>(r) * cols() + c]; }
  double& at(int r, int c) { return data_[static_cast<size_t>(r) * cols() + c]; }

  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool same_extents(const Tensor& o) const { return rows() == o.rows() && cols() == o.cols(); }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  std::string shape_str() const {
    std::string s = "[";
    for (size_t i = 0; i < shape_.size(); ++i) {
      if (i) s += "x";
      s += std::to_string(shape_[i]);
    }
    return s + "]";
  }

 private:
  void validate() const {
    if (shape_.empty() || shape_.size() > 2) throw ShapeError("tensor rank must be 1 or 2");
    for (int e : shape_)
      if (e <= 0) throw ShapeError("tensor extents must be positive");
    if (shape_numel(shape_) != static_cast<int64_t>(data_.size()))
      throw ShapeError("tensor data length does not match shape " + shape_str());
  }

  Shape shape_;
  std::vector<double> data_;
};

}  // namespace smelt
