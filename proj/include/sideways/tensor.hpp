#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sideways {

// Thrown on any dimension disagreement; message names the offending axis.
class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

// Raised when a kernel produces or receives NaN/Inf.
class NonFiniteError : public std::runtime_error {
 public:
  explicit NonFiniteError(const std::string& what) : std::runtime_error(what) {}
};

// Dense row-major n-dimensional array of real scalars.
// Kernels treat tensors as immutable values; precision is fixed per run
// through the Scalar template parameter (float or double).
template <typename Scalar>
class Tensor {
 public:
  using VecMap = Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>;
  using ConstVecMap = Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>;

  Tensor() = default;
  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    for (std::size_t a = 0; a < shape_.size(); ++a) {
      if (shape_[a] <= 0) {
        throw ShapeError("tensor axis " + std::to_string(a) +
                         " has non-positive extent " + std::to_string(shape_[a]));
      }
    }
    data_.assign(static_cast<std::size_t>(count(shape_)), Scalar(0));
  }
  Tensor(std::initializer_list<int> shape) : Tensor(std::vector<int>(shape)) {}

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int> shape, Scalar v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  const std::vector<int>& shape() const { return shape_; }
  int dim(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  Scalar& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  Scalar operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  // Row-major accessors for the ranks the kernels use.
  Scalar& at(int i, int j) { return data_[idx2(i, j)]; }
  Scalar at(int i, int j) const { return data_[idx2(i, j)]; }
  Scalar& at(int i, int j, int k) { return data_[idx3(i, j, k)]; }
  Scalar at(int i, int j, int k) const { return data_[idx3(i, j, k)]; }
  Scalar& at(int i, int j, int k, int l) { return data_[idx4(i, j, k, l)]; }
  Scalar at(int i, int j, int k, int l) const { return data_[idx4(i, j, k, l)]; }

  VecMap vec() { return VecMap(data_.data(), static_cast<Eigen::Index>(data_.size())); }
  ConstVecMap vec() const {
    return ConstVecMap(data_.data(), static_cast<Eigen::Index>(data_.size()));
  }

  bool all_finite() const { return vec().allFinite(); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  std::string shape_str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t a = 0; a < shape_.size(); ++a) os << (a ? "," : "") << shape_[a];
    os << ']';
    return os.str();
  }

  static std::int64_t count(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
  }

 private:
  std::size_t idx2(int i, int j) const {
    return static_cast<std::size_t>(i) * shape_[1] + j;
  }
  std::size_t idx3(int i, int j, int k) const {
    return (static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k;
  }
  std::size_t idx4(int i, int j, int k, int l) const {
    return ((static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k) * shape_[3] + l;
  }

  std::vector<int> shape_;
  std::vector<Scalar> data_;
};

template <typename Scalar>
void require_shape(const Tensor<Scalar>& t, const std::vector<int>& want,
                   const char* name) {
  if (t.shape() != want) {
    Tensor<Scalar> w(want);
    throw ShapeError(std::string(name) + " has shape " + t.shape_str() +
                     ", expected " + w.shape_str());
  }
}

template <typename Scalar>
void require_finite(const Tensor<Scalar>& t, const char* where) {
  if (!t.all_finite()) {
    throw NonFiniteError(std::string("non-finite value in ") + where);
  }
}

// Uniform fill in [-limit, limit]; used by the He-style initializers.
template <typename Scalar>
Tensor<Scalar> uniform_tensor(std::vector<int> shape, Scalar limit,
                              std::mt19937_64& rng) {
  Tensor<Scalar> t(std::move(shape));
  std::uniform_real_distribution<double> dist(-static_cast<double>(limit),
                                              static_cast<double>(limit));
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(dist(rng));
  return t;
}

}  // namespace sideways
