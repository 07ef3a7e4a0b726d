#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace nqe {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

/// Input rejected by a precondition check (bad shape, invalid config, malformed file).
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline Index shape_product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Dense row-major n-d array. Images and feature maps are NHWC, dense activations NU,
/// kernels HWIO. The divisor records an exact rational scale: the represented value
/// of element i is `array()[i] / divisor()`. It stays 1 everywhere except behind a
/// 2-bit HWMSB activation, whose codes are k/3.
template <typename Scalar_>
class Tensor {
 public:
  using Scalar = Scalar_;
  using Storage = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Tensor() = default;

  explicit Tensor(Shape shape, Scalar fill = Scalar(0))
      : shape_(std::move(shape)), data_(Storage::Constant(checked_size(shape_), fill)) {}

  Tensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != checked_size(shape_))
      throw ValidationError("tensor data size " + std::to_string(data_.size()) +
                            " does not match shape " + shape_string(shape_));
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index i) const { return shape_.at(static_cast<size_t>(i)); }
  Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Storage& array() { return data_; }
  const Storage& array() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  Scalar& operator[](Index i) { return data_[i]; }
  const Scalar& operator[](Index i) const { return data_[i]; }

  Scalar& at(Index n, Index h, Index w, Index c) { return data_[offset(n, h, w, c)]; }
  const Scalar& at(Index n, Index h, Index w, Index c) const { return data_[offset(n, h, w, c)]; }

  std::int32_t divisor() const { return divisor_; }
  void set_divisor(std::int32_t d) { divisor_ = d; }

  /// Row-major matrix view with the last dimension as columns.
  Eigen::Map<RowMatrix<Scalar>> matrix() { return {data_.data(), size() / cols(), cols()}; }
  Eigen::Map<const RowMatrix<Scalar>> matrix() const { return {data_.data(), size() / cols(), cols()}; }

  Tensor reshaped(Shape shape) const {
    Tensor out(std::move(shape), data_);
    out.divisor_ = divisor_;
    return out;
  }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> out(shape_, data_.template cast<Other>().eval());
    out.set_divisor(divisor_);
    return out;
  }

  bool operator==(const Tensor& o) const {
    return shape_ == o.shape_ && divisor_ == o.divisor_ && (data_ == o.data_).all();
  }

 private:
  static Index checked_size(const Shape& shape) {
    for (Index d : shape)
      if (d < 0) throw ValidationError("negative dimension in shape " + shape_string(shape));
    return shape_product(shape);
  }
  Index cols() const { return shape_.empty() ? 1 : std::max<Index>(shape_.back(), 1); }
  Index offset(Index n, Index h, Index w, Index c) const {
    return ((n * shape_[1] + h) * shape_[2] + w) * shape_[3] + c;
  }

  Shape shape_;
  Storage data_;
  std::int32_t divisor_ = 1;
};

using RealTensor = Tensor<double>;
using IntTensor = Tensor<std::int32_t>;
using ByteTensor = Tensor<std::uint8_t>;

/// Divides out a pending rational divisor with a single correctly rounded operation.
inline RealTensor resolve_divisor(RealTensor x) {
  if (x.divisor() != 1) {
    x.array() /= static_cast<double>(x.divisor());
    x.set_divisor(1);
  }
  return x;
}

inline void require_rank(const Shape& shape, Index rank, const char* what) {
  if (static_cast<Index>(shape.size()) != rank)
    throw ValidationError(std::string(what) + ": expected rank " + std::to_string(rank) +
                          ", got shape " + shape_string(shape));
}

}  // namespace nqe
