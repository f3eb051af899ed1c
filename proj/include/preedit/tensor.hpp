#pragma once

#include <cstdint>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace preedit {

// Dense row-major array of doubles. Rank is small (<= 4 in practice) but
// nothing here assumes a fixed one.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int64_t> shape)
      : shape_(std::move(shape)), data_(numel_of(shape_), 0.0) {}
  Tensor(std::vector<int64_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<int64_t>(data_.size()) != numel_of(shape_))
      throw std::invalid_argument("tensor: data size does not match shape " +
                                  shape_str(shape_));
  }

  static Tensor scalar(double v) { return Tensor({}, {v}); }
  static Tensor full(std::vector<int64_t> shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  static int64_t numel_of(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
      if (d < 0) throw std::invalid_argument("tensor: negative extent");
      n *= d;
    }
    return n;
  }

  static std::string shape_str(const std::vector<int64_t>& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
      if (i) os << ',';
      os << shape[i];
    }
    os << ']';
    return os.str();
  }

  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  int rank() const { return static_cast<int>(shape_.size()); }
  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t extent(int axis) const { return shape_.at(static_cast<size_t>(axis)); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // 2-D / 3-D / 4-D accessors for the common cases.
  double& at(int64_t i, int64_t j) { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
  double at(int64_t i, int64_t j) const { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
  double& at(int64_t i, int64_t j, int64_t k) {
    return data_[static_cast<size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }
  double at(int64_t i, int64_t j, int64_t k) const {
    return data_[static_cast<size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }
  double& at(int64_t i, int64_t j, int64_t k, int64_t l) {
    return data_[static_cast<size_t>(((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l)];
  }
  double at(int64_t i, int64_t j, int64_t k, int64_t l) const {
    return data_[static_cast<size_t>(((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l)];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  Tensor reshaped(std::vector<int64_t> shape) const {
    if (numel_of(shape) != numel())
      throw std::invalid_argument("tensor: reshape " + shape_str(shape_) + " -> " +
                                  shape_str(shape) + " changes element count");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  double max_abs() const {
    double m = 0;
    for (double v : data_) m = std::max(m, std::abs(v));
    return m;
  }

 private:
  std::vector<int64_t> shape_;
  std::vector<double> data_;
};

inline Tensor random_uniform(std::vector<int64_t> shape, double lo, double hi,
                             std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = dist(rng);
  return t;
}

inline Tensor random_normal(std::vector<int64_t> shape, double mean, double std,
                            std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(mean, std);
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = dist(rng);
  return t;
}

}  // namespace preedit
