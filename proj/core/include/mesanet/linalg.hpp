#pragma once

// Dense arithmetic shared by every layer: a row-major Tensor used on the
// autodiff tape, Eigen aliases used inside the sequence kernels, and the
// pointwise activations / normalizations of the feature pipeline.

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace mesanet {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);

// Row-major dense array. Rank 1 and rank 2 are the only ranks the layers use;
// rank-2 helpers (rows/cols/operator()) require rank 2.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }
  static Tensor from_matrix(const Mat& m);
  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t rows() const;
  std::size_t cols() const;

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }

  Eigen::Map<RowMat> as_matrix();
  Eigen::Map<const RowMat> as_matrix() const;
  Mat to_matrix() const;

  Tensor& operator+=(const Tensor& other);
  void fill(double v);
  bool all_finite() const;
  double max_abs() const;
  double sum() const;

 private:
  Shape shape_;
  std::vector<double> data_;
};

bool same_shape(const Tensor& a, const Tensor& b);
void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

inline constexpr double kNormGuard = 1e-12;
inline constexpr double kRmsEpsilon = 1e-6;
inline constexpr double kLogitCap = 30.0;

double sigmoid(double x);
double silu(double x);
double softplus(double x);

// v / ||v||, or v unchanged when ||v|| <= kNormGuard.
Vec l2_normalize(const Vec& v);
// v_i * weight_i / sqrt(mean(v^2) + kRmsEpsilon).
Vec rms_norm(const Vec& v, const Vec& weight);
Vec logit_softcap(const Vec& logits, double cap);

// X is time x dim. Y_t = sum_{i=0..3} X_{t-i} * b_i, with X_{t-i} = 0 before
// the first step.
Mat causal_conv4(const Mat& x, std::span<const double> b);
// Depthwise variant: coefficient row i applies to lag i for each column.
Mat causal_conv4_depthwise(const Mat& x, const Mat& coeffs);

}  // namespace mesanet
