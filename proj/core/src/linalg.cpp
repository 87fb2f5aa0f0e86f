#include "mesanet/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace mesanet {

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {
std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}
}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (element_count(shape_) != data_.size()) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                     to_string(shape_));
  }
}

Tensor Tensor::from_matrix(const Mat& m) {
  Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  t.as_matrix() = m;
  return t;
}

std::size_t Tensor::rows() const {
  if (shape_.size() != 2) throw ShapeError("rows() on tensor of shape " + to_string(shape_));
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (shape_.size() != 2) throw ShapeError("cols() on tensor of shape " + to_string(shape_));
  return shape_[1];
}

Eigen::Map<RowMat> Tensor::as_matrix() {
  if (shape_.size() == 1) return {data_.data(), 1, static_cast<Eigen::Index>(shape_[0])};
  return {data_.data(), static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(cols())};
}

Eigen::Map<const RowMat> Tensor::as_matrix() const {
  if (shape_.size() == 1) return {data_.data(), 1, static_cast<Eigen::Index>(shape_[0])};
  return {data_.data(), static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(cols())};
}

Mat Tensor::to_matrix() const { return as_matrix(); }

Tensor& Tensor::operator+=(const Tensor& other) {
  require_same_shape(*this, other, "tensor +=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double x : data_) m = std::max(m, std::abs(x));
  return m;
}

double Tensor::sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!same_shape(a, b)) {
    throw ShapeError(std::string(what) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double silu(double x) { return x * sigmoid(x); }

double softplus(double x) {
  if (x > 30.0) return x;
  return std::log1p(std::exp(x));
}

Vec l2_normalize(const Vec& v) {
  if (v.size() == 0) throw ShapeError("l2_normalize: empty vector");
  if (!v.allFinite()) throw NumericError("l2_normalize: non-finite input");
  const double n = v.norm();
  if (n <= kNormGuard) return v;
  return v / n;
}

Vec rms_norm(const Vec& v, const Vec& weight) {
  if (v.size() != weight.size()) {
    throw ShapeError("rms_norm: length " + std::to_string(v.size()) + " vs weight " + std::to_string(weight.size()));
  }
  const double r = std::sqrt(v.squaredNorm() / static_cast<double>(v.size()) + kRmsEpsilon);
  return v.cwiseProduct(weight) / r;
}

Vec logit_softcap(const Vec& logits, double cap) {
  if (!(cap > 0)) throw std::invalid_argument("logit_softcap: cap must be positive");
  return logits.unaryExpr([cap](double x) { return cap * std::tanh(x / cap); });
}

Mat causal_conv4(const Mat& x, std::span<const double> b) {
  if (b.size() != 4) throw ShapeError("causal_conv4: expected 4 coefficients");
  Mat y = Mat::Zero(x.rows(), x.cols());
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    for (Eigen::Index i = 0; i < 4 && i <= t; ++i) y.row(t) += b[static_cast<std::size_t>(i)] * x.row(t - i);
  }
  return y;
}

Mat causal_conv4_depthwise(const Mat& x, const Mat& coeffs) {
  if (coeffs.rows() != 4 || coeffs.cols() != x.cols()) throw ShapeError("causal_conv4_depthwise: coefficients must be 4 x dim");
  Mat y = Mat::Zero(x.rows(), x.cols());
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    for (Eigen::Index i = 0; i < 4 && i <= t; ++i) y.row(t) += coeffs.row(i).cwiseProduct(x.row(t - i));
  }
  return y;
}

}  // namespace mesanet
