#ifndef REPHOTO_AUTODIFF_HPP_
#define REPHOTO_AUTODIFF_HPP_

#include <functional>
#include <memory>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SparseCore>

// Minimal define-by-run reverse-mode differentiation over Eigen matrices.
//
// Every value is a row-major matrix. Image-like values store one channel per
// row and pixels along the columns in raster order; `height()` and `width()`
// record that spatial layout (cols == height * width). Non-spatial values use
// height 1 and width cols.

namespace rephoto::ad {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using SpMat = Eigen::SparseMatrix<double, Eigen::RowMajor>;
using Index = Eigen::Index;

struct Node {
  Mat value;
  Mat grad;
  int height = 1;
  int width = 1;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Node&)> backward;
};

class Var {
 public:
  Var() = default;
  explicit Var(Mat value, bool requires_grad = false);
  Var(Mat value, int height, int width, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Mat& value() const { return node_->value; }
  const Mat& grad() const { return node_->grad; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  int height() const { return node_->height; }
  int width() const { return node_->width; }
  bool requires_grad() const { return node_->requires_grad; }
  bool defined() const { return node_ != nullptr; }
  double item() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

inline Var constant(Mat value) { return Var(std::move(value), false); }
inline Var constant(Mat value, int height, int width) {
  return Var(std::move(value), height, width, false);
}
inline Var parameter(Mat value) { return Var(std::move(value), true); }
inline Var parameter(Mat value, int height, int width) {
  return Var(std::move(value), height, width, true);
}
Var scalar(double v);

// Runs reverse accumulation from a 1x1 root. Gradients of every node reachable
// from the root are reset before accumulation, so leaves may be reused across
// successive graphs.
void backward(const Var& root);

// Copy of `x` detached from the graph.
Var detach(const Var& x);

// Elementwise arithmetic. Operands broadcast when a dimension is 1.
Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var operator*(const Var& a, const Var& b);
Var operator/(const Var& a, const Var& b);
Var operator-(const Var& a);
Var operator+(const Var& a, double k);
Var operator+(double k, const Var& a);
Var operator-(const Var& a, double k);
Var operator-(double k, const Var& a);
Var operator*(const Var& a, double k);
Var operator*(double k, const Var& a);
Var operator/(const Var& a, double k);

Var square(const Var& x);
Var sqrt(const Var& x);
Var exp(const Var& x);
Var log(const Var& x);
Var abs(const Var& x);
Var relu(const Var& x);
Var leaky_relu(const Var& x, double slope);
Var huber(const Var& x, double delta);
// Gradient passes where lo < x < hi and is zero elsewhere.
Var clamp(const Var& x, double lo, double hi);
// x^exponent elementwise with a 1x1 exponent; d/dx uses max(x, tiny) so the
// derivative stays finite at x = 0.
Var pow(const Var& x, const Var& exponent);

Var sum(const Var& x);
Var mean(const Var& x);
Var row_sum(const Var& x);   // r x 1
Var col_sum(const Var& x);   // 1 x c
Var row_mean(const Var& x);  // r x 1
Var row_min(const Var& x);   // r x 1
Var row_max(const Var& x);   // r x 1
Var col_max(const Var& x);   // 1 x c

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& x);
Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(const Var& x, Index start, Index count);
Var with_spatial(const Var& x, int height, int width);

// Applies out_c = Ry * X_c * Rx^T to every channel row reshaped to height x
// width. Covers blur, resampling, up/downsampling and cropping.
Var separable(const Var& x, const SpMat& ry, const SpMat& rx);

// 2-D convolution of a channels x (h*w) input with weights of shape
// out_channels x (in_channels * kernel * kernel), zero padding.
Var conv2d(const Var& x, const Var& weight, int kernel, int stride, int padding);
Var max_pool(const Var& x, int kernel, int stride, int padding);

}  // namespace rephoto::ad

#endif  // REPHOTO_AUTODIFF_HPP_
