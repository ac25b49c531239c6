#include "rephoto/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <unordered_set>

namespace rephoto::ad {
namespace {

using NodePtr = std::shared_ptr<Node>;

std::string shape_str(const Mat& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

// Builds a result node. Parents and the backward closure are only kept when
// some parent needs a gradient.
Var make(Mat value, int height, int width, std::vector<NodePtr> parents,
         std::function<void(const Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->height = height;
  node->width = width;
  bool needs = false;
  for (const auto& p : parents) needs = needs || p->requires_grad;
  if (needs) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward = std::move(backward_fn);
  }
  return Var(std::move(node));
}

Var make_flat(Mat value, std::vector<NodePtr> parents, std::function<void(const Node&)> fn) {
  const int w = static_cast<int>(value.cols());
  return make(std::move(value), 1, w, std::move(parents), std::move(fn));
}

// Spatial layout of a result whose column count is `cols`, taken from
// whichever operand shares it.
std::pair<int, int> layout_for(Index cols, const Var& a, const Var& b) {
  if (a.cols() == cols) return {a.height(), a.width()};
  if (b.cols() == cols) return {b.height(), b.width()};
  return {1, static_cast<int>(cols)};
}

Mat broadcast(const Mat& m, Index rows, Index cols) {
  if (m.rows() == rows && m.cols() == cols) return m;
  if (m.rows() == 1 && m.cols() == 1) return Mat::Constant(rows, cols, m(0, 0));
  if (m.cols() == 1 && m.rows() == rows) return m.replicate(1, cols);
  if (m.rows() == 1 && m.cols() == cols) return m.replicate(rows, 1);
  throw std::invalid_argument("cannot broadcast " + shape_str(m) + " to " +
                              std::to_string(rows) + "x" + std::to_string(cols));
}

// Sums a broadcast gradient back down to the operand's shape.
Mat reduce_to(const Mat& g, Index rows, Index cols) {
  if (g.rows() == rows && g.cols() == cols) return g;
  if (rows == 1 && cols == 1) return Mat::Constant(1, 1, g.sum());
  if (cols == 1) return g.rowwise().sum();
  return g.colwise().sum();
}

Index bdim(Index a, Index b) {
  if (a == b || b == 1) return a;
  if (a == 1) return b;
  throw std::invalid_argument("incompatible broadcast dimensions " + std::to_string(a) +
                              " and " + std::to_string(b));
}

template <typename Fwd, typename GradA, typename GradB>
Var binary(const Var& a, const Var& b, Fwd fwd, GradA ga, GradB gb) {
  const Index rows = bdim(a.rows(), b.rows());
  const Index cols = bdim(a.cols(), b.cols());
  Mat av = broadcast(a.value(), rows, cols);
  Mat bv = broadcast(b.value(), rows, cols);
  Mat out = fwd(av, bv);
  auto [h, w] = layout_for(cols, a, b);
  NodePtr an = a.node(), bn = b.node();
  return make(std::move(out), h, w, {an, bn},
              [an, bn, av = std::move(av), bv = std::move(bv), ga, gb](const Node& o) {
                if (an->requires_grad)
                  an->grad += reduce_to(ga(o.grad, av, bv, o.value), an->value.rows(),
                                        an->value.cols());
                if (bn->requires_grad)
                  bn->grad += reduce_to(gb(o.grad, av, bv, o.value), bn->value.rows(),
                                        bn->value.cols());
              });
}

// Elementwise map; `dfdx(x, y)` gives the local derivative array.
template <typename F, typename D>
Var unary(const Var& x, F f, D dfdx) {
  Mat out = x.value().unaryExpr(f);
  NodePtr xn = x.node();
  Mat y = out;
  return make(std::move(out), x.height(), x.width(), {xn},
              [xn, dfdx, y = std::move(y)](const Node& o) {
                xn->grad.array() += o.grad.array() * dfdx(xn->value, y).array();
              });
}

void check_spatial(const Var& x, const char* op) {
  if (static_cast<Index>(x.height()) * x.width() != x.cols())
    throw std::invalid_argument(std::string(op) + ": value has no spatial layout");
}

}  // namespace

Var::Var(Mat value, bool requires_grad)
    : Var(std::move(value), 1, 0, requires_grad) {}

Var::Var(Mat value, int height, int width, bool requires_grad) {
  node_ = std::make_shared<Node>();
  if (width == 0) width = static_cast<int>(value.cols());
  node_->value = std::move(value);
  node_->height = height;
  node_->width = width;
  node_->requires_grad = requires_grad;
}

double Var::item() const {
  if (rows() != 1 || cols() != 1) throw std::logic_error("item() on non-scalar " + shape_str(value()));
  return value()(0, 0);
}

Var scalar(double v) { return constant(Mat::Constant(1, 1, v)); }

void backward(const Var& root) {
  if (root.rows() != 1 || root.cols() != 1)
    throw std::invalid_argument("backward requires a scalar root, got " + shape_str(root.value()));
  if (!root.requires_grad()) return;

  // Iterative post-order DFS for a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node* p = n->parents[i++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (Node* n : order) n->grad = Mat::Zero(n->value.rows(), n->value.cols());
  root.node()->grad(0, 0) = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

Var detach(const Var& x) { return constant(x.value(), x.height(), x.width()); }

Var operator+(const Var& a, const Var& b) {
  return binary(
      a, b, [](const Mat& x, const Mat& y) -> Mat { return x + y; },
      [](const Mat& g, const Mat&, const Mat&, const Mat&) -> Mat { return g; },
      [](const Mat& g, const Mat&, const Mat&, const Mat&) -> Mat { return g; });
}

Var operator-(const Var& a, const Var& b) {
  return binary(
      a, b, [](const Mat& x, const Mat& y) -> Mat { return x - y; },
      [](const Mat& g, const Mat&, const Mat&, const Mat&) -> Mat { return g; },
      [](const Mat& g, const Mat&, const Mat&, const Mat&) -> Mat { return -g; });
}

Var operator*(const Var& a, const Var& b) {
  return binary(
      a, b, [](const Mat& x, const Mat& y) -> Mat { return x.cwiseProduct(y); },
      [](const Mat& g, const Mat&, const Mat& y, const Mat&) -> Mat { return g.cwiseProduct(y); },
      [](const Mat& g, const Mat& x, const Mat&, const Mat&) -> Mat { return g.cwiseProduct(x); });
}

Var operator/(const Var& a, const Var& b) {
  return binary(
      a, b, [](const Mat& x, const Mat& y) -> Mat { return x.cwiseQuotient(y); },
      [](const Mat& g, const Mat&, const Mat& y, const Mat&) -> Mat { return g.cwiseQuotient(y); },
      [](const Mat& g, const Mat&, const Mat& y, const Mat& out) -> Mat {
        return -(g.cwiseProduct(out)).cwiseQuotient(y);
      });
}

Var operator-(const Var& a) { return a * -1.0; }

Var operator+(const Var& a, double k) {
  NodePtr an = a.node();
  Mat out = a.value().array() + k;
  return make(std::move(out), a.height(), a.width(), {an},
              [an](const Node& o) { an->grad += o.grad; });
}
Var operator+(double k, const Var& a) { return a + k; }
Var operator-(const Var& a, double k) { return a + (-k); }
Var operator-(double k, const Var& a) { return (a * -1.0) + k; }

Var operator*(const Var& a, double k) {
  NodePtr an = a.node();
  Mat out = a.value() * k;
  return make(std::move(out), a.height(), a.width(), {an},
              [an, k](const Node& o) { an->grad += o.grad * k; });
}
Var operator*(double k, const Var& a) { return a * k; }
Var operator/(const Var& a, double k) { return a * (1.0 / k); }

Var square(const Var& x) {
  return unary(
      x, [](double v) { return v * v; }, [](const Mat& v, const Mat&) -> Mat { return 2.0 * v; });
}

Var sqrt(const Var& x) {
  return unary(
      x, [](double v) { return std::sqrt(v); },
      [](const Mat&, const Mat& y) -> Mat { return (0.5 / y.array()).matrix(); });
}

Var exp(const Var& x) {
  return unary(
      x, [](double v) { return std::exp(v); }, [](const Mat&, const Mat& y) -> Mat { return y; });
}

Var log(const Var& x) {
  return unary(
      x, [](double v) { return std::log(v); },
      [](const Mat& v, const Mat&) -> Mat { return v.cwiseInverse(); });
}

Var abs(const Var& x) {
  return unary(
      x, [](double v) { return std::abs(v); },
      [](const Mat& v, const Mat&) -> Mat {
        return v.unaryExpr([](double t) { return t > 0 ? 1.0 : (t < 0 ? -1.0 : 0.0); });
      });
}

Var relu(const Var& x) {
  return unary(
      x, [](double v) { return v < 0 ? 0.0 : v; },  // NaN passes through
      [](const Mat& v, const Mat&) -> Mat {
        return v.unaryExpr([](double t) { return t > 0 ? 1.0 : 0.0; });
      });
}

Var leaky_relu(const Var& x, double slope) {
  return unary(
      x, [slope](double v) { return v < 0 ? slope * v : v; },
      [slope](const Mat& v, const Mat&) -> Mat {
        return v.unaryExpr([slope](double t) { return t > 0 ? 1.0 : slope; });
      });
}

Var huber(const Var& x, double delta) {
  return unary(
      x,
      [delta](double v) {
        const double a = std::abs(v);
        return a <= delta ? 0.5 * v * v : delta * (a - 0.5 * delta);
      },
      [delta](const Mat& v, const Mat&) -> Mat {
        return v.unaryExpr([delta](double t) { return std::clamp(t, -delta, delta); });
      });
}

Var clamp(const Var& x, double lo, double hi) {
  return unary(
      x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](const Mat& v, const Mat&) -> Mat {
        return v.unaryExpr([lo, hi](double t) { return (t > lo && t < hi) ? 1.0 : 0.0; });
      });
}

Var pow(const Var& x, const Var& exponent) {
  if (exponent.rows() != 1 || exponent.cols() != 1)
    throw std::invalid_argument("pow exponent must be 1x1");
  const double g = exponent.item();
  Mat out = x.value().unaryExpr([g](double v) { return std::pow(v, g); });
  NodePtr xn = x.node(), en = exponent.node();
  Mat y = out;
  return make(std::move(out), x.height(), x.width(), {xn, en},
              [xn, en, g, y = std::move(y)](const Node& o) {
                constexpr double tiny = 1e-12;
                if (xn->requires_grad) {
                  xn->grad.array() +=
                      o.grad.array() *
                      xn->value.array().max(tiny).pow(g - 1.0) * g;
                }
                if (en->requires_grad) {
                  Mat lnx = xn->value.unaryExpr([](double v) { return v > 0 ? std::log(v) : 0.0; });
                  en->grad(0, 0) += (o.grad.array() * y.array() * lnx.array()).sum();
                }
              });
}

Var sum(const Var& x) {
  NodePtr xn = x.node();
  return make_flat(Mat::Constant(1, 1, x.value().sum()), {xn}, [xn](const Node& o) {
    xn->grad.array() += o.grad(0, 0);
  });
}

Var mean(const Var& x) {
  return sum(x) * (1.0 / static_cast<double>(x.value().size()));
}

Var row_sum(const Var& x) {
  NodePtr xn = x.node();
  Mat out = x.value().rowwise().sum();
  return make_flat(std::move(out), {xn}, [xn](const Node& o) {
    xn->grad.colwise() += o.grad.col(0);
  });
}

Var col_sum(const Var& x) {
  NodePtr xn = x.node();
  Mat out = x.value().colwise().sum();
  return make(std::move(out), x.height(), x.width(), {xn}, [xn](const Node& o) {
    xn->grad.rowwise() += o.grad.row(0);
  });
}

Var row_mean(const Var& x) { return row_sum(x) * (1.0 / static_cast<double>(x.cols())); }

namespace {

// Row-wise or column-wise extremum; gradient routes to the first arg-extremum.
Var extremum(const Var& x, bool rowwise, bool take_max) {
  const Mat& v = x.value();
  const Index n = rowwise ? v.rows() : v.cols();
  Mat out(rowwise ? n : 1, rowwise ? 1 : n);
  std::vector<Index> arg(static_cast<size_t>(n));
  for (Index i = 0; i < n; ++i) {
    Index best;
    double val = rowwise ? (take_max ? v.row(i).maxCoeff(&best) : v.row(i).minCoeff(&best))
                         : (take_max ? v.col(i).maxCoeff(&best) : v.col(i).minCoeff(&best));
    out(rowwise ? i : 0, rowwise ? 0 : i) = val;
    arg[static_cast<size_t>(i)] = best;
  }
  NodePtr xn = x.node();
  auto fn = [xn, arg = std::move(arg), rowwise](const Node& o) {
    for (size_t i = 0; i < arg.size(); ++i) {
      const auto ii = static_cast<Index>(i);
      if (rowwise)
        xn->grad(ii, arg[i]) += o.grad(ii, 0);
      else
        xn->grad(arg[i], ii) += o.grad(0, ii);
    }
  };
  if (rowwise) return make_flat(std::move(out), {xn}, std::move(fn));
  return make(std::move(out), x.height(), x.width(), {xn}, std::move(fn));
}

}  // namespace

Var row_min(const Var& x) { return extremum(x, true, false); }
Var row_max(const Var& x) { return extremum(x, true, true); }
Var col_max(const Var& x) { return extremum(x, false, true); }

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows())
    throw std::invalid_argument("matmul shape mismatch " + shape_str(a.value()) + " * " +
                                shape_str(b.value()));
  Mat out = a.value() * b.value();
  NodePtr an = a.node(), bn = b.node();
  const int h = b.height(), w = b.width();
  return make(std::move(out), h, w, {an, bn}, [an, bn](const Node& o) {
    if (an->requires_grad) an->grad.noalias() += o.grad * bn->value.transpose();
    if (bn->requires_grad) bn->grad.noalias() += an->value.transpose() * o.grad;
  });
}

Var transpose(const Var& x) {
  NodePtr xn = x.node();
  Mat out = x.value().transpose();
  return make_flat(std::move(out), {xn}, [xn](const Node& o) { xn->grad += o.grad.transpose(); });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows of nothing");
  const Index cols = parts.front().cols();
  Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("concat_rows column mismatch");
    rows += p.rows();
  }
  Mat out(rows, cols);
  std::vector<NodePtr> nodes;
  Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
    nodes.push_back(p.node());
  }
  return make(std::move(out), parts.front().height(), parts.front().width(), nodes,
              [nodes](const Node& o) {
                Index at = 0;
                for (const auto& n : nodes) {
                  if (n->requires_grad) n->grad += o.grad.middleRows(at, n->value.rows());
                  at += n->value.rows();
                }
              });
}

Var slice_rows(const Var& x, Index start, Index count) {
  if (start < 0 || start + count > x.rows()) throw std::out_of_range("slice_rows out of range");
  NodePtr xn = x.node();
  Mat out = x.value().middleRows(start, count);
  return make(std::move(out), x.height(), x.width(), {xn}, [xn, start, count](const Node& o) {
    xn->grad.middleRows(start, count) += o.grad;
  });
}

Var with_spatial(const Var& x, int height, int width) {
  if (static_cast<Index>(height) * width != x.cols())
    throw std::invalid_argument("with_spatial: layout does not match column count");
  NodePtr xn = x.node();
  return make(x.value(), height, width, {xn}, [xn](const Node& o) { xn->grad += o.grad; });
}

Var separable(const Var& x, const SpMat& ry, const SpMat& rx) {
  check_spatial(x, "separable");
  const int h = x.height(), w = x.width();
  if (ry.cols() != h || rx.cols() != w)
    throw std::invalid_argument("separable: operator does not match image size");
  const int oh = static_cast<int>(ry.rows()), ow = static_cast<int>(rx.rows());
  using RowImg = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Mat out(x.rows(), static_cast<Index>(oh) * ow);
  for (Index c = 0; c < x.rows(); ++c) {
    Eigen::Map<const RowImg> src(x.value().row(c).data(), h, w);
    Eigen::Map<RowImg> dst(out.row(c).data(), oh, ow);
    RowImg tmp = ry * src;
    dst = (rx * tmp.transpose()).transpose();
  }
  NodePtr xn = x.node();
  return make(std::move(out), oh, ow, {xn}, [xn, ry, rx, h, w, oh, ow](const Node& o) {
    const SpMat ryt = ry.transpose();
    for (Index c = 0; c < xn->value.rows(); ++c) {
      Eigen::Map<const RowImg> g(o.grad.row(c).data(), oh, ow);
      Eigen::Map<RowImg> dst(xn->grad.row(c).data(), h, w);
      RowImg tmp = ryt * g;
      dst += (rx.transpose() * tmp.transpose()).transpose();
    }
  });
}

namespace {

struct ConvGeometry {
  int channels, height, width, kernel, stride, padding, out_h, out_w;
};

ConvGeometry geometry(const Var& x, int kernel, int stride, int padding) {
  check_spatial(x, "conv");
  ConvGeometry g{static_cast<int>(x.rows()), x.height(), x.width(), kernel, stride, padding, 0, 0};
  g.out_h = (g.height + 2 * padding - kernel) / stride + 1;
  g.out_w = (g.width + 2 * padding - kernel) / stride + 1;
  if (g.out_h < 1 || g.out_w < 1) throw std::invalid_argument("conv: input smaller than kernel");
  return g;
}

Mat im2col(const Mat& x, const ConvGeometry& g) {
  const int k2 = g.kernel * g.kernel;
  Mat cols = Mat::Zero(static_cast<Index>(g.channels) * k2, static_cast<Index>(g.out_h) * g.out_w);
  for (int c = 0; c < g.channels; ++c) {
    const double* src = x.row(c).data();
    for (int ky = 0; ky < g.kernel; ++ky) {
      for (int kx = 0; kx < g.kernel; ++kx) {
        double* dst = cols.row(static_cast<Index>(c) * k2 + ky * g.kernel + kx).data();
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.padding + ky;
          if (iy < 0 || iy >= g.height) continue;
          const double* srow = src + static_cast<Index>(iy) * g.width;
          double* drow = dst + static_cast<Index>(oy) * g.out_w;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * g.stride - g.padding + kx;
            if (ix >= 0 && ix < g.width) drow[ox] = srow[ix];
          }
        }
      }
    }
  }
  return cols;
}

void col2im_add(const Mat& cols, const ConvGeometry& g, Mat& x) {
  const int k2 = g.kernel * g.kernel;
  for (int c = 0; c < g.channels; ++c) {
    double* dst = x.row(c).data();
    for (int ky = 0; ky < g.kernel; ++ky) {
      for (int kx = 0; kx < g.kernel; ++kx) {
        const double* src = cols.row(static_cast<Index>(c) * k2 + ky * g.kernel + kx).data();
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.padding + ky;
          if (iy < 0 || iy >= g.height) continue;
          double* drow = dst + static_cast<Index>(iy) * g.width;
          const double* srow = src + static_cast<Index>(oy) * g.out_w;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * g.stride - g.padding + kx;
            if (ix >= 0 && ix < g.width) drow[ix] += srow[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& weight, int kernel, int stride, int padding) {
  const ConvGeometry g = geometry(x, kernel, stride, padding);
  if (weight.cols() != static_cast<Index>(g.channels) * kernel * kernel)
    throw std::invalid_argument("conv2d: weight " + shape_str(weight.value()) +
                                " does not match input channels " + std::to_string(g.channels));
  Mat cols = im2col(x.value(), g);
  Mat out = weight.value() * cols;
  NodePtr xn = x.node(), wn = weight.node();
  // Unfolded patches are only needed when the weights receive gradients.
  Mat saved = wn->requires_grad ? std::move(cols) : Mat();
  return make(std::move(out), g.out_h, g.out_w, {xn, wn},
              [xn, wn, g, saved = std::move(saved)](const Node& o) {
                if (wn->requires_grad) wn->grad.noalias() += o.grad * saved.transpose();
                if (xn->requires_grad) {
                  Mat dcols = wn->value.transpose() * o.grad;
                  col2im_add(dcols, g, xn->grad);
                }
              });
}

Var max_pool(const Var& x, int kernel, int stride, int padding) {
  const ConvGeometry g = geometry(x, kernel, stride, padding);
  const Index n_out = static_cast<Index>(g.out_h) * g.out_w;
  Mat out(g.channels, n_out);
  std::vector<Index> arg(static_cast<size_t>(g.channels * n_out));
  for (int c = 0; c < g.channels; ++c) {
    const double* src = x.value().row(c).data();
    for (int oy = 0; oy < g.out_h; ++oy) {
      for (int ox = 0; ox < g.out_w; ++ox) {
        double best = -std::numeric_limits<double>::infinity();
        Index best_i = -1;
        for (int ky = 0; ky < g.kernel; ++ky) {
          const int iy = oy * g.stride - g.padding + ky;
          if (iy < 0 || iy >= g.height) continue;
          for (int kx = 0; kx < g.kernel; ++kx) {
            const int ix = ox * g.stride - g.padding + kx;
            if (ix < 0 || ix >= g.width) continue;
            const Index i = static_cast<Index>(iy) * g.width + ix;
            // First NaN wins and sticks.
            if (best_i < 0 || src[i] > best || (std::isnan(src[i]) && !std::isnan(best))) {
              best = src[i];
              best_i = i;
            }
          }
        }
        const Index o = static_cast<Index>(oy) * g.out_w + ox;
        out(c, o) = best;
        arg[static_cast<size_t>(c * n_out + o)] = best_i;
      }
    }
  }
  NodePtr xn = x.node();
  return make(std::move(out), g.out_h, g.out_w, {xn},
              [xn, arg = std::move(arg), n_out](const Node& o) {
                for (Index c = 0; c < o.grad.rows(); ++c)
                  for (Index i = 0; i < n_out; ++i)
                    xn->grad(c, arg[static_cast<size_t>(c * n_out + i)]) += o.grad(c, i);
              });
}

}  // namespace rephoto::ad
