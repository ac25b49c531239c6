#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "rephoto/autodiff.hpp"
#include "rephoto/imagecore.hpp"
#include "support.hpp"

using namespace rephoto;
using rephoto::testing::check_gradient;
using rephoto::testing::uniform;

namespace {

// Gradient of sum(w .* op(x)) against finite differences; the random weights
// make every output element matter.
void check_op(const std::function<ad::Var(const ad::Var&)>& op, const ad::Mat& x0, int h = 1,
              int w = -1, double tol = 1e-6) {
  const int width = w < 0 ? static_cast<int>(x0.cols()) : w;
  const ad::Var probe = op(ad::constant(x0, h, width));
  const ad::Mat weights = uniform(probe.rows(), probe.cols(), 99, -1.0, 1.0);
  auto f = [&](const ad::Mat& x) {
    return ad::sum(op(ad::constant(x, h, width)) * ad::constant(weights)).item();
  };
  const ad::Var x = ad::parameter(x0, h, width);
  ad::backward(ad::sum(op(x) * ad::constant(weights)));
  const auto r = check_gradient(f, x0, x.grad(), 20, 5);
  CHECK(r.max_rel_error < tol);
}

}  // namespace

TEST_CASE("elementwise ops match finite differences") {
  const ad::Mat x = uniform(3, 7, 1, 0.2, 1.5);
  check_op([](const ad::Var& v) { return ad::square(v); }, x);
  check_op([](const ad::Var& v) { return ad::sqrt(v); }, x);
  check_op([](const ad::Var& v) { return ad::exp(v); }, x);
  check_op([](const ad::Var& v) { return ad::log(v); }, x);
  check_op([](const ad::Var& v) { return ad::abs(v - 0.8); }, x);
  check_op([](const ad::Var& v) { return ad::relu(v - 0.8); }, x);
  check_op([](const ad::Var& v) { return ad::leaky_relu(v - 0.8, 0.2); }, x);
  check_op([](const ad::Var& v) { return ad::huber(3.0 * (v - 0.8), 1.0); }, x);
  check_op([](const ad::Var& v) { return ad::clamp(v, 0.5, 1.0); }, x);
  check_op([](const ad::Var& v) { return ad::pow(v, ad::scalar(2.3)); }, x);
  check_op([](const ad::Var& v) { return ad::scalar(1.0) / (v + 0.5) - v * 3.0; }, x);
}

TEST_CASE("broadcasting arithmetic") {
  const ad::Mat x = uniform(3, 5, 2, 0.5, 1.0);
  const ad::Var col = ad::constant(uniform(3, 1, 3, 0.5, 1.0));
  const ad::Var row = ad::constant(uniform(1, 5, 4, 0.5, 1.0));
  check_op([&](const ad::Var& v) { return v * col + row; }, x);
  check_op([&](const ad::Var& v) { return (v - col) / row; }, x);
  check_op([&](const ad::Var& v) { return col / v; }, x);
}

TEST_CASE("broadcast operand receives summed gradient") {
  const ad::Var col = ad::parameter(ad::Mat::Constant(2, 1, 1.0));
  ad::backward(ad::sum(ad::constant(ad::Mat::Ones(2, 4)) * col));
  CHECK(col.grad()(0, 0) == doctest::Approx(4.0));
  CHECK(col.grad()(1, 0) == doctest::Approx(4.0));
}

TEST_CASE("reductions and shape ops") {
  const ad::Mat x = uniform(4, 6, 5, -1.0, 1.0);
  check_op([](const ad::Var& v) { return ad::row_sum(v); }, x);
  check_op([](const ad::Var& v) { return ad::col_sum(v); }, x);
  check_op([](const ad::Var& v) { return ad::row_mean(v); }, x);
  check_op([](const ad::Var& v) { return ad::row_min(v); }, x);
  check_op([](const ad::Var& v) { return ad::row_max(v); }, x);
  check_op([](const ad::Var& v) { return ad::col_max(v); }, x);
  check_op([](const ad::Var& v) { return ad::mean(v) * ad::sum(v); }, x);
  check_op([](const ad::Var& v) { return ad::transpose(v); }, x);
  check_op([](const ad::Var& v) { return ad::slice_rows(v, 1, 2); }, x);
  check_op([](const ad::Var& v) { return ad::concat_rows({v, ad::slice_rows(v, 0, 1) * 2.0}); }, x);
  const ad::Var m = ad::constant(uniform(6, 3, 6, -1.0, 1.0));
  check_op([&](const ad::Var& v) { return ad::matmul(v, m); }, x);
}

TEST_CASE("spatial ops") {
  const int h = 6, w = 5;
  const ad::Mat x = uniform(2, h * w, 7, -1.0, 1.0);
  check_op([](const ad::Var& v) { return ad::separable(v, gaussian_operator(6, 1.0), resample_operator(5, 3)); },
           x, h, w);
  const ad::Var weight = ad::constant(uniform(3, 2 * 9, 8, -0.5, 0.5));
  check_op([&](const ad::Var& v) { return ad::conv2d(v, weight, 3, 1, 1); }, x, h, w);
  check_op([&](const ad::Var& v) { return ad::conv2d(v, weight, 3, 2, 1); }, x, h, w);
  check_op([](const ad::Var& v) { return ad::max_pool(v, 2, 2, 0); }, x, h, w);
  check_op([](const ad::Var& v) { return ad::max_pool(v, 3, 2, 1); }, x, h, w);
}

TEST_CASE("conv2d matches a direct loop") {
  const int h = 4, w = 5, k = 3;
  const ad::Mat x = uniform(2, h * w, 11, -1.0, 1.0);
  const ad::Mat wt = uniform(3, 2 * k * k, 12, -1.0, 1.0);
  const ad::Mat y = ad::conv2d(ad::constant(x, h, w), ad::constant(wt), k, 1, 1).value();
  for (int o = 0; o < 3; ++o)
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) {
        double acc = 0.0;
        for (int i = 0; i < 2; ++i)
          for (int dy = 0; dy < k; ++dy)
            for (int dx = 0; dx < k; ++dx) {
              const int yy = r + dy - 1, xx = c + dx - 1;
              if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
              acc += wt(o, (i * k + dy) * k + dx) * x(i, yy * w + xx);
            }
        CHECK(y(o, r * w + c) == doctest::Approx(acc).epsilon(1e-12));
      }
}

TEST_CASE("pow gradient with respect to the exponent") {
  const ad::Var base = ad::constant(uniform(1, 8, 13, 0.1, 1.0));
  auto f = [&](const ad::Mat& g) { return ad::sum(ad::pow(base, ad::constant(g))).item(); };
  const ad::Var g = ad::parameter(ad::Mat::Constant(1, 1, 1.7));
  ad::backward(ad::sum(ad::pow(base, g)));
  CHECK(check_gradient(f, g.value(), g.grad(), 1, 1).max_rel_error < 1e-7);
}

TEST_CASE("clamp blocks gradient outside the interval") {
  ad::Mat v(1, 3);
  v << -0.5, 0.5, 1.5;
  const ad::Var x = ad::parameter(v);
  ad::backward(ad::sum(ad::clamp(x, 0.0, 1.0)));
  CHECK(x.grad()(0, 0) == 0.0);
  CHECK(x.grad()(0, 1) == 1.0);
  CHECK(x.grad()(0, 2) == 0.0);
}

TEST_CASE("leaves can be reused across graphs") {
  const ad::Var x = ad::parameter(ad::Mat::Constant(1, 1, 2.0));
  ad::backward(ad::square(x));
  CHECK(x.grad()(0, 0) == doctest::Approx(4.0));
  ad::backward(x * 3.0);
  CHECK(x.grad()(0, 0) == doctest::Approx(3.0));
}

TEST_CASE("backward needs a scalar root") {
  const ad::Var x = ad::parameter(ad::Mat::Ones(2, 2));
  CHECK_THROWS(ad::backward(x));
}

TEST_CASE("detach stops gradients") {
  const ad::Var x = ad::parameter(ad::Mat::Constant(1, 1, 2.0));
  ad::backward(ad::square(x) + ad::detach(x) * 5.0);
  CHECK(x.grad()(0, 0) == doctest::Approx(4.0));
}

TEST_CASE("NaN propagates through rectifiers and pooling") {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  ad::Mat v(1, 4);
  v << nan, -1.0, 2.0, nan;
  CHECK(std::isnan(ad::relu(ad::constant(v)).value()(0, 0)));
  CHECK(std::isnan(ad::leaky_relu(ad::constant(v), 0.2).value()(0, 3)));
  const ad::Var x = ad::parameter(v, 2, 2);
  const ad::Var p = ad::max_pool(x, 2, 2, 0);
  CHECK(std::isnan(p.value()(0, 0)));
  ad::Mat all_nan = ad::Mat::Constant(1, 4, nan);
  const ad::Var y = ad::parameter(all_nan, 2, 2);
  ad::backward(ad::sum(ad::max_pool(y, 2, 2, 0)));
  CHECK(y.grad()(0, 0) == 1.0);
}
