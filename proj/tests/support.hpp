// Shared helpers: central finite differences and small fixtures.
#ifndef REPHOTO_TESTS_SUPPORT_HPP_
#define REPHOTO_TESTS_SUPPORT_HPP_

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "rephoto/autodiff.hpp"

namespace rephoto::testing {

struct GradCheck {
  int coordinates = 0;
  double max_rel_error = 0.0;
};

// |a - b| / max(|a|, |b|, floor). The floor keeps coordinates whose gradient
// is numerically zero from reporting noise as relative error.
inline double rel_error(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Compares `grad` against central differences of `f` at `count` random
// coordinates of `x`.
inline GradCheck check_gradient(const std::function<double(const ad::Mat&)>& f, const ad::Mat& x,
                                const ad::Mat& grad, int count, uint64_t seed, double h = 1e-5,
                                double floor = 1e-8) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<ad::Index> pick(0, x.size() - 1);
  GradCheck out;
  for (int n = 0; n < count; ++n) {
    const ad::Index i = pick(rng);
    ad::Mat xp = x, xm = x;
    xp.data()[i] += h;
    xm.data()[i] -= h;
    const double fd = (f(xp) - f(xm)) / (2 * h);
    out.max_rel_error = std::max(out.max_rel_error, rel_error(grad.data()[i], fd, floor));
    ++out.coordinates;
  }
  return out;
}

inline ad::Mat uniform(ad::Index rows, ad::Index cols, uint64_t seed, double lo = 0.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  ad::Mat m(rows, cols);
  for (ad::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

}  // namespace rephoto::testing

#endif  // REPHOTO_TESTS_SUPPORT_HPP_
