#ifndef REPHOTO_OPTIM_HPP_
#define REPHOTO_OPTIM_HPP_

#include <cmath>

#include <Eigen/Core>

namespace rephoto {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction; state shaped like the parameter it updates.
template <typename Matrix>
class Adam {
 public:
  Adam(const AdamOptions& opts, Eigen::Index rows, Eigen::Index cols)
      : opts_(opts), m_(Matrix::Zero(rows, cols)), v_(Matrix::Zero(rows, cols)) {}

  template <typename Derived>
  void step(Matrix& param, const Eigen::MatrixBase<Derived>& grad) {
    ++t_;
    m_ = opts_.beta1 * m_ + (1.0 - opts_.beta1) * grad;
    v_ = opts_.beta2 * v_ + (1.0 - opts_.beta2) * grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(opts_.beta1, t_);
    const double c2 = 1.0 - std::pow(opts_.beta2, t_);
    param.array() -= opts_.lr * (m_.array() / c1) / ((v_.array() / c2).sqrt() + opts_.eps);
  }

  int steps() const { return t_; }

 private:
  AdamOptions opts_;
  Matrix m_, v_;
  int t_ = 0;
};

struct RAdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // While the variance estimate is untrustworthy (rho_t <= 5) either take a
  // bias-corrected momentum step or skip the update. Momentum steps are not
  // normalized, so with a heavily weighted loss term they can be huge.
  bool degenerate_to_sgd = false;
};

/// Rectified Adam: adaptive steps are scaled by the variance rectification
/// term r_t once the approximated SMA length rho_t exceeds 5.
template <typename Matrix>
class RAdam {
 public:
  RAdam(const RAdamOptions& opts, Eigen::Index rows, Eigen::Index cols)
      : opts_(opts), m_(Matrix::Zero(rows, cols)), v_(Matrix::Zero(rows, cols)) {}

  template <typename Derived>
  void step(Matrix& param, const Eigen::MatrixBase<Derived>& grad) {
    ++t_;
    m_ = opts_.beta1 * m_ + (1.0 - opts_.beta1) * grad;
    v_ = opts_.beta2 * v_ + (1.0 - opts_.beta2) * grad.cwiseAbs2();
    const double b2t = std::pow(opts_.beta2, t_);
    const double c1 = 1.0 - std::pow(opts_.beta1, t_);
    const double rho_inf = 2.0 / (1.0 - opts_.beta2) - 1.0;
    const double rho_t = rho_inf - 2.0 * t_ * b2t / (1.0 - b2t);
    if (rho_t > 5.0) {
      const double r = std::sqrt((rho_t - 4.0) * (rho_t - 2.0) * rho_inf /
                                 ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t));
      const double c2 = 1.0 - b2t;
      param.array() -= opts_.lr * r * (m_.array() / c1) / ((v_.array() / c2).sqrt() + opts_.eps);
    } else if (opts_.degenerate_to_sgd) {
      param.array() -= opts_.lr * m_.array() / c1;
    }
  }

  static double rectification(int t, double beta2 = 0.999) {
    const double b2t = std::pow(beta2, t);
    const double rho_inf = 2.0 / (1.0 - beta2) - 1.0;
    const double rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t);
    if (rho_t <= 5.0) return 0.0;
    return std::sqrt((rho_t - 4.0) * (rho_t - 2.0) * rho_inf /
                     ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t));
  }

  int steps() const { return t_; }

 private:
  RAdamOptions opts_;
  Matrix m_, v_;
  int t_ = 0;
};

}  // namespace rephoto

#endif  // REPHOTO_OPTIM_HPP_
