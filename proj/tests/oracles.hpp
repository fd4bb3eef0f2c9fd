#pragma once

// Reference computations written independently of the library code paths:
// closed forms, dense LU instead of Cholesky, finite differences, and
// goodness-of-fit distributions.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/distributions/chi_squared.hpp>

#include "snep/expfam.hpp"

namespace oracle {

using snep::Family;
using snep::Index;
using snep::Matrix;
using snep::NaturalParams;
using snep::Vector;

// Scalar Gaussian with s(x) = [x, x²/2]: θ₁ = u/σ², θ₂ = −1/σ².
inline double log_partition_1d(double t1, double t2) {
  return -t1 * t1 / (2.0 * t2) + 0.5 * std::log(2.0 * std::numbers::pi / -t2);
}

inline double kl_1d(double u_p, double v_p, double u_q, double v_q) {
  return 0.5 * (v_p / v_q + (u_q - u_p) * (u_q - u_p) / v_q - 1.0 + std::log(v_q / v_p));
}

struct Moments {
  Vector mean;
  Matrix cov;
};

// Any family, via an LU inverse of the precision.
inline Moments lu_moments(const NaturalParams& theta) {
  Matrix precision = theta.family() == Family::diag
                         ? Matrix(Vector(-theta.second().col(0)).asDiagonal())
                         : Matrix(-theta.second());
  Matrix cov = precision.fullPivLu().inverse();
  Vector mean = cov * theta.first();
  return {mean, cov};
}

inline double log_partition(const NaturalParams& theta) {
  const Index d = theta.dim();
  Matrix precision = theta.family() == Family::diag
                         ? Matrix(Vector(-theta.second().col(0)).asDiagonal())
                         : Matrix(-theta.second());
  const auto lu = precision.fullPivLu();
  const Vector m = lu.solve(theta.first());
  return 0.5 * theta.first().dot(m) +
         0.5 * (static_cast<double>(d) * std::log(2.0 * std::numbers::pi) - std::log(lu.determinant()));
}

// Gaussian KL from moments.
inline double kl(const NaturalParams& p, const NaturalParams& q) {
  const Moments a = lu_moments(p);
  const Moments b = lu_moments(q);
  const Matrix qi = b.cov.fullPivLu().inverse();
  const Vector dm = b.mean - a.mean;
  const auto d = static_cast<double>(p.dim());
  return 0.5 * ((qi * a.cov).trace() + dm.dot(qi * dm) - d +
                std::log(b.cov.fullPivLu().determinant() / a.cov.fullPivLu().determinant()));
}

inline Vector central_difference(const std::function<double(const Vector&)>& f, const Vector& x,
                                 double h) {
  Vector g(x.size());
  for (Index j = 0; j < x.size(); ++j) {
    Vector a = x;
    Vector b = x;
    a(j) += h;
    b(j) -= h;
    g(j) = (f(a) - f(b)) / (2.0 * h);
  }
  return g;
}

inline double normal_cdf(double x, double mean, double var) {
  return 0.5 * std::erfc(-(x - mean) / std::sqrt(2.0 * var));
}

// Asymptotic Kolmogorov survival function with the Stephens correction.
inline double ks_p_value(double d_stat, std::size_t n) {
  const double rn = std::sqrt(static_cast<double>(n));
  const double lambda = (rn + 0.12 + 0.11 / rn) * d_stat;
  if (lambda < 1e-3) return 1.0;
  double sum = 0.0;
  for (int k = 1; k <= 200; ++k) {
    const double term = std::exp(-2.0 * k * k * lambda * lambda);
    sum += (k % 2 == 1 ? 2.0 : -2.0) * term;
    if (term < 1e-16) break;
  }
  return std::clamp(sum, 0.0, 1.0);
}

inline double ks_statistic(std::vector<double> xs, const std::function<double(double)>& cdf) {
  std::sort(xs.begin(), xs.end());
  const auto n = static_cast<double>(xs.size());
  double d = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double f = cdf(xs[i]);
    d = std::max({d, f - static_cast<double>(i) / n, static_cast<double>(i + 1) / n - f});
  }
  return d;
}

inline double chi_squared_sf(double stat, double dof) {
  return boost::math::cdf(boost::math::complement(boost::math::chi_squared(dof), stat));
}

inline double rel_diff(double a, double b) {
  const double scale = std::max(std::abs(a), std::abs(b));
  return scale == 0.0 ? 0.0 : std::abs(a - b) / scale;
}

}  // namespace oracle
