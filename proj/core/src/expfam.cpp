#include "snep/expfam.hpp"

#include <bit>
#include <cmath>
#include <numbers>

namespace snep {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;  // log(2π)
constexpr double kPivotTolerance = 1e-12;
constexpr double kSymmetryTolerance = 1e-12;

Matrix symmetrized(const Matrix& a) { return 0.5 * (a + a.transpose()); }

bool nearly_symmetric(const Matrix& a) {
  const double scale = a.cwiseAbs().maxCoeff();
  return (a - a.transpose()).cwiseAbs().maxCoeff() <= kSymmetryTolerance * scale;
}

// Cholesky of a symmetric matrix that must be positive definite; pivots are
// checked relative to the largest diagonal entry.
std::optional<Eigen::LLT<Matrix>> spd_factor(const Matrix& a) {
  if (!a.allFinite() || !nearly_symmetric(a)) return std::nullopt;
  Eigen::LLT<Matrix> llt(symmetrized(a));
  if (llt.info() != Eigen::Success) return std::nullopt;
  const double scale = a.diagonal().cwiseAbs().maxCoeff();
  const Matrix& l = llt.matrixLLT();
  for (Index j = 0; j < a.rows(); ++j) {
    const double pivot = l(j, j) * l(j, j);
    if (!(pivot > kPivotTolerance * scale)) return std::nullopt;
  }
  return llt;
}

double log_det(const Eigen::LLT<Matrix>& llt) {
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

Eigen::LLT<Matrix> require_precision_factor(const NaturalParams& theta) {
  auto llt = spd_factor(-theta.second());
  if (!llt) throw Error(Errc::invalid_natural_domain, "-Θ₂ is not positive definite");
  return *std::move(llt);
}

void require_valid_diag(const NaturalParams& theta) {
  if (!is_valid(theta)) throw Error(Errc::invalid_natural_domain, "θ₂ must be negative");
}

template <class Coords>
bool bitwise_equal_impl(const Coords& a, const Coords& b) {
  if (!a.same_shape(b)) return false;
  auto same = [](const auto& x, const auto& y) {
    for (Index i = 0; i < x.size(); ++i) {
      if (std::bit_cast<std::uint64_t>(x.data()[i]) != std::bit_cast<std::uint64_t>(y.data()[i])) {
        return false;
      }
    }
    return true;
  };
  return same(a.first(), b.first()) && same(a.second(), b.second());
}

}  // namespace

const char* to_string(Family family) { return family == Family::diag ? "diag" : "full"; }

bool is_valid(const NaturalParams& theta) {
  if (!theta.first().allFinite()) return false;
  if (theta.family() == Family::diag) {
    return theta.second().allFinite() && (theta.second().array() < 0.0).all();
  }
  return spd_factor(-theta.second()).has_value();
}

bool is_valid(const MeanParams& mu) {
  if (!mu.first().allFinite() || !mu.second().allFinite()) return false;
  const Vector& m = mu.first();
  if (mu.family() == Family::diag) {
    return ((2.0 * mu.second().col(0).array() - m.array().square()) > 0.0).all();
  }
  return spd_factor(2.0 * mu.second() - m * m.transpose()).has_value();
}

MeanParams to_mean(const NaturalParams& theta) {
  if (theta.family() == Family::diag) {
    require_valid_diag(theta);
    const auto t1 = theta.first().array();
    const auto t2 = theta.second().col(0).array();
    Vector first = -t1 / t2;
    Vector second = 0.5 * (t1.square() / t2.square() - t2.inverse());
    return MeanParams::diag(std::move(first), std::move(second));
  }
  const auto llt = require_precision_factor(theta);
  const Index d = theta.dim();
  const Matrix cov = symmetrized(llt.solve(Matrix::Identity(d, d)));
  Vector m = llt.solve(theta.first());
  Matrix second = 0.5 * (cov + m * m.transpose());
  return MeanParams(Family::full, std::move(m), symmetrized(second));
}

NaturalParams to_natural(const MeanParams& mu) {
  const Vector& m = mu.first();
  if (mu.family() == Family::diag) {
    if (!is_valid(mu)) throw Error(Errc::invalid_mean_domain, "2μ₂ - μ₁² must be positive");
    const Vector var = 2.0 * mu.second().col(0).array() - m.array().square();
    Vector first = m.array() / var.array();
    Vector second = -var.array().inverse();
    return NaturalParams::diag(std::move(first), std::move(second));
  }
  auto llt = spd_factor(2.0 * mu.second() - m * m.transpose());
  if (!llt) throw Error(Errc::invalid_mean_domain, "2M₂ - μμᵀ is not positive definite");
  const Index d = mu.dim();
  const Matrix precision = symmetrized(llt->solve(Matrix::Identity(d, d)));
  Vector first = llt->solve(m);
  return NaturalParams(Family::full, std::move(first), -precision);
}

Gaussian moments(const NaturalParams& theta) {
  if (theta.family() == Family::diag) {
    require_valid_diag(theta);
    const auto t2 = theta.second().col(0).array();
    Vector mean = -theta.first().array() / t2;
    Matrix var = -t2.inverse().matrix();
    return {Family::diag, std::move(mean), std::move(var)};
  }
  const auto llt = require_precision_factor(theta);
  const Index d = theta.dim();
  return {Family::full, llt.solve(theta.first()),
          symmetrized(llt.solve(Matrix::Identity(d, d)))};
}

NaturalParams natural_from_moments(const Gaussian& g) {
  if (g.family == Family::diag) {
    if (!((g.cov.array() > 0.0).all())) {
      throw Error(Errc::invalid_mean_domain, "variances must be positive");
    }
    Vector first = g.mean.array() / g.cov.col(0).array();
    Vector second = -g.cov.col(0).array().inverse();
    return NaturalParams::diag(std::move(first), std::move(second));
  }
  auto llt = spd_factor(g.cov);
  if (!llt) throw Error(Errc::invalid_mean_domain, "covariance is not positive definite");
  const Index d = g.mean.size();
  const Matrix precision = symmetrized(llt->solve(Matrix::Identity(d, d)));
  return NaturalParams(Family::full, llt->solve(g.mean), -precision);
}

double log_partition(const NaturalParams& theta) {
  if (theta.family() == Family::diag) {
    require_valid_diag(theta);
    const auto t1 = theta.first().array();
    const auto t2 = theta.second().col(0).array();
    // ½(u²σ⁻² + log 2πσ²) with u = -θ₁/θ₂, σ² = -1/θ₂.
    return 0.5 * ((-t1.square() / t2) + (kLog2Pi - (-t2).log())).sum();
  }
  const auto llt = require_precision_factor(theta);
  const Vector m = llt.solve(theta.first());
  const double d = static_cast<double>(theta.dim());
  return 0.5 * theta.first().dot(m) + 0.5 * (d * kLog2Pi - log_det(llt));
}

double neg_entropy(const MeanParams& mu) {
  const Vector& m = mu.first();
  if (mu.family() == Family::diag) {
    if (!is_valid(mu)) throw Error(Errc::invalid_mean_domain, "2μ₂ - μ₁² must be positive");
    const auto var = 2.0 * mu.second().col(0).array() - m.array().square();
    return (-0.5 * (1.0 + kLog2Pi + var.log())).sum();
  }
  auto llt = spd_factor(2.0 * mu.second() - m * m.transpose());
  if (!llt) throw Error(Errc::invalid_mean_domain, "2M₂ - μμᵀ is not positive definite");
  const double d = static_cast<double>(mu.dim());
  return -0.5 * (d * (1.0 + kLog2Pi) + log_det(*llt));
}

double pairing(const NaturalParams& theta, const MeanParams& mu) {
  if (theta.family() != mu.family() || theta.dim() != mu.dim()) {
    throw Error(Errc::dimension_mismatch, "pairing of differently shaped parameters");
  }
  return theta.first().dot(mu.first()) + theta.second().cwiseProduct(mu.second()).sum();
}

double kl(const NaturalParams& p, const NaturalParams& q) {
  p.require_same_shape(q);
  const MeanParams mu_p = to_mean(p);
  return pairing(p - q, mu_p) - log_partition(p) + log_partition(q);
}

double carrier_log_density(const NaturalParams& theta, const Vector& x) {
  if (x.size() != theta.dim()) throw Error(Errc::dimension_mismatch, "x has wrong length");
  if (theta.family() == Family::diag) {
    return theta.first().dot(x) + 0.5 * theta.second().col(0).dot(x.cwiseProduct(x));
  }
  return theta.first().dot(x) + 0.5 * x.dot(theta.second() * x);
}

Vector carrier_gradient(const NaturalParams& theta, const Vector& x) {
  if (x.size() != theta.dim()) throw Error(Errc::dimension_mismatch, "x has wrong length");
  if (theta.family() == Family::diag) {
    return theta.first() + theta.second().col(0).cwiseProduct(x);
  }
  return theta.first() + theta.second() * x;
}

NaturalParams validate_and_clamp(const NaturalParams& lambda, double min_variance) {
  if (!(min_variance > 0.0)) {
    throw Error(Errc::validation_error, "min_variance must be positive");
  }
  const double cap = 1.0 / min_variance;  // largest allowed precision
  NaturalParams out = lambda;
  if (lambda.family() == Family::diag) {
    for (Index j = 0; j < lambda.dim(); ++j) {
      const double t2 = lambda.second()(j, 0);
      if (t2 < -cap) {
        const double mean = -lambda.first()(j) / t2;
        out.first()(j) = mean * cap;
        out.second()(j, 0) = -cap;
      }
    }
    return out;
  }
  const Matrix precision = symmetrized(-lambda.second());
  Eigen::SelfAdjointEigenSolver<Matrix> eig(precision);
  if (eig.info() != Eigen::Success) return out;
  Vector p = eig.eigenvalues();
  const Matrix& v = eig.eigenvectors();
  const double threshold = cap * (1.0 + 1e-10);
  if (!((p.array() > threshold).any())) return out;
  Vector t = v.transpose() * lambda.first();
  for (Index k = 0; k < p.size(); ++k) {
    if (p(k) > threshold) {
      t(k) *= cap / p(k);
      p(k) = cap;
    }
  }
  out.first() = v * t;
  out.second() = -symmetrized(v * p.asDiagonal() * v.transpose());
  return out;
}

Vector sample_exact(const NaturalParams& theta, SeedStream& stream) {
  const Index d = theta.dim();
  Vector z(d);
  if (theta.family() == Family::diag) {
    require_valid_diag(theta);
    const auto t2 = theta.second().col(0).array();
    const Vector mean = -theta.first().array() / t2;
    const Vector sd = (-t2).rsqrt();
    for (Index j = 0; j < d; ++j) z(j) = stream.normal();
    return mean + sd.cwiseProduct(z);
  }
  const auto llt = require_precision_factor(theta);
  const Vector mean = llt.solve(theta.first());
  for (Index j = 0; j < d; ++j) z(j) = stream.normal();
  // P = L Lᵀ, so L⁻ᵀ z has covariance P⁻¹.
  return mean + llt.matrixU().solve(z);
}

SufficientStats suff_stats(const Vector& x, Family family) {
  if (family == Family::diag) {
    return SufficientStats::diag(x, 0.5 * x.cwiseProduct(x));
  }
  return SufficientStats(Family::full, x, 0.5 * x * x.transpose());
}

SufficientStats suff_stats(const Vector& x, Family family, Index dim) {
  if (x.size() != dim) throw Error(Errc::dimension_mismatch, "x has wrong length");
  return suff_stats(x, family);
}

MeanParams project(const MeanParams& mu, Family family) {
  if (mu.family() == family) return mu;
  if (family == Family::full) {
    throw Error(Errc::dimension_mismatch, "cannot lift a diagonal block to full");
  }
  return MeanParams::diag(mu.first(), mu.second().diagonal());
}

std::size_t flat_size(Family family, Index dim) {
  const auto d = static_cast<std::size_t>(dim);
  return family == Family::diag ? 2 * d : d + d * (d + 1) / 2;
}

std::vector<double> flatten(const NaturalParams& theta) {
  const Index d = theta.dim();
  std::vector<double> out;
  out.reserve(flat_size(theta.family(), d));
  for (Index j = 0; j < d; ++j) out.push_back(theta.first()(j));
  if (theta.family() == Family::diag) {
    for (Index j = 0; j < d; ++j) out.push_back(theta.second()(j, 0));
  } else {
    for (Index r = 0; r < d; ++r) {
      for (Index c = 0; c <= r; ++c) out.push_back(theta.second()(r, c));
    }
  }
  return out;
}

NaturalParams unflatten(Family family, Index dim, std::span<const double> values) {
  if (values.size() != flat_size(family, dim)) {
    throw Error(Errc::dimension_mismatch, "flat parameter vector has wrong length");
  }
  NaturalParams out = NaturalParams::zeros(family, dim);
  std::size_t k = 0;
  for (Index j = 0; j < dim; ++j) out.first()(j) = values[k++];
  if (family == Family::diag) {
    for (Index j = 0; j < dim; ++j) out.second()(j, 0) = values[k++];
  } else {
    for (Index r = 0; r < dim; ++r) {
      for (Index c = 0; c <= r; ++c) {
        out.second()(r, c) = values[k];
        out.second()(c, r) = values[k];
        ++k;
      }
    }
  }
  return out;
}

bool bitwise_equal(const NaturalParams& a, const NaturalParams& b) { return bitwise_equal_impl(a, b); }
bool bitwise_equal(const MeanParams& a, const MeanParams& b) { return bitwise_equal_impl(a, b); }

}  // namespace snep
