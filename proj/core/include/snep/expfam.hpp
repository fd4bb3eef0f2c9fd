#pragma once

// Gaussian exponential families in natural and mean coordinates.
//
// Sufficient statistics are s(x) = [x, x∘x / 2] for the diagonal family and
// s(x) = [x, x xᵀ / 2] for the full-covariance family, so that
//   natural: first = Σ⁻¹m,  second = -Σ⁻¹   (diag: -1/σ²)
//   mean:    first = m,     second = (Σ + m mᵀ) / 2.
// Both coordinate systems share one storage layout: a length-D vector plus a
// second-order block that is D×1 for the diagonal family and a symmetric D×D
// matrix for the full family.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "snep/error.hpp"
#include "snep/random.hpp"

namespace snep {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

enum class Family : std::uint8_t { diag = 0, full = 1 };

const char* to_string(Family family);

namespace detail {

template <class Tag>
class GaussianCoords {
 public:
  GaussianCoords() = default;

  GaussianCoords(Family family, Vector first, Matrix second)
      : family_(family), first_(std::move(first)), second_(std::move(second)) {
    const Index d = first_.size();
    const bool ok = family_ == Family::diag ? (second_.rows() == d && second_.cols() == 1)
                                            : (second_.rows() == d && second_.cols() == d);
    if (!ok) throw Error(Errc::dimension_mismatch, "second-order block does not match dim");
  }

  /// Diagonal-family convenience constructor.
  static GaussianCoords diag(Vector first, Vector second) {
    Matrix block = std::move(second);
    return GaussianCoords(Family::diag, std::move(first), std::move(block));
  }

  static GaussianCoords zeros(Family family, Index dim) {
    return GaussianCoords(family, Vector::Zero(dim),
                          family == Family::diag ? Matrix::Zero(dim, 1) : Matrix::Zero(dim, dim));
  }

  Family family() const { return family_; }
  Index dim() const { return first_.size(); }

  const Vector& first() const { return first_; }
  Vector& first() { return first_; }
  const Matrix& second() const { return second_; }
  Matrix& second() { return second_; }

  bool same_shape(const GaussianCoords& other) const {
    return family_ == other.family_ && dim() == other.dim();
  }

  GaussianCoords& operator+=(const GaussianCoords& rhs) {
    require_same_shape(rhs);
    first_ += rhs.first_;
    second_ += rhs.second_;
    return *this;
  }
  GaussianCoords& operator-=(const GaussianCoords& rhs) {
    require_same_shape(rhs);
    first_ -= rhs.first_;
    second_ -= rhs.second_;
    return *this;
  }
  GaussianCoords& operator*=(double scale) {
    first_ *= scale;
    second_ *= scale;
    return *this;
  }

  friend GaussianCoords operator+(GaussianCoords lhs, const GaussianCoords& rhs) { return lhs += rhs; }
  friend GaussianCoords operator-(GaussianCoords lhs, const GaussianCoords& rhs) { return lhs -= rhs; }
  friend GaussianCoords operator*(double scale, GaussianCoords rhs) { return rhs *= scale; }

  /// Value equality (== on doubles, so +0 == -0).
  friend bool operator==(const GaussianCoords& a, const GaussianCoords& b) {
    return a.family_ == b.family_ && a.first_.size() == b.first_.size() && a.first_ == b.first_ &&
           a.second_ == b.second_;
  }

  void require_same_shape(const GaussianCoords& other) const {
    if (!same_shape(other)) throw Error(Errc::dimension_mismatch, "parameter shapes differ");
  }

 private:
  Family family_ = Family::diag;
  Vector first_;
  Matrix second_;
};

}  // namespace detail

struct NaturalTag {};
struct MeanTag {};

/// θ: natural parameters of a Gaussian (also used for likelihood factors λ,
/// which may lie outside the natural domain).
using NaturalParams = detail::GaussianCoords<NaturalTag>;
/// μ / γ: mean parameters, expectations of s(x).
using MeanParams = detail::GaussianCoords<MeanTag>;
/// s(x) for a single point or an average of points; shaped like MeanParams.
using SufficientStats = MeanParams;

/// Moment form of a Gaussian. cov is D×1 (variances) for the diagonal family.
struct Gaussian {
  Family family = Family::diag;
  Vector mean;
  Matrix cov;
};

bool is_valid(const NaturalParams& theta);
bool is_valid(const MeanParams& mu);

MeanParams to_mean(const NaturalParams& theta);
NaturalParams to_natural(const MeanParams& mu);

Gaussian moments(const NaturalParams& theta);
NaturalParams natural_from_moments(const Gaussian& g);

/// A(θ).
double log_partition(const NaturalParams& theta);
/// A*(μ), the negative entropy of the member with mean parameter μ.
double neg_entropy(const MeanParams& mu);
/// ⟨θ, μ⟩ = θ₁ᵀμ₁ + tr(Θ₂ M₂) (diag: θ₂ᵀμ₂).
double pairing(const NaturalParams& theta, const MeanParams& mu);

double kl(const NaturalParams& p, const NaturalParams& q);

/// θᵀs(x).
double carrier_log_density(const NaturalParams& theta, const Vector& x);
/// ∇ₓ θᵀs(x).
Vector carrier_gradient(const NaturalParams& theta, const Vector& x);

/// Floors the implied variance of a likelihood factor at min_variance while
/// keeping the implied mean. Directions with non-negative second-order
/// coefficient pass through untouched.
NaturalParams validate_and_clamp(const NaturalParams& lambda, double min_variance);

Vector sample_exact(const NaturalParams& theta, SeedStream& stream);

SufficientStats suff_stats(const Vector& x, Family family);
SufficientStats suff_stats(const Vector& x, Family family, Index dim);

/// Keeps the diagonal of a full-family block (first-order block unchanged).
MeanParams project(const MeanParams& mu, Family family);

// Canonical flat encoding: diag -> [θ₁..., θ₂...] (2D values);
// full -> [θ₁..., lower triangle of Θ₂ row-major] (D + D(D+1)/2 values).
std::size_t flat_size(Family family, Index dim);
std::vector<double> flatten(const NaturalParams& theta);
NaturalParams unflatten(Family family, Index dim, std::span<const double> values);

/// Equality of every stored double's bit pattern.
bool bitwise_equal(const NaturalParams& a, const NaturalParams& b);
bool bitwise_equal(const MeanParams& a, const MeanParams& b);

}  // namespace snep
