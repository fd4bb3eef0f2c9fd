#pragma once

// Likelihood models and synthetic data.
//
// Two models share one interface: Bayesian logistic regression, and a
// Gaussian linear model whose posterior and tilted moments are available in
// closed form (used as an exactness oracle).

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "snep/expfam.hpp"

namespace snep {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class ModelKind : std::uint8_t { logistic = 0, linear_gaussian = 1 };

const char* to_string(ModelKind kind);

inline constexpr double kLogitClamp = 35.0;

struct GeneratorMeta {
  std::uint64_t seed = 0;
  Vector mu;        // covariate mean
  Matrix p;         // covariate factor, Σ = P Pᵀ
  Vector x_star;    // generating weights
  double noise_variance = 1.0;  // linear model only
};

struct Dataset {
  ModelKind kind = ModelKind::logistic;
  RowMatrix covariates;  // N×d, row c is z_c
  Vector responses;      // y_c
  GeneratorMeta meta;

  Index size() const { return covariates.rows(); }
  Index dim() const { return covariates.cols(); }
};

/// Disjoint cover of 0..N-1: contiguous equal-size blocks of a seeded
/// permutation.
using ShardAssignment = std::vector<std::vector<std::size_t>>;

struct ModelSpec {
  ModelKind kind = ModelKind::logistic;
  Index dim = 0;
  NaturalParams prior;
  double noise_variance = 1.0;
};

/// Isotropic Gaussian prior N(0, variance·I) in the requested family.
NaturalParams isotropic_prior(Family family, Index dim, double variance);

/// Optional overrides for the generator's random draws (tests use them to force
/// degenerate covariates or a zero weight vector).
struct GeneratorOverrides {
  std::optional<Matrix> p;
  std::optional<Vector> x_star;
};

Dataset generate_logistic_data(Index n_points, Index dim, std::uint64_t seed,
                               const GeneratorOverrides& overrides = {});
Dataset generate_linear_data(Index n_points, Index dim, std::uint64_t seed, double noise_variance,
                             const GeneratorOverrides& overrides = {});

ShardAssignment assign_shards(Index n_points, std::size_t n_workers, std::uint64_t seed);

struct LogLik {
  double value = 0.0;
  Vector grad;
};

/// One worker's slice of the data, copied into contiguous storage.
class ShardLikelihood {
 public:
  ShardLikelihood(ModelSpec spec, RowMatrix covariates, Vector responses);
  ShardLikelihood(const ModelSpec& spec, const Dataset& data, std::span<const std::size_t> indices);

  const ModelSpec& spec() const { return spec_; }
  Index size() const { return z_.rows(); }
  Index dim() const { return spec_.dim; }
  const RowMatrix& covariates() const { return z_; }
  const Vector& responses() const { return y_; }

  /// Full-shard log likelihood and gradient.
  LogLik loglik_and_grad(const Vector& x) const;
  double loglik(const Vector& x) const;

  /// Minibatch estimator scaled by |S|/|B| (indices are shard-local).
  LogLik loglik_and_grad(const Vector& x, std::span<const std::size_t> batch) const;

 private:
  double point_loglik(Index c, double logit) const;
  double point_residual(Index c, double logit) const;

  ModelSpec spec_;
  RowMatrix z_;
  Vector y_;
};

double sigmoid(double logit);
Vector predict_probs(const Vector& x, const RowMatrix& covariates);

/// Natural parameters (full family) and additive constant of a linear-Gaussian
/// log likelihood: ℓ(x) = λᵀs(x) + constant.
struct GaussianFactor {
  NaturalParams natural;
  double constant = 0.0;
};

GaussianFactor linear_likelihood_factor(const ModelSpec& spec, const RowMatrix& covariates,
                                        const Vector& responses);

/// Lifts a diagonal-family parameter to the full family.
NaturalParams to_full(const NaturalParams& theta);

/// Exact posterior of the linear model, returned in the full family.
NaturalParams exact_linear_posterior(const ModelSpec& spec, const Dataset& data);

/// Mean parameters of exp(baseᵀs(x) + tilt·ℓ_shard(x)), projected onto base's
/// family.
MeanParams exact_tilted_moments_linear(const ShardLikelihood& shard, const NaturalParams& base,
                                       double tilt_power);

/// log ∫ exp(baseᵀs(x) + tilt·ℓ_shard(x)) dx.
double tilted_log_partition_linear(const ShardLikelihood& shard, const NaturalParams& base,
                                   double tilt_power);

// Dataset file: "PSDS", version, kind, N, d, seed, covariates (row-major),
// responses, then μ, P (row-major), x*; all little-endian.
inline constexpr std::uint8_t kDatasetVersion = 1;
std::vector<std::uint8_t> encode_dataset(const Dataset& data);
Dataset decode_dataset(std::span<const std::uint8_t> bytes);
void write_dataset(const std::string& path, const Dataset& data);
Dataset read_dataset(const std::string& path);

}  // namespace snep
