#pragma once

// SNEP update rules over one worker's likelihood approximation.
//
// All functions are pure: they take a site by const reference and return the
// updated copy together with a status. Policy outcomes (a proposal leaving the
// mean domain, an invalid auxiliary parameter, a discarded EP step) are
// reported through UpdateStatus rather than thrown.

#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "snep/expfam.hpp"
#include "snep/models.hpp"

namespace snep {

struct LikelihoodSite {
  MeanParams gamma;          // γ_i
  NaturalParams lambda;      // λ_i = ∇A*(γ_i)
  NaturalParams lambda_old;  // λ_i at the last exchange with the server
  NaturalParams theta_aux;   // θ'_i
  double beta = 1.0;
  int worker_id = 0;
};

/// λ⁽¹⁾ = natural parameters of N(0, init_variance·I).
NaturalParams initial_site_factor(Family family, Index dim, double init_variance);

LikelihoodSite make_site(int worker_id, const NaturalParams& lambda, const NaturalParams& theta_aux,
                         double beta);

enum class UpdateStatus {
  applied,
  rejected_mean_domain,   // proposed γ has no natural-parameter image
  skipped_invalid_aux,    // θ_{-i} + λ_i outside the natural domain
  discarded_invalid_posterior,  // damped EP step would leave θ_posterior invalid
};

const char* to_string(UpdateStatus status);

struct SiteUpdate {
  LikelihoodSite site;
  UpdateStatus status = UpdateStatus::applied;
  bool clamped = false;  // the variance floor changed λ

  bool applied() const { return status == UpdateStatus::applied; }
};

struct Cavity {
  NaturalParams theta;
  bool valid = true;
};

/// θ_posterior − λ. Returned even when outside the natural domain.
Cavity cavity(const NaturalParams& theta_posterior, const NaturalParams& lambda);

/// exp(baseᵀs(x) + tilt_power·ℓ(x)); likelihood may be null (carrier only).
struct TiltedTarget {
  NaturalParams base;
  double tilt_power = 1.0;
  std::shared_ptr<const ShardLikelihood> likelihood;

  double log_density(const Vector& x) const;
  Vector grad_log_density(const Vector& x) const;
  /// Value and gradient together (full shard).
  LogLik log_density_and_grad(const Vector& x) const;
};

/// base = θ'_i − β⁻¹λ_i, tilt = β⁻¹. Throws tilted_invalid if base is outside
/// the natural domain.
TiltedTarget tilted_target(const LikelihoodSite& site, const NaturalParams& cavity_theta,
                           std::shared_ptr<const ShardLikelihood> likelihood = nullptr);

std::optional<TiltedTarget> try_tilted_target(const LikelihoodSite& site,
                                              const NaturalParams& cavity_theta,
                                              std::shared_ptr<const ShardLikelihood> likelihood = nullptr);

/// γ ← γ + ε(stat − ∇A(θ_posterior)); λ ← clamp(∇A*(γ)). A non-positive
/// min_variance disables the floor.
SiteUpdate inner_update(const LikelihoodSite& site, const SufficientStats& stat,
                        const NaturalParams& theta_posterior, double eps, double min_variance);

/// θ'_i ← θ_{-i} + λ_i.
SiteUpdate outer_update(const LikelihoodSite& site, const NaturalParams& cavity_theta);

/// λ ← αλ + (1−α)(∇A*(tilted_mean) − θ_{-i}). Throws invalid_mean_domain if
/// tilted_mean has no natural-parameter image.
SiteUpdate damped_ep_update(const LikelihoodSite& site, const MeanParams& tilted_mean,
                            const NaturalParams& cavity_theta, double alpha);

/// Inner update with θ'_i pinned to θ_posterior (single-loop variant).
SiteUpdate rolled_update_exact(const LikelihoodSite& site, const NaturalParams& cavity_theta,
                               const NaturalParams& theta_posterior,
                               const MeanParams& exact_tilted_mean, double eps,
                               double min_variance = 0.0);

struct DualObjective {
  double value = 0.0;
  std::vector<MeanParams> grads;  // dL/dλ_i = ∇A(θ₀ + Σλ) − tilted mean of site i
};

/// Dual objective A(θ₀ + Σλ) + Σ β(A_i(θ'_i − λ_i/β, 1/β) − A(θ'_i)) for the
/// conjugate linear model; shards[i] belongs to sites[i].
DualObjective dual_objective_conjugate(const NaturalParams& theta0,
                                       std::span<const LikelihoodSite> sites,
                                       std::span<const ShardLikelihood> shards);

/// max_i ‖tilted_mean_i − ∇A(θ_posterior)‖∞ over both blocks.
double fixed_point_residual(const NaturalParams& theta_posterior,
                            std::span<const MeanParams> tilted_means);

/// Per-coordinate ∇²A*(γ) for the diagonal family: entry j is the 2×2 block
/// over (γ_j1, γ_j2).
std::vector<Eigen::Matrix2d> mean_space_metric_diag(const MeanParams& gamma);

enum class StepKind { constant, inverse_t };

struct StepSchedule {
  StepKind kind = StepKind::constant;
  double eps0 = 0.02;
  double t0 = 1000.0;

  double at(long iteration) const {
    if (kind == StepKind::constant) return eps0;
    return eps0 / (1.0 + static_cast<double>(iteration) / t0);
  }
};

enum class BetaMode { fixed, one_over_n };

struct SnepConfig {
  StepSchedule step;
  int n_outer = 10;
  int n_sync = 10;
  double min_variance = 0.01;
  BetaMode beta_mode = BetaMode::fixed;
  double beta = 1.0;
  int samples_per_iter = 1;
  double site_init_variance = 1.0;

  double resolved_beta(std::size_t n_workers) const {
    return beta_mode == BetaMode::one_over_n ? 1.0 / static_cast<double>(n_workers) : beta;
  }
};

}  // namespace snep
