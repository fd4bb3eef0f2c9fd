#include "snep/snep_core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace snep {

NaturalParams initial_site_factor(Family family, Index dim, double init_variance) {
  return isotropic_prior(family, dim, init_variance);
}

LikelihoodSite make_site(int worker_id, const NaturalParams& lambda, const NaturalParams& theta_aux,
                         double beta) {
  if (!(beta > 0.0)) throw Error(Errc::validation_error, "beta must be positive");
  LikelihoodSite site;
  site.gamma = to_mean(lambda);
  site.lambda = lambda;
  site.lambda_old = lambda;
  site.theta_aux = theta_aux;
  site.beta = beta;
  site.worker_id = worker_id;
  return site;
}

const char* to_string(UpdateStatus status) {
  switch (status) {
    case UpdateStatus::applied: return "applied";
    case UpdateStatus::rejected_mean_domain: return "rejected-mean-domain";
    case UpdateStatus::skipped_invalid_aux: return "skipped-invalid-aux";
    case UpdateStatus::discarded_invalid_posterior: return "discarded-invalid-posterior";
  }
  return "unknown";
}

Cavity cavity(const NaturalParams& theta_posterior, const NaturalParams& lambda) {
  Cavity out{theta_posterior - lambda, true};
  out.valid = is_valid(out.theta);
  return out;
}

double TiltedTarget::log_density(const Vector& x) const {
  double value = carrier_log_density(base, x);
  if (likelihood) value += tilt_power * likelihood->loglik(x);
  return value;
}

Vector TiltedTarget::grad_log_density(const Vector& x) const { return log_density_and_grad(x).grad; }

LogLik TiltedTarget::log_density_and_grad(const Vector& x) const {
  LogLik out{carrier_log_density(base, x), carrier_gradient(base, x)};
  if (likelihood) {
    const LogLik ll = likelihood->loglik_and_grad(x);
    out.value += tilt_power * ll.value;
    out.grad += tilt_power * ll.grad;
  }
  return out;
}

std::optional<TiltedTarget> try_tilted_target(const LikelihoodSite& site,
                                              const NaturalParams& cavity_theta,
                                              std::shared_ptr<const ShardLikelihood> likelihood) {
  site.lambda.require_same_shape(cavity_theta);
  const double tilt = 1.0 / site.beta;
  TiltedTarget target{site.theta_aux - tilt * site.lambda, tilt, std::move(likelihood)};
  if (!is_valid(target.base)) return std::nullopt;
  return target;
}

TiltedTarget tilted_target(const LikelihoodSite& site, const NaturalParams& cavity_theta,
                           std::shared_ptr<const ShardLikelihood> likelihood) {
  auto target = try_tilted_target(site, cavity_theta, std::move(likelihood));
  if (!target) throw Error(Errc::tilted_invalid, "θ' − λ/β is outside the natural domain");
  return *std::move(target);
}

SiteUpdate inner_update(const LikelihoodSite& site, const SufficientStats& stat,
                        const NaturalParams& theta_posterior, double eps, double min_variance) {
  site.gamma.require_same_shape(stat);
  site.lambda.require_same_shape(theta_posterior);
  SiteUpdate out{site, UpdateStatus::applied, false};
  if (eps == 0.0) return out;
  MeanParams gamma = site.gamma + eps * (stat - to_mean(theta_posterior));
  if (!is_valid(gamma)) {
    out.status = UpdateStatus::rejected_mean_domain;
    return out;
  }
  NaturalParams lambda = to_natural(gamma);
  if (min_variance > 0.0) {
    NaturalParams floored = validate_and_clamp(lambda, min_variance);
    if (!(floored == lambda)) {
      out.clamped = true;
      lambda = std::move(floored);
      gamma = to_mean(lambda);
    }
  }
  out.site.gamma = std::move(gamma);
  out.site.lambda = std::move(lambda);
  return out;
}

SiteUpdate outer_update(const LikelihoodSite& site, const NaturalParams& cavity_theta) {
  SiteUpdate out{site, UpdateStatus::applied, false};
  NaturalParams aux = cavity_theta + site.lambda;
  if (!is_valid(aux)) {
    out.status = UpdateStatus::skipped_invalid_aux;
    return out;
  }
  out.site.theta_aux = std::move(aux);
  return out;
}

SiteUpdate damped_ep_update(const LikelihoodSite& site, const MeanParams& tilted_mean,
                            const NaturalParams& cavity_theta, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw Error(Errc::validation_error, "damping must lie in [0, 1]");
  }
  SiteUpdate out{site, UpdateStatus::applied, false};
  const NaturalParams target = to_natural(tilted_mean) - cavity_theta;
  NaturalParams lambda = alpha * site.lambda + (1.0 - alpha) * target;
  if (!is_valid(cavity_theta + lambda)) {
    out.status = UpdateStatus::discarded_invalid_posterior;
    return out;
  }
  // EP factors need not be normalisable; γ is only defined when λ is.
  if (is_valid(lambda)) {
    out.site.gamma = to_mean(lambda);
  } else {
    out.site.gamma.first().setConstant(std::numeric_limits<double>::quiet_NaN());
    out.site.gamma.second().setConstant(std::numeric_limits<double>::quiet_NaN());
  }
  out.site.lambda = std::move(lambda);
  return out;
}

SiteUpdate rolled_update_exact(const LikelihoodSite& site, const NaturalParams& cavity_theta,
                               const NaturalParams& theta_posterior,
                               const MeanParams& exact_tilted_mean, double eps,
                               double min_variance) {
  site.lambda.require_same_shape(cavity_theta);
  LikelihoodSite pinned = site;
  pinned.theta_aux = theta_posterior;
  return inner_update(pinned, exact_tilted_mean, theta_posterior, eps, min_variance);
}

DualObjective dual_objective_conjugate(const NaturalParams& theta0,
                                       std::span<const LikelihoodSite> sites,
                                       std::span<const ShardLikelihood> shards) {
  if (sites.size() != shards.size()) {
    throw Error(Errc::dimension_mismatch, "one shard per site is required");
  }
  NaturalParams posterior = theta0;
  for (const auto& site : sites) posterior += site.lambda;
  DualObjective out;
  out.value = log_partition(posterior);
  const MeanParams posterior_mean = to_mean(posterior);
  out.grads.reserve(sites.size());
  for (std::size_t i = 0; i < sites.size(); ++i) {
    const LikelihoodSite& site = sites[i];
    if (shards[i].spec().kind != ModelKind::linear_gaussian) {
      throw Error(Errc::unsupported_model, "dual objective needs the conjugate model");
    }
    const double tilt = 1.0 / site.beta;
    const NaturalParams base = site.theta_aux - tilt * site.lambda;
    out.value += site.beta * (tilted_log_partition_linear(shards[i], base, tilt) -
                              log_partition(site.theta_aux));
    out.grads.push_back(posterior_mean - exact_tilted_moments_linear(shards[i], base, tilt));
  }
  return out;
}

double fixed_point_residual(const NaturalParams& theta_posterior,
                            std::span<const MeanParams> tilted_means) {
  const MeanParams target = to_mean(theta_posterior);
  double worst = 0.0;
  for (const auto& m : tilted_means) {
    target.require_same_shape(m);
    worst = std::max(worst, (m.first() - target.first()).cwiseAbs().maxCoeff());
    worst = std::max(worst, (m.second() - target.second()).cwiseAbs().maxCoeff());
  }
  return worst;
}

std::vector<Eigen::Matrix2d> mean_space_metric_diag(const MeanParams& gamma) {
  if (gamma.family() != Family::diag) {
    throw Error(Errc::unsupported_model, "closed-form metric is for the diagonal family");
  }
  std::vector<Eigen::Matrix2d> out;
  out.reserve(static_cast<std::size_t>(gamma.dim()));
  for (Index j = 0; j < gamma.dim(); ++j) {
    const double m1 = gamma.first()(j);
    const double v = 2.0 * gamma.second()(j, 0) - m1 * m1;
    Eigen::Matrix2d h;
    // θ₁ = μ₁/v, θ₂ = −1/v with v = 2μ₂ − μ₁².
    h << 1.0 / v + 2.0 * m1 * m1 / (v * v), -2.0 * m1 / (v * v),
        -2.0 * m1 / (v * v), 2.0 / (v * v);
    out.push_back(h);
  }
  return out;
}

}  // namespace snep
