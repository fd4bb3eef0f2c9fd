#include "snep/samplers.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>

namespace snep {

namespace {

bool same_bits(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) return false;
  for (Index i = 0; i < a.size(); ++i) {
    if (std::bit_cast<std::uint64_t>(a(i)) != std::bit_cast<std::uint64_t>(b(i))) return false;
  }
  return true;
}

Vector standard_normals(SeedStream& rng, Index d) {
  Vector z(d);
  for (Index j = 0; j < d; ++j) z(j) = rng.normal();
  return z;
}

// Lower-triangular factor of the covariance of a valid Gaussian.
Matrix covariance_factor(const NaturalParams& theta) {
  const Gaussian g = moments(theta);
  if (g.family == Family::diag) return Matrix(g.cov.col(0).cwiseSqrt().asDiagonal());
  Eigen::LLT<Matrix> llt(g.cov);
  if (llt.info() != Eigen::Success) {
    throw Error(Errc::invalid_natural_domain, "covariance is not positive definite");
  }
  return llt.matrixL();
}

struct MalaProposal {
  Vector x;
  LogLik density;
  double log_ratio = -std::numeric_limits<double>::infinity();
};

// Proposal and log acceptance ratio; a non-finite proposal density gives −∞.
MalaProposal propose_mala(const TiltedTarget& target, const Vector& x, const LogLik& current,
                          double h, const Matrix* chol, SeedStream& rng) {
  const Index d = x.size();
  const Vector xi = standard_normals(rng, d);
  auto precondition = [&](const Vector& g) -> Vector {
    if (!chol) return g;
    return *chol * (chol->transpose() * g);
  };
  auto whiten = [&](const Vector& r) -> Vector {
    if (!chol) return r;
    return chol->triangularView<Eigen::Lower>().solve(r);
  };
  MalaProposal p;
  const Vector noise = chol ? Vector(*chol * xi) : xi;
  p.x = x + h * precondition(current.grad) + std::sqrt(2.0 * h) * noise;
  p.density = target.log_density_and_grad(p.x);
  if (!std::isfinite(p.density.value) || !p.density.grad.allFinite()) return p;
  const double forward = whiten(p.x - x - h * precondition(current.grad)).squaredNorm();
  const double backward = whiten(x - p.x - h * precondition(p.density.grad)).squaredNorm();
  p.log_ratio = p.density.value - current.value - (backward - forward) / (4.0 * h);
  return p;
}

template <class StepFn>
SufficientStats average_stats(SamplerState& state, int steps, Family family,
                              KernelCounters& counters, StepFn&& step) {
  if (steps < 1) throw Error(Errc::validation_error, "need at least one kernel step");
  SufficientStats sum = SufficientStats::zeros(family, state.x.size());
  for (int k = 0; k < steps; ++k) {
    KernelStep next = step(state);
    ++counters.steps;
    if (next.aborted) ++counters.aborted;
    if (next.accepted && !next.aborted) ++counters.accepted;
    state = std::move(next.state);
    sum += suff_stats(state.x, family);
  }
  if (steps > 1) sum *= 1.0 / static_cast<double>(steps);
  return sum;
}

}  // namespace

bool bitwise_equal(const SamplerState& a, const SamplerState& b) {
  return same_bits(a.x, b.x) && same_bits(a.v, b.v) && a.t == b.t && a.rng == b.rng &&
         a.batch_order == b.batch_order && a.batch_pos == b.batch_pos;
}

Preconditioned precond_update(const SamplerState& state, const Vector& g, const SgldConfig& cfg) {
  if (g.size() != state.v.size()) throw Error(Errc::dimension_mismatch, "gradient has wrong length");
  Preconditioned out{state, Vector(), Vector()};
  const double b = cfg.beta_precond;
  out.state.v = b * state.v + (1.0 - b) * g.cwiseProduct(g);
  out.state.t = state.t + 1;
  const double debias = cfg.debias == Debias::adam
                            ? 1.0 - std::pow(b, static_cast<double>(out.state.t))
                            : 1.0 - b * b;
  out.mass = out.state.v / debias;
  out.kappa = (cfg.eps / (out.mass.array().sqrt() + cfg.delta)).matrix();
  return out;
}

Vector stochastic_gradient(SamplerState& state, const TiltedTarget& target, std::size_t minibatch) {
  Vector g = carrier_gradient(target.base, state.x);
  if (!target.likelihood) return g;
  const auto n = static_cast<std::size_t>(target.likelihood->size());
  if (n == 0) return g;
  if (minibatch == 0 || minibatch >= n) {
    return g + target.tilt_power * target.likelihood->loglik_and_grad(state.x).grad;
  }
  if (state.batch_order.size() != n || state.batch_pos + minibatch > n) {
    state.batch_order.resize(n);
    std::iota(state.batch_order.begin(), state.batch_order.end(), std::size_t{0});
    std::shuffle(state.batch_order.begin(), state.batch_order.end(), state.rng.engine());
    state.batch_pos = 0;
  }
  const std::span<const std::size_t> batch(state.batch_order.data() + state.batch_pos, minibatch);
  state.batch_pos += minibatch;
  return g + target.tilt_power * target.likelihood->loglik_and_grad(state.x, batch).grad;
}

KernelStep sgld_step(const SamplerState& state, const TiltedTarget& target, const SgldConfig& cfg) {
  SamplerState next = state;
  const Vector g = stochastic_gradient(next, target, cfg.minibatch_size);
  if (!g.allFinite()) return {state, false, true};
  Vector kappa;
  if (cfg.adaptive) {
    Preconditioned pc = precond_update(next, g, cfg);
    next = std::move(pc.state);
    kappa = std::move(pc.kappa);
  } else {
    kappa = Vector::Constant(g.size(), cfg.eps);
    ++next.t;
  }
  next.x += kappa.cwiseProduct(g);
  if (cfg.inject_noise) {
    const double cap = cfg.effective_noise_cap();
    for (Index j = 0; j < next.x.size(); ++j) {
      const double sd = std::min(std::sqrt(2.0 * kappa(j)), cap);
      next.x(j) += sd * next.rng.normal();
    }
  }
  return {std::move(next), true, false};
}

KernelStep mala_step(const SamplerState& state, const TiltedTarget& target, double step,
                     const Matrix* precond_chol) {
  const LogLik current = target.log_density_and_grad(state.x);
  if (!std::isfinite(current.value) || !current.grad.allFinite()) {
    throw Error(Errc::nonfinite_density, "current MALA state has non-finite density");
  }
  SamplerState next = state;
  MalaProposal p = propose_mala(target, state.x, current, step, precond_chol, next.rng);
  const double u = next.rng.uniform();
  ++next.t;
  const bool accept = std::log(u) < p.log_ratio;
  if (accept) next.x = std::move(p.x);
  return {std::move(next), accept, false};
}

NaturalParams exact_tilted_natural(const TiltedTarget& target) {
  if (!target.likelihood) return to_full(target.base);
  const ShardLikelihood& shard = *target.likelihood;
  const GaussianFactor f =
      linear_likelihood_factor(shard.spec(), shard.covariates(), shard.responses());
  return to_full(target.base) + target.tilt_power * f.natural;
}

KernelStep exact_gaussian_step(const SamplerState& state, const TiltedTarget& target) {
  const NaturalParams tilted = exact_tilted_natural(target);
  SamplerState next = state;
  next.x = sample_exact(tilted, next.rng);
  ++next.t;
  return {std::move(next), true, false};
}

Vector shift_state(const Vector& x_old, const NaturalParams& old_params,
                   const NaturalParams& new_params) {
  old_params.require_same_shape(new_params);
  if (x_old.size() != old_params.dim()) throw Error(Errc::dimension_mismatch, "x has wrong length");
  const Gaussian from = moments(old_params);
  const Gaussian to = moments(new_params);
  if (from.family == Family::diag) {
    const Vector scale = (to.cov.col(0).array() / from.cov.col(0).array()).sqrt();
    return to.mean + scale.cwiseProduct(x_old - from.mean);
  }
  Eigen::LLT<Matrix> l_from(from.cov);
  Eigen::LLT<Matrix> l_to(to.cov);
  if (l_from.info() != Eigen::Success || l_to.info() != Eigen::Success) {
    throw Error(Errc::invalid_natural_domain, "covariance is not positive definite");
  }
  const Vector white = l_from.matrixL().solve(x_old - from.mean);
  return to.mean + l_to.matrixL() * white;
}

MalaChain::MalaChain(TiltedTarget target, SamplerState state, double step,
                     std::optional<Matrix> precond_chol)
    : target_(std::move(target)), state_(std::move(state)), step_(step),
      chol_(std::move(precond_chol)) {
  current_ = target_.log_density_and_grad(state_.x);
  if (!std::isfinite(current_.value) || !current_.grad.allFinite()) {
    throw Error(Errc::nonfinite_density, "initial MALA state has non-finite density");
  }
}

bool MalaChain::advance() {
  MalaProposal p = propose_mala(target_, state_.x, current_, step_, chol_ ? &*chol_ : nullptr,
                                state_.rng);
  const double u = state_.rng.uniform();
  ++state_.t;
  ++proposed_;
  if (std::log(u) < p.log_ratio) {
    state_.x = std::move(p.x);
    current_ = std::move(p.density);
    ++accepted_;
    return true;
  }
  return false;
}

SufficientStats SgldKernel::estimate(SamplerState& state, const TiltedTarget& target, int steps,
                                     Family family, KernelCounters& counters) const {
  return average_stats(state, steps, family, counters,
                       [&](const SamplerState& s) { return sgld_step(s, target, cfg_); });
}

SufficientStats MalaKernel::estimate(SamplerState& state, const TiltedTarget& target, int steps,
                                     Family family, KernelCounters& counters) const {
  MalaChain chain(target, state, step_, covariance_factor(target.base));
  SufficientStats sum = SufficientStats::zeros(family, state.x.size());
  if (steps < 1) throw Error(Errc::validation_error, "need at least one kernel step");
  for (int k = 0; k < steps; ++k) {
    if (chain.advance()) ++counters.accepted;
    ++counters.steps;
    sum += suff_stats(chain.state().x, family);
  }
  state = chain.state();
  if (steps > 1) sum *= 1.0 / static_cast<double>(steps);
  return sum;
}

SufficientStats ExactGaussianKernel::estimate(SamplerState& state, const TiltedTarget& target,
                                              int steps, Family family,
                                              KernelCounters& counters) const {
  const NaturalParams tilted = exact_tilted_natural(target);
  return average_stats(state, steps, family, counters, [&](const SamplerState& s) {
    SamplerState next = s;
    next.x = sample_exact(tilted, next.rng);
    ++next.t;
    return KernelStep{std::move(next), true, false};
  });
}

SufficientStats ExactMomentKernel::estimate(SamplerState& state, const TiltedTarget& target,
                                            int steps, Family family,
                                            KernelCounters& counters) const {
  state.t += steps;
  counters.steps += steps;
  counters.accepted += steps;
  if (!target.likelihood) return project(to_mean(to_full(target.base)), family);
  return exact_tilted_moments_linear(*target.likelihood, target.base, target.tilt_power);
}

}  // namespace snep
