#pragma once

// Markov kernels targeting tilted distributions, and the state shift applied
// when a worker's cavity changes.

#include <cstddef>
#include <limits>
#include <memory>
#include <optional>
#include <vector>

#include "snep/expfam.hpp"
#include "snep/random.hpp"
#include "snep/snep_core.hpp"

namespace snep {

struct SamplerState {
  Vector x;
  Vector v;    // preconditioner accumulator, elementwise ≥ 0
  long t = 0;  // kernel steps taken
  SeedStream rng;
  // Epoch-shuffled minibatch order over the shard (shard-local indices).
  std::vector<std::size_t> batch_order;
  std::size_t batch_pos = 0;

  static SamplerState at(Vector x, SeedStream rng) {
    SamplerState s;
    s.v = Vector::Zero(x.size());
    s.x = std::move(x);
    s.rng = rng;
    return s;
  }
};

bool bitwise_equal(const SamplerState& a, const SamplerState& b);

enum class Debias {
  adam,     // v_t / (1 − β^t)
  literal,  // v_t / (1 − β²)
};

struct SgldConfig {
  double eps = 1e-3;
  double beta_precond = 0.999;
  double delta = 1e-8;
  std::optional<double> noise_cap;  // std-dev cap; defaults to eps
  std::size_t minibatch_size = 100;
  Debias debias = Debias::adam;
  bool adaptive = true;      // false: unit mass matrix, κ = eps
  bool inject_noise = true;  // false: plain preconditioned gradient ascent

  double effective_noise_cap() const { return noise_cap.value_or(eps); }
};

struct Preconditioned {
  SamplerState state;
  Vector mass;   // diag(M_t)
  Vector kappa;  // elementwise step ε / (√M_t + δ)
};

Preconditioned precond_update(const SamplerState& state, const Vector& g, const SgldConfig& cfg);

struct KernelStep {
  SamplerState state;
  bool accepted = true;  // MALA accept/reject outcome
  bool aborted = false;  // nonfinite gradient: state left unchanged
};

/// Unbiased estimate of ∇log p(x) of the tilted target: exact carrier term plus
/// the likelihood gradient on the next minibatch (|S|/|B| scaled), or on the
/// whole shard when the minibatch covers it.
Vector stochastic_gradient(SamplerState& state, const TiltedTarget& target, std::size_t minibatch);

KernelStep sgld_step(const SamplerState& state, const TiltedTarget& target, const SgldConfig& cfg);

/// Metropolis-adjusted Langevin step. With a lower-triangular factor L the
/// proposal is x + h·LLᵀ∇log p(x) + √(2h)·Lξ.
KernelStep mala_step(const SamplerState& state, const TiltedTarget& target, double step,
                     const Matrix* precond_chol = nullptr);

/// I.i.d. draw from the tilted distribution of the linear-Gaussian model.
KernelStep exact_gaussian_step(const SamplerState& state, const TiltedTarget& target);

/// Natural parameters (full family) of the exact tilted Gaussian.
NaturalParams exact_tilted_natural(const TiltedTarget& target);

/// x ↦ μ_new + Σ_new^{1/2} Σ_old^{-1/2} (x − μ_old) (elementwise square roots for
/// the diagonal family, Cholesky factors for the full one).
Vector shift_state(const Vector& x_old, const NaturalParams& old_params,
                   const NaturalParams& new_params);

/// MALA chain on a fixed target that caches the current density.
class MalaChain {
 public:
  MalaChain(TiltedTarget target, SamplerState state, double step,
            std::optional<Matrix> precond_chol = std::nullopt);

  bool advance();
  const SamplerState& state() const { return state_; }
  double step() const { return step_; }
  void set_step(double step) { step_ = step; }
  long accepted() const { return accepted_; }
  long proposed() const { return proposed_; }
  void reset_counts() { accepted_ = proposed_ = 0; }

 private:
  TiltedTarget target_;
  SamplerState state_;
  double step_;
  std::optional<Matrix> chol_;
  LogLik current_;
  long accepted_ = 0;
  long proposed_ = 0;
};

/// Statistics a kernel reports back to the worker loop.
struct KernelCounters {
  long steps = 0;
  long accepted = 0;
  long aborted = 0;
};

/// A moment source for the inner update: advances the sampler `steps` times and
/// returns the average of s(x) over the visited states.
class TiltedKernel {
 public:
  virtual ~TiltedKernel() = default;
  virtual SufficientStats estimate(SamplerState& state, const TiltedTarget& target, int steps,
                                   Family family, KernelCounters& counters) const = 0;
  virtual bool exact_moments() const { return false; }
};

class SgldKernel final : public TiltedKernel {
 public:
  explicit SgldKernel(SgldConfig cfg) : cfg_(std::move(cfg)) {}
  SufficientStats estimate(SamplerState& state, const TiltedTarget& target, int steps,
                           Family family, KernelCounters& counters) const override;
  const SgldConfig& config() const { return cfg_; }

 private:
  SgldConfig cfg_;
};

/// MALA preconditioned by the covariance of the target's base Gaussian.
class MalaKernel final : public TiltedKernel {
 public:
  explicit MalaKernel(double step) : step_(step) {}
  SufficientStats estimate(SamplerState& state, const TiltedTarget& target, int steps,
                           Family family, KernelCounters& counters) const override;

 private:
  double step_;
};

class ExactGaussianKernel final : public TiltedKernel {
 public:
  SufficientStats estimate(SamplerState& state, const TiltedTarget& target, int steps,
                           Family family, KernelCounters& counters) const override;
};

/// Returns the closed-form tilted moments without sampling (conjugate model).
class ExactMomentKernel final : public TiltedKernel {
 public:
  SufficientStats estimate(SamplerState& state, const TiltedTarget& target, int steps,
                           Family family, KernelCounters& counters) const override;
  bool exact_moments() const override { return true; }
};

}  // namespace snep
