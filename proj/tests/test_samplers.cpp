#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include <boost/math/distributions/normal.hpp>

#include "doctest.h"
#include "generators.hpp"
#include "oracles.hpp"
#include "snep/samplers.hpp"

using namespace snep;

namespace {

NaturalParams nat1(double t1, double t2) { return NaturalParams::diag(Vector::Constant(1, t1), Vector::Constant(1, t2)); }

TiltedTarget carrier_only(const NaturalParams& base) { return TiltedTarget{base, 1.0, nullptr}; }

template <class F>
Errc error_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return Errc::io_error;
}

struct Summary {
  double mean = 0.0;
  double var = 0.0;
  double se_mean = 0.0;  // batch means
};

Summary summarize(const std::vector<double>& xs, std::size_t batches = 100) {
  Summary s;
  const auto n = static_cast<double>(xs.size());
  s.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  for (double x : xs) s.var += (x - s.mean) * (x - s.mean);
  s.var /= n - 1.0;
  const std::size_t per = xs.size() / batches;
  double between = 0.0;
  for (std::size_t b = 0; b < batches; ++b) {
    const double m = std::accumulate(xs.begin() + b * per, xs.begin() + (b + 1) * per, 0.0) / per;
    between += (m - s.mean) * (m - s.mean);
  }
  s.se_mean = std::sqrt(between / (batches - 1.0) / batches);
  return s;
}

std::shared_ptr<const ShardLikelihood> linear_shard(std::mt19937_64& rng, Index n, Index d, double noise) {
  const ModelSpec spec{ModelKind::linear_gaussian, d, isotropic_prior(Family::full, d, 10.0), noise};
  RowMatrix z(n, d);
  for (Index r = 0; r < n; ++r) z.row(r) = gen::normals(rng, d).transpose();
  return std::make_shared<const ShardLikelihood>(spec, z, gen::normals(rng, n));
}

}  // namespace

TEST_SUITE("samplers") {

TEST_CASE("precond_update examples") {
  SgldConfig cfg;
  cfg.eps = 1e-3;
  SamplerState s = SamplerState::at(Vector::Zero(1), SeedStream(1));
  Preconditioned p = precond_update(s, Vector::Constant(1, 2.0), cfg);
  CHECK(p.state.v(0) == doctest::Approx(0.004).epsilon(1e-12));
  CHECK(p.mass(0) == doctest::Approx(4.0).epsilon(1e-12));
  CHECK(p.kappa(0) == doctest::Approx(1e-3 / (2.0 + 1e-8)).epsilon(1e-12));
  CHECK(p.state.t == 1);

  Preconditioned z = precond_update(s, Vector::Zero(1), cfg);
  CHECK(z.mass(0) == 0.0);
  CHECK(z.kappa(0) == doctest::Approx(1e-3 / 1e-8));

  const Vector g = (Vector(3) << 0.5, -3.0, 1e-2).finished();
  SamplerState run = s;
  run.v = Vector::Zero(3);
  Preconditioned last{run, Vector(), Vector()};
  for (int k = 0; k < 30000; ++k) {
    last = precond_update(run, g, cfg);
    run = last.state;
  }
  CHECK((last.mass - g.cwiseProduct(g)).cwiseAbs().maxCoeff() < 1e-9);
  for (Index j = 0; j < 3; ++j) CHECK(last.kappa(j) == doctest::Approx(1e-3 / (std::abs(g(j)) + 1e-8)).epsilon(1e-9));

  CHECK(error_of([&] { precond_update(s, Vector::Zero(2), cfg); }) == Errc::dimension_mismatch);
}

TEST_CASE("instantaneous adaptation and the literal debias") {
  std::mt19937_64 rng(1);
  SgldConfig cfg;
  cfg.beta_precond = 0.0;
  SamplerState s = SamplerState::at(Vector::Zero(4), SeedStream(1));
  s.v = Vector::Constant(4, 7.0);
  s.t = 12;
  const Vector g = gen::normals(rng, 4);
  CHECK(precond_update(s, g, cfg).mass == g.cwiseProduct(g));

  cfg.beta_precond = 0.9;
  cfg.debias = Debias::literal;
  const Preconditioned lit = precond_update(s, g, cfg);
  const Vector v = 0.9 * s.v + 0.1 * g.cwiseProduct(g);
  CHECK((lit.mass - v / (1.0 - 0.81)).norm() < 1e-12);
}

TEST_CASE("noise-free SGLD step on a standard normal") {
  SgldConfig cfg;
  cfg.eps = 0.1;
  cfg.adaptive = false;
  cfg.inject_noise = false;
  const SamplerState s = SamplerState::at(Vector::Constant(1, 1.0), SeedStream(3));
  const KernelStep k = sgld_step(s, carrier_only(nat1(0, -1)), cfg);
  CHECK(k.state.x(0) == doctest::Approx(0.9).epsilon(1e-15));
  CHECK(k.state.t == 1);
}

TEST_CASE("uncapped unit-mass SGLD is the unadjusted Langevin update") {
  std::mt19937_64 rng(4);
  SgldConfig cfg;
  cfg.eps = 0.05;
  cfg.adaptive = false;
  cfg.noise_cap = std::numeric_limits<double>::infinity();
  const NaturalParams base = gen::natural(rng, Family::full, 3);
  const TiltedTarget target = carrier_only(base);
  SamplerState s = SamplerState::at(gen::normals(rng, 3), SeedStream(9));
  for (int k = 0; k < 20; ++k) {
    SeedStream copy = s.rng;
    Vector expected = s.x + cfg.eps * carrier_gradient(base, s.x);
    for (Index j = 0; j < 3; ++j) expected(j) += std::sqrt(2.0 * cfg.eps) * copy.normal();
    s = sgld_step(s, target, cfg).state;
    CHECK(s.x == expected);
  }
}

TEST_CASE("SGLD injected noise respects the cap") {
  SgldConfig cfg;
  cfg.eps = 0.5;
  cfg.adaptive = false;
  cfg.noise_cap = 1e-3;
  SamplerState s = SamplerState::at(Vector::Zero(1), SeedStream(5));
  // At the mode the drift vanishes, so the move is pure noise.
  double worst = 0.0;
  for (int k = 0; k < 2000; ++k) {
    const KernelStep step = sgld_step(s, carrier_only(nat1(0, -1)), cfg);
    worst = std::max(worst, std::abs(step.state.x(0)));
  }
  CHECK(worst < 6e-3);
  CHECK(worst > 1e-4);
}

namespace {

// Pooled mean and variance of 32 chains of 2·10⁵ steps after 10⁴ burn-in.
std::pair<double, double> long_run_sgld(const SgldConfig& cfg) {
  const TiltedTarget target = carrier_only(nat1(0, -1));
  double sum = 0.0, sum_sq = 0.0;
  long count = 0;
  for (int chain = 0; chain < 32; ++chain) {
    // Off the mode: a zero first gradient would make κ = ε/δ.
    SamplerState s = SamplerState::at(Vector::Constant(1, 1.0), SeedStream::derive(7, static_cast<std::uint64_t>(chain)));
    for (int k = 0; k < 210000; ++k) {
      s = sgld_step(s, target, cfg).state;
      if (k >= 10000) {
        sum += s.x(0);
        sum_sq += s.x(0) * s.x(0);
        ++count;
      }
    }
  }
  const double mean = sum / count;
  return {mean, sum_sq / count - mean * mean};
}

}  // namespace

TEST_CASE("long-run SGLD on a standard normal") {
  SgldConfig cfg;
  cfg.eps = 1e-3;
  cfg.noise_cap = std::numeric_limits<double>::infinity();
  cfg.adaptive = false;
  const auto [mean, var] = long_run_sgld(cfg);
  CHECK(std::abs(mean) < 0.05);
  CHECK(std::abs(var - 1.0) < 0.1);

  // With a memory much longer than the chain's correlation time (≈1/κ) the
  // adaptive mass is effectively constant.
  cfg.adaptive = true;
  cfg.beta_precond = 0.99999;
  const auto [amean, avar] = long_run_sgld(cfg);
  CHECK(std::abs(amean) < 0.05);
  CHECK(std::abs(avar - 1.0) < 0.1);

  // At the default memory the mass tracks g² on the chain's own time scale,
  // which inflates the spread; only gross failures are caught here.
  cfg.beta_precond = 0.999;
  const auto [dmean, dvar] = long_run_sgld(cfg);
  CHECK(std::abs(dmean) < 0.05);
  CHECK(std::abs(dvar - 1.0) < 0.5);
}

TEST_CASE("SGLD trajectories are reproducible") {
  std::mt19937_64 rng(6);
  auto shard = linear_shard(rng, 50, 3, 1.0);
  const TiltedTarget target{gen::natural(rng, Family::full, 3), 0.5, shard};
  SgldConfig cfg;
  cfg.minibatch_size = 7;
  SamplerState a = SamplerState::at(Vector::Zero(3), SeedStream(11));
  SamplerState b = a;
  for (int k = 0; k < 500; ++k) {
    a = sgld_step(a, target, cfg).state;
    b = sgld_step(b, target, cfg).state;
  }
  CHECK(bitwise_equal(a, b));
  SamplerState c = SamplerState::at(Vector::Zero(3), SeedStream(12));
  c = sgld_step(c, target, cfg).state;
  CHECK_FALSE(bitwise_equal(a, c));
}

TEST_CASE("non-finite gradient aborts the step") {
  SamplerState s = SamplerState::at(Vector::Constant(1, std::numeric_limits<double>::infinity()), SeedStream(2));
  const KernelStep k = sgld_step(s, carrier_only(nat1(0, -1)), SgldConfig{});
  CHECK(k.aborted);
  CHECK(bitwise_equal(k.state, s));
}

TEST_CASE("minibatch gradients cover the shard once per epoch") {
  std::mt19937_64 rng(8);
  auto shard = linear_shard(rng, 12, 2, 1.0);
  const TiltedTarget target{gen::natural(rng, Family::full, 2), 2.0, shard};
  SamplerState s = SamplerState::at(gen::normals(rng, 2), SeedStream(3));
  const Vector full = target.grad_log_density(s.x);
  for (int epoch = 0; epoch < 3; ++epoch) {
    Vector avg = Vector::Zero(2);
    for (int b = 0; b < 3; ++b) avg += stochastic_gradient(s, target, 4);
    avg /= 3.0;
    CHECK((avg - full).norm() <= 1e-12 * full.norm());
  }
  CHECK((stochastic_gradient(s, target, 0) - full).norm() <= 1e-12 * full.norm());
  CHECK((stochastic_gradient(s, target, 50) - full).norm() <= 1e-12 * full.norm());
}

TEST_CASE("MALA with a vanishing step accepts almost everything") {
  const TiltedTarget target = carrier_only(nat1(0, -1));
  MalaChain chain(target, SamplerState::at(Vector::Constant(1, 0.3), SeedStream(4)), 1e-6);
  for (int k = 0; k < 10000; ++k) chain.advance();
  CHECK(static_cast<double>(chain.accepted()) / chain.proposed() >= 0.99);
}

TEST_CASE("MALA rejects proposals with non-finite density") {
  const TiltedTarget target = carrier_only(nat1(0, -1));
  SamplerState s = SamplerState::at(Vector::Constant(1, 1.0), SeedStream(5));
  for (int k = 0; k < 1000; ++k) {
    const KernelStep step = mala_step(s, target, 1e300);
    CHECK_FALSE(step.accepted);
    s = step.state;
  }
  CHECK(s.x(0) == 1.0);
  SamplerState bad = SamplerState::at(Vector::Constant(1, std::numeric_limits<double>::quiet_NaN()), SeedStream(5));
  CHECK(error_of([&] { mala_step(bad, target, 0.1); }) == Errc::nonfinite_density);
}

TEST_CASE("MALA samples a Gaussian target exactly") {
  const TiltedTarget target = carrier_only(nat1(0, -1));
  // Tune once towards the usual 0.57 acceptance.
  double step = 1.0;
  for (int round = 0; round < 20; ++round) {
    MalaChain pilot(target, SamplerState::at(Vector::Zero(1), SeedStream::derive(1, round)), step);
    for (int k = 0; k < 2000; ++k) pilot.advance();
    step *= std::exp(2.0 * (static_cast<double>(pilot.accepted()) / pilot.proposed() - 0.57));
  }
  MalaChain chain(target, SamplerState::at(Vector::Zero(1), SeedStream(6)), step);
  const int thin = 10;
  std::vector<double> all, thinned;
  all.reserve(1000000);
  thinned.reserve(1000000);
  for (int k = 0; k < 1000000 * thin; ++k) {
    chain.advance();
    if (k % thin == 0) thinned.push_back(chain.state().x(0));
    if (k < 1000000) all.push_back(chain.state().x(0));
  }
  const double rate = static_cast<double>(chain.accepted()) / chain.proposed();
  CHECK(rate > 0.45);
  CHECK(rate < 0.7);

  const Summary s = summarize(all);
  CHECK(std::abs(s.mean) < 3.0 * s.se_mean);
  // Variance via the batch means of x².
  std::vector<double> squares(all.size());
  std::transform(all.begin(), all.end(), squares.begin(), [](double x) { return x * x; });
  const Summary sq = summarize(squares);
  CHECK(std::abs(sq.mean - 1.0) < 3.0 * sq.se_mean);

  // Equiprobable 20-bin chi-squared on the thinned chain.
  const boost::math::normal normal;
  std::vector<double> edges;
  for (int b = 1; b < 20; ++b) edges.push_back(boost::math::quantile(normal, b / 20.0));
  std::vector<long> counts(20, 0);
  for (double x : thinned) ++counts[static_cast<std::size_t>(std::upper_bound(edges.begin(), edges.end(), x) - edges.begin())];
  const double expected = static_cast<double>(thinned.size()) / 20.0;
  double chi2 = 0.0;
  for (long c : counts) chi2 += (c - expected) * (c - expected) / expected;
  CHECK(oracle::chi_squared_sf(chi2, 19.0) > 0.01);
}

TEST_CASE("MALA with a preconditioner keeps the target") {
  std::mt19937_64 rng(7);
  const NaturalParams base = gen::natural(rng, Family::full, 2);
  const Gaussian g = moments(base);
  const Matrix chol = Eigen::LLT<Matrix>(g.cov).matrixL();
  MalaChain chain(carrier_only(base), SamplerState::at(g.mean, SeedStream(8)), 0.8, chol);
  std::vector<double> xs;
  for (int k = 0; k < 400000; ++k) {
    chain.advance();
    xs.push_back(chain.state().x(0));
  }
  const Summary s = summarize(xs);
  CHECK(std::abs(s.mean - g.mean(0)) < 4.0 * s.se_mean);
  CHECK(s.var == doctest::Approx(g.cov(0, 0)).epsilon(0.03));
}

TEST_CASE("exact Gaussian kernel draws from the tilted distribution") {
  std::mt19937_64 rng(9);
  auto shard = linear_shard(rng, 20, 2, 0.5);
  const TiltedTarget target{gen::natural(rng, Family::full, 2), 0.5, shard};
  const Gaussian truth = moments(exact_tilted_natural(target));
  SamplerState s = SamplerState::at(Vector::Zero(2), SeedStream(10));
  const int n = 100000;
  Vector sum = Vector::Zero(2);
  Matrix outer = Matrix::Zero(2, 2);
  for (int k = 0; k < n; ++k) {
    s = exact_gaussian_step(s, target).state;
    sum += s.x;
    outer += s.x * s.x.transpose();
  }
  const Vector mean = sum / n;
  const Matrix cov = outer / n - mean * mean.transpose();
  for (Index j = 0; j < 2; ++j) {
    CHECK(std::abs(mean(j) - truth.mean(j)) < 4.0 * std::sqrt(truth.cov(j, j) / n));
    // Var of a sample variance is 2σ⁴/n.
    CHECK(std::abs(cov(j, j) - truth.cov(j, j)) < 4.0 * std::sqrt(2.0 / n) * truth.cov(j, j));
  }
  const double cov_se = std::sqrt((truth.cov(0, 0) * truth.cov(1, 1) + truth.cov(0, 1) * truth.cov(0, 1)) / n);
  CHECK(std::abs(cov(0, 1) - truth.cov(0, 1)) < 4.0 * cov_se);
}

TEST_CASE("exact Gaussian kernel edge cases") {
  const TiltedTarget tight = carrier_only(nat1(3e12, -1e12));
  SamplerState s = SamplerState::at(Vector::Zero(1), SeedStream(11));
  for (int k = 0; k < 100; ++k) {
    s = exact_gaussian_step(s, tight).state;
    CHECK(std::abs(s.x(0) - 3.0) < 1e-5);
  }
  const SamplerState a = SamplerState::at(Vector::Zero(1), SeedStream(12));
  CHECK(exact_gaussian_step(a, tight).state.x == exact_gaussian_step(a, tight).state.x);

  const ModelSpec spec{ModelKind::logistic, 1, nat1(0, -1), 1.0};
  auto shard = std::make_shared<const ShardLikelihood>(spec, RowMatrix::Ones(2, 1), Vector::Ones(2));
  const TiltedTarget logistic{nat1(0, -1), 1.0, shard};
  CHECK(error_of([&] { exact_gaussian_step(a, logistic); }) == Errc::unsupported_model);
}

TEST_CASE("shift_state examples") {
  const Vector x = Vector::Constant(1, 1.0);
  CHECK(shift_state(x, nat1(0, -1), nat1(0, -1)) == x);
  const NaturalParams to = natural_from_moments(Gaussian{Family::diag, Vector::Constant(1, 2.0), Matrix::Constant(1, 1, 4.0)});
  CHECK(shift_state(x, nat1(0, -1), to)(0) == doctest::Approx(4.0).epsilon(1e-15));
  CHECK(error_of([&] { shift_state(x, nat1(0, 1), to); }) == Errc::invalid_natural_domain);
}

TEST_CASE("shift_state is invertible") {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    const Family fam = trial % 2 == 0 ? Family::diag : Family::full;
    const Index d = 1 + trial % 5;
    const NaturalParams a = gen::natural(rng, fam, d);
    const NaturalParams b = gen::natural(rng, fam, d);
    const Vector x = gen::normals(rng, d, 3.0);
    const Vector back = shift_state(shift_state(x, a, b), b, a);
    CHECK((back - x).cwiseAbs().maxCoeff() <= 1e-9 * std::max(1.0, x.cwiseAbs().maxCoeff()));
  }
}

TEST_CASE("shifted draws follow the new Gaussian") {
  std::mt19937_64 rng(13);
  for (Family fam : {Family::diag, Family::full}) {
    const NaturalParams from = gen::natural(rng, fam, 3);
    const NaturalParams to = gen::natural(rng, fam, 3);
    const Gaussian target = moments(to);
    SeedStream stream(21);
    std::vector<std::vector<double>> cols(3);
    for (int k = 0; k < 100000; ++k) {
      const Vector y = shift_state(sample_exact(from, stream), from, to);
      for (Index j = 0; j < 3; ++j) cols[static_cast<std::size_t>(j)].push_back(y(j));
    }
    for (Index j = 0; j < 3; ++j) {
      const double var = fam == Family::diag ? target.cov(j, 0) : target.cov(j, j);
      const double d = oracle::ks_statistic(cols[static_cast<std::size_t>(j)],
                                            [&](double v) { return oracle::normal_cdf(v, target.mean(j), var); });
      CHECK(oracle::ks_p_value(d, 100000) > 0.01);
    }
  }
}

TEST_CASE("shift after a cavity change needs no burn-in at the fixed point") {
  // Conjugate site at its exact factor: cavity + λ is the tilted distribution.
  std::mt19937_64 rng(14);
  auto shard = linear_shard(rng, 10, 2, 1.0);
  const NaturalParams factor = linear_likelihood_factor(shard->spec(), shard->covariates(), shard->responses()).natural;
  const NaturalParams cav_old = gen::natural(rng, Family::full, 2);
  const NaturalParams cav_new = gen::natural(rng, Family::full, 2);
  const TiltedTarget old_target{cav_old, 1.0, shard};
  const TiltedTarget new_target{cav_new, 1.0, shard};
  const MeanParams exact_new = exact_tilted_moments_linear(*shard, cav_new, 1.0);
  const Gaussian truth = moments(exact_tilted_natural(new_target));

  SamplerState s = SamplerState::at(Vector::Zero(2), SeedStream(15));
  const int n = 50000;
  SufficientStats avg = SufficientStats::zeros(Family::full, 2);
  std::vector<double> first;
  for (int k = 0; k < n; ++k) {
    s = exact_gaussian_step(s, old_target).state;
    const Vector y = shift_state(s.x, cav_old + factor, cav_new + factor);
    avg += (1.0 / n) * suff_stats(y, Family::full);
    first.push_back(y(0));
  }
  const std::vector<MeanParams> tilted{avg};
  const double residual = fixed_point_residual(to_natural(exact_new), tilted);
  CHECK(residual < 6.0 * std::sqrt(truth.cov.maxCoeff() / n) * std::max(1.0, truth.mean.cwiseAbs().maxCoeff()));
  const double d = oracle::ks_statistic(first, [&](double v) { return oracle::normal_cdf(v, truth.mean(0), truth.cov(0, 0)); });
  CHECK(oracle::ks_p_value(d, first.size()) > 0.01);
}

TEST_CASE("kernel estimates average the sufficient statistics") {
  std::mt19937_64 rng(15);
  auto shard = linear_shard(rng, 30, 2, 1.0);
  const TiltedTarget target{gen::natural(rng, Family::full, 2), 1.0, shard};
  const SamplerState start = SamplerState::at(Vector::Zero(2), SeedStream(16));

  SgldConfig cfg;
  cfg.minibatch_size = 10;
  const SgldKernel sgld(cfg);
  SamplerState s = start;
  KernelCounters counters;
  const SufficientStats est = sgld.estimate(s, target, 4, Family::diag, counters);
  SamplerState manual = start;
  SufficientStats sum = SufficientStats::zeros(Family::diag, 2);
  for (int k = 0; k < 4; ++k) {
    manual = sgld_step(manual, target, cfg).state;
    sum += suff_stats(manual.x, Family::diag);
  }
  CHECK(bitwise_equal(manual, s));
  CHECK((est.first() - 0.25 * sum.first()).norm() < 1e-14);
  CHECK((est.second() - 0.25 * sum.second()).norm() < 1e-14);
  CHECK(counters.steps == 4);
  CHECK(s.t == 4);

  const ExactMomentKernel exact;
  SamplerState e = start;
  KernelCounters ec;
  const SufficientStats m = exact.estimate(e, target, 3, Family::full, ec);
  CHECK(m == exact_tilted_moments_linear(*shard, target.base, 1.0));
  CHECK(ec.steps == 3);
  CHECK(e.t == 3);
  CHECK(e.x == start.x);

  const MalaKernel mala(0.3);
  SamplerState m1 = start, m2 = start;
  KernelCounters c1, c2;
  CHECK(mala.estimate(m1, target, 5, Family::full, c1) == mala.estimate(m2, target, 5, Family::full, c2));
  CHECK(bitwise_equal(m1, m2));
  CHECK(c1.steps == 5);
  CHECK(error_of([&] { sgld.estimate(s, target, 0, Family::diag, counters); }) == Errc::validation_error);
}

}
