#include <benchmark/benchmark.h>

#include <random>

#include "snep/harness.hpp"

using namespace snep;

namespace {

NaturalParams random_natural(Family fam, Index d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  Vector m(d);
  for (Index j = 0; j < d; ++j) m(j) = g(rng);
  if (fam == Family::diag) {
    Vector v = Vector::Constant(d, 0.5);
    return natural_from_moments(Gaussian{fam, m, v});
  }
  Matrix a(d, d);
  for (Index r = 0; r < d; ++r)
    for (Index c = 0; c < d; ++c) a(r, c) = g(rng);
  const Matrix cov = a * a.transpose() / static_cast<double>(d) + Matrix::Identity(d, d);
  return natural_from_moments(Gaussian{fam, m, cov});
}

Family family_of(const benchmark::State& state) { return state.range(0) == 0 ? Family::diag : Family::full; }

void BM_ToMean(benchmark::State& state) {
  const NaturalParams theta = random_natural(family_of(state), state.range(1), 1);
  for (auto _ : state) benchmark::DoNotOptimize(to_mean(theta));
}
BENCHMARK(BM_ToMean)->ArgsProduct({{0, 1}, {10, 50}});

void BM_ToNatural(benchmark::State& state) {
  const MeanParams mu = to_mean(random_natural(family_of(state), state.range(1), 2));
  for (auto _ : state) benchmark::DoNotOptimize(to_natural(mu));
}
BENCHMARK(BM_ToNatural)->ArgsProduct({{0, 1}, {10, 50}});

void BM_InnerUpdate(benchmark::State& state) {
  const Family fam = family_of(state);
  const Index d = state.range(1);
  const NaturalParams post = random_natural(fam, d, 3) + random_natural(fam, d, 4);
  const LikelihoodSite site = make_site(0, random_natural(fam, d, 4), post, 1.0);
  const MeanParams stat = to_mean(random_natural(fam, d, 5));
  for (auto _ : state) benchmark::DoNotOptimize(inner_update(site, stat, post, 0.01, 0.01));
}
BENCHMARK(BM_InnerUpdate)->ArgsProduct({{0, 1}, {10, 50}});

struct Logistic {
  Dataset data = generate_logistic_data(5000, 10, 1);
  ModelSpec spec{ModelKind::logistic, 10, isotropic_prior(Family::full, 10, 10.0), 1.0};
  std::shared_ptr<const ShardLikelihood> full = std::make_shared<ShardLikelihood>(spec, data.covariates, data.responses);
};

const Logistic& logistic() {
  static const Logistic l;
  return l;
}

void BM_SgldStep(benchmark::State& state) {
  const auto& l = logistic();
  const TiltedTarget target{l.spec.prior, 1.0, l.full};
  SgldConfig cfg;
  cfg.minibatch_size = static_cast<std::size_t>(state.range(0));
  SamplerState s = SamplerState::at(Vector::Constant(10, 0.1), SeedStream(1));
  for (auto _ : state) s = sgld_step(s, target, cfg).state;
  benchmark::DoNotOptimize(s.x);
}
BENCHMARK(BM_SgldStep)->Arg(100)->Arg(1000);

void BM_MalaFullData(benchmark::State& state) {
  const auto& l = logistic();
  const TiltedTarget target{l.spec.prior, 1.0, l.full};
  MalaChain chain(target, SamplerState::at(Vector::Zero(10), SeedStream(2)), 0.05);
  for (auto _ : state) chain.advance();
  benchmark::DoNotOptimize(chain.state().x);
}
BENCHMARK(BM_MalaFullData);

void BM_WireRoundTrip(benchmark::State& state) {
  const NaturalParams theta = random_natural(family_of(state), state.range(1), 6);
  for (auto _ : state) {
    const auto bytes = encode_message(DeltaMessage{1, theta});
    benchmark::DoNotOptimize(decode_message(bytes, theta.family(), theta.dim()));
  }
}
BENCHMARK(BM_WireRoundTrip)->ArgsProduct({{0, 1}, {10, 100}});

// Whole runs through the harness: logistic desk-scale problem, short budget.
void BM_SimulationLogistic(benchmark::State& state) {
  ExperimentConfig cfg;
  cfg.max_worker_iters = state.range(0);
  cfg.n_sync = 1;
  cfg.n_outer = 1;
  cfg.eval_every = 1000000;
  Problem problem = build_problem(cfg);
  problem.reference_mean = Vector::Ones(cfg.dim);
  for (auto _ : state) {
    MemorySink sink;
    benchmark::DoNotOptimize(run_once(cfg, problem, cfg.seed, sink));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0) * cfg.n_workers);
}
BENCHMARK(BM_SimulationLogistic)->Arg(1000)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
