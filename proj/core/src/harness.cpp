#include "snep/harness.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>

namespace snep {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kRhatThreshold = 1.01;

// −∇² log posterior for the full data set.
Matrix neg_hessian(const ModelSpec& spec, const Dataset& data, const Vector& x,
                   const Matrix& prior_precision) {
  Matrix h = prior_precision;
  const RowMatrix& z = data.covariates;
  if (spec.kind == ModelKind::linear_gaussian) {
    h.noalias() += z.transpose() * z / spec.noise_variance;
    return h;
  }
  const Vector logits = z * x;
  Vector w(logits.size());
  for (Index c = 0; c < logits.size(); ++c) {
    const double p = sigmoid(std::clamp(logits(c), -kLogitClamp, kLogitClamp));
    w(c) = p * (1.0 - p);
  }
  h.noalias() += z.transpose() * w.asDiagonal() * z;
  return h;
}

Vector newton_map(const TiltedTarget& target, const ModelSpec& spec, const Dataset& data,
                  const Matrix& prior_precision) {
  Vector x = Vector::Zero(spec.dim);
  for (int it = 0; it < 200; ++it) {
    const LogLik cur = target.log_density_and_grad(x);
    const Matrix h = neg_hessian(spec, data, x, prior_precision);
    const Vector step = h.llt().solve(cur.grad);
    double t = 1.0;
    while (t > 1e-10 && !(target.log_density(x + t * step) >= cur.value)) t *= 0.5;
    x += t * step;
    if ((t * step).lpNorm<Eigen::Infinity>() < 1e-12) break;
  }
  return x;
}

TraceDetail detail_of(TraceLevel level) {
  return {level == TraceLevel::exchanges || level == TraceLevel::all,
          level == TraceLevel::outer || level == TraceLevel::all};
}

Vector batch_mean_std_error(const std::vector<Matrix>& chains) {
  const Index d = chains.front().cols();
  const Index n = chains.front().rows();
  const Index batches = std::min<Index>(50, n);
  const Index size = n / batches;
  std::vector<Vector> means;
  for (const Matrix& c : chains) {
    for (Index b = 0; b < batches; ++b) {
      means.push_back(c.middleRows(b * size, size).colwise().mean().transpose());
    }
  }
  Vector mean = Vector::Zero(d);
  for (const auto& m : means) mean += m;
  mean /= static_cast<double>(means.size());
  Vector var = Vector::Zero(d);
  for (const auto& m : means) var += (m - mean).cwiseAbs2();
  var /= static_cast<double>(means.size() - 1);
  return (var / static_cast<double>(means.size())).cwiseSqrt();
}

}  // namespace

double metric_rmse(const Vector& probs, const Vector& labels) {
  if (probs.size() != labels.size()) throw Error(Errc::dimension_mismatch, "probs and labels differ in length");
  if (probs.size() == 0) throw Error(Errc::validation_error, "no predictions");
  return std::sqrt((probs - labels).squaredNorm() / static_cast<double>(probs.size()));
}

double metric_rel_mean_diff(const Vector& estimate, const Vector& reference) {
  if (estimate.size() != reference.size()) throw Error(Errc::dimension_mismatch, "mean vectors differ in length");
  const double norm = reference.norm();
  if (norm == 0.0) throw Error(Errc::zero_reference, "reference mean is zero");
  return (estimate - reference).norm() / norm;
}

std::optional<Vector> posterior_mean(const NaturalParams& theta) {
  if (!is_valid(theta)) return std::nullopt;
  return moments(theta).mean;
}

Dataset make_dataset(const ExperimentConfig& cfg) {
  if (!cfg.data_path.empty()) {
    Dataset data = read_dataset(cfg.data_path);
    if (data.kind != cfg.model) throw Error(Errc::validation_error, "data_path: model kind differs from config");
    if (data.size() != cfg.n_points || data.dim() != cfg.dim) {
      throw Error(Errc::validation_error, "data_path: n_points or dim differs from config");
    }
    return data;
  }
  if (cfg.model == ModelKind::logistic) return generate_logistic_data(cfg.n_points, cfg.dim, cfg.seed);
  return generate_linear_data(cfg.n_points, cfg.dim, cfg.seed, cfg.noise_variance);
}

Problem build_problem(const ExperimentConfig& cfg) {
  validate_config(cfg);
  Problem p;
  p.data = make_dataset(cfg);
  p.spec = ModelSpec{cfg.model, cfg.dim, isotropic_prior(cfg.family, cfg.dim, cfg.prior_variance),
                     cfg.noise_variance};
  const ShardAssignment shards =
      assign_shards(cfg.n_points, static_cast<std::size_t>(cfg.n_workers), cfg.seed);
  for (const auto& idx : shards) p.shards.push_back(std::make_shared<ShardLikelihood>(p.spec, p.data, idx));
  if (cfg.model == ModelKind::linear_gaussian) {
    p.reference_mean = moments(exact_linear_posterior(p.spec, p.data)).mean;
  } else if (!cfg.reference_path.empty()) {
    const NaturalParams ref = read_flat_params(cfg.reference_path);
    if (ref.dim() != cfg.dim) throw Error(Errc::validation_error, "reference_path: dimension differs");
    p.reference_mean = moments(ref).mean;
  }
  return p;
}

std::shared_ptr<const TiltedKernel> make_kernel(const ExperimentConfig& cfg) {
  switch (cfg.kernel) {
    case KernelKind::sgld: {
      SgldConfig s;
      s.eps = cfg.sgld_eps;
      s.beta_precond = cfg.sgld_beta;
      s.delta = cfg.sgld_delta;
      s.noise_cap = cfg.sgld_noise_cap;
      s.minibatch_size = static_cast<std::size_t>(cfg.minibatch_size);
      s.debias = cfg.debias;
      s.adaptive = cfg.sgld_adaptive;
      return std::make_shared<SgldKernel>(s);
    }
    case KernelKind::mala: return std::make_shared<MalaKernel>(cfg.mala_step);
    case KernelKind::exact_gaussian: return std::make_shared<ExactGaussianKernel>();
    case KernelKind::exact_moments: return std::make_shared<ExactMomentKernel>();
  }
  throw Error(Errc::validation_error, "kernel: unknown");
}

SnepConfig make_snep_config(const ExperimentConfig& cfg) {
  SnepConfig s;
  s.step = StepSchedule{cfg.eps_schedule, cfg.eps, cfg.eps_t0};
  s.n_outer = static_cast<int>(cfg.n_outer);
  s.n_sync = static_cast<int>(cfg.n_sync);
  s.min_variance = cfg.min_variance;
  s.beta_mode = cfg.beta_mode;
  s.beta = cfg.beta;
  s.samples_per_iter = static_cast<int>(cfg.samples_per_iter);
  s.site_init_variance = cfg.site_init_variance;
  return s;
}

SimulationSetup make_setup(const ExperimentConfig& cfg, const Problem& problem, std::uint64_t seed) {
  SimulationSetup s;
  s.theta0 = problem.spec.prior;
  s.shards = problem.shards;
  s.snep = make_snep_config(cfg);
  s.algorithm = cfg.algorithm == AlgorithmKind::sms ? Algorithm::sms : Algorithm::snep;
  s.sms_alpha = cfg.sms_alpha;
  s.kernel = make_kernel(cfg);
  s.max_worker_iters = cfg.max_worker_iters;
  s.seed = seed;
  s.scheduler = SchedulerConfig{cfg.scheduler, cfg.delay};
  s.eval_every = cfg.eval_every;
  s.detail = detail_of(cfg.trace_detail);
  return s;
}

RunOutcome run_once(const ExperimentConfig& cfg, const Problem& problem, std::uint64_t seed,
                    TraceSink& sink) {
  const SimulationSetup setup = make_setup(cfg, problem, seed);
  const bool logistic = problem.spec.kind == ModelKind::logistic;
  auto evaluate = [&](const NaturalParams& theta, double& rel, double& rmse) {
    rel = kNaN;
    rmse = kNaN;
    const auto m = posterior_mean(theta);
    if (!m) return false;
    if (problem.reference_mean) rel = metric_rel_mean_diff(*m, *problem.reference_mean);
    if (logistic) rmse = metric_rmse(predict_probs(*m, problem.data.covariates), problem.data.responses);
    return true;
  };
  const Observer observer = [&](const NaturalParams& theta, double time, long absorbed, TraceSink& out) {
    double rel = 0.0;
    double rmse = 0.0;
    if (!evaluate(theta, rel, rmse)) {
      out.emit({time, TraceEvent::metric, -1, absorbed, "posterior-invalid", 1.0});
      return;
    }
    if (problem.reference_mean) out.emit({time, TraceEvent::metric, -1, absorbed, "rel-mean-diff", rel});
    if (logistic) out.emit({time, TraceEvent::metric, -1, absorbed, "rmse", rmse});
  };

  RunOutcome out;
  out.sim = run_simulation(setup, sink, observer);
  out.theta_posterior = out.sim.server.theta_posterior;
  evaluate(out.theta_posterior, out.rel_mean_diff, out.rmse);

  if (!logistic && setup.algorithm == Algorithm::snep && is_valid(out.theta_posterior)) {
    std::vector<MeanParams> tilted;
    bool ok = true;
    for (const auto& w : out.sim.workers) {
      const double tilt = 1.0 / w.site.beta;
      const NaturalParams base = out.theta_posterior - tilt * w.site.lambda;
      if (!is_valid(base)) {
        ok = false;
        break;
      }
      tilted.push_back(exact_tilted_moments_linear(*w.shard, base, tilt));
    }
    const double residual = ok ? fixed_point_residual(out.theta_posterior, tilted) : kNaN;
    sink.emit({static_cast<double>(out.sim.ticks), TraceEvent::metric, -1, out.sim.server.absorbed,
               "fixed-point-residual", residual});
  }
  sink.flush();
  return out;
}

Vector split_rhat(const std::vector<Matrix>& chains) {
  if (chains.size() < 1) throw Error(Errc::validation_error, "no chains");
  const Index n = chains.front().rows() / 2;
  const Index d = chains.front().cols();
  if (n < 2) throw Error(Errc::validation_error, "chains are too short for split R-hat");
  std::vector<Matrix> halves;
  for (const Matrix& c : chains) {
    if (c.cols() != d || c.rows() / 2 != n) throw Error(Errc::dimension_mismatch, "chains differ in shape");
    halves.push_back(c.topRows(n));
    halves.push_back(c.middleRows(n, n));
  }
  const auto m = static_cast<double>(halves.size());
  const auto nn = static_cast<double>(n);
  Vector out(d);
  for (Index j = 0; j < d; ++j) {
    Vector means(halves.size());
    double w = 0.0;
    for (std::size_t k = 0; k < halves.size(); ++k) {
      const auto col = halves[k].col(j);
      means(static_cast<Index>(k)) = col.mean();
      w += (col.array() - col.mean()).square().sum() / (nn - 1.0);
    }
    w /= m;
    const double b = nn * (means.array() - means.mean()).square().sum() / (m - 1.0);
    const double var_plus = (nn - 1.0) / nn * w + b / nn;
    out(j) = std::sqrt(var_plus / w);
  }
  return out;
}

ReferenceResult reference_posterior(const ExperimentConfig& cfg, const Dataset& data) {
  validate_config(cfg);
  const Index d = data.dim();
  ModelSpec spec{data.kind, d, isotropic_prior(Family::full, d, cfg.prior_variance), cfg.noise_variance};
  auto full = std::make_shared<ShardLikelihood>(spec, data.covariates, data.responses);
  const TiltedTarget target{spec.prior, 1.0, full};
  const Matrix prior_precision = -spec.prior.second();

  ReferenceResult r;
  r.map = newton_map(target, spec, data, prior_precision);
  const Matrix laplace_cov = neg_hessian(spec, data, r.map, prior_precision).inverse();
  const Matrix chol = Eigen::LLT<Matrix>(laplace_cov).matrixL();

  // Pilot run from the mode: aim for acceptance in [0.5, 0.65].
  double step = 0.5;
  {
    MalaChain pilot(target, SamplerState::at(r.map, SeedStream::derive(cfg.seed, 0x7000)), step, chol);
    for (int block = 0; block < 40; ++block) {
      pilot.reset_counts();
      for (int k = 0; k < 400; ++k) pilot.advance();
      const double rate = static_cast<double>(pilot.accepted()) / static_cast<double>(pilot.proposed());
      if (rate >= 0.5 && rate <= 0.65) break;
      step *= std::exp(2.0 * (rate - 0.575));
      pilot.set_step(step);
    }
  }
  r.step = step;

  std::vector<Matrix> chains;
  long accepted = 0;
  long proposed = 0;
  for (long c = 0; c < cfg.reference_chains; ++c) {
    SeedStream rng = SeedStream::derive(cfg.seed, 0x7100 + static_cast<std::uint64_t>(c));
    Vector x0;
    switch (cfg.reference_init) {
      case ReferenceInit::laplace: {
        Vector z(d);
        for (Index j = 0; j < d; ++j) z(j) = rng.normal();
        x0 = r.map + 2.0 * chol * z;
        break;
      }
      case ReferenceInit::zero: x0 = Vector::Zero(d); break;
      case ReferenceInit::x_star: x0 = data.meta.x_star; break;
    }
    MalaChain chain(target, SamplerState::at(x0, rng), step, chol);
    for (long k = 0; k < cfg.reference_burnin; ++k) chain.advance();
    chain.reset_counts();
    Matrix samples(cfg.reference_iters, d);
    for (long k = 0; k < cfg.reference_iters; ++k) {
      chain.advance();
      samples.row(k) = chain.state().x.transpose();
    }
    accepted += chain.accepted();
    proposed += chain.proposed();
    chains.push_back(std::move(samples));
  }
  r.accept_rate = static_cast<double>(accepted) / static_cast<double>(proposed);
  r.rhat = split_rhat(chains);
  r.std_error = batch_mean_std_error(chains);

  r.mean = Vector::Zero(d);
  long total = 0;
  for (const auto& c : chains) {
    r.mean += c.colwise().sum().transpose();
    total += c.rows();
  }
  r.mean /= static_cast<double>(total);
  r.cov = Matrix::Zero(d, d);
  for (const auto& c : chains) {
    const Matrix centred = c.rowwise() - r.mean.transpose();
    r.cov.noalias() += centred.transpose() * centred;
  }
  r.cov /= static_cast<double>(total - 1);
  r.fit = natural_from_moments(Gaussian{Family::full, r.mean, r.cov});
  r.accepted = r.rhat.maxCoeff() < kRhatThreshold;
  return r;
}

std::vector<TraceRecord> average_traces(const std::vector<std::vector<TraceRecord>>& runs) {
  if (runs.empty()) return {};
  // Per run: metric name → its server-side records in order.
  std::vector<std::map<std::string, std::vector<const TraceRecord*>>> by_name(runs.size());
  for (std::size_t r = 0; r < runs.size(); ++r) {
    for (const auto& rec : runs[r]) {
      if (rec.event == TraceEvent::metric && rec.worker == -1) by_name[r][rec.metric].push_back(&rec);
    }
  }
  std::vector<TraceRecord> out;
  std::map<std::string, std::size_t> seen;
  for (const auto& rec : runs.front()) {
    if (rec.event != TraceEvent::metric || rec.worker != -1) continue;
    const std::size_t idx = seen[rec.metric]++;
    bool everywhere = true;
    double time = 0.0;
    double value = 0.0;
    for (const auto& named : by_name) {
      const auto it = named.find(rec.metric);
      if (it == named.end() || it->second.size() <= idx) {
        everywhere = false;
        break;
      }
      time += it->second[idx]->time_s;
      value += it->second[idx]->value;
    }
    if (!everywhere) continue;
    const auto k = static_cast<double>(runs.size());
    out.push_back({time / k, TraceEvent::metric, -1, rec.iter, rec.metric, value / k});
  }
  return out;
}

std::map<std::string, double> final_metrics(const std::vector<TraceRecord>& trace) {
  std::map<std::string, double> out;
  double skip_events = 0.0;
  for (const auto& r : trace) {
    if (r.event == TraceEvent::skip) ++skip_events;
    if (r.event != TraceEvent::metric) continue;
    const std::string key = r.worker < 0 ? r.metric : r.metric + "[" + std::to_string(r.worker) + "]";
    out[key] = r.value;
  }
  out["skip-events"] = skip_events;
  return out;
}

ExperimentSummary run_experiment(const ExperimentConfig& cfg, const std::string& out_dir) {
  validate_config(cfg);
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const auto path = [&](const std::string& name) { return (fs::path(out_dir) / name).string(); };
  ExperimentSummary summary;

  if (cfg.algorithm == AlgorithmKind::exact_oracle) {
    const Problem problem = build_problem(cfg);
    const NaturalParams exact = exact_linear_posterior(problem.spec, problem.data);
    const double rel = metric_rel_mean_diff(moments(exact).mean, *problem.reference_mean);
    summary.posterior_path = path("posterior.psfp");
    write_flat_params(summary.posterior_path, exact);
    summary.traces.push_back(path("trace.csv"));
    CsvTraceWriter writer(summary.traces.back());
    writer.emit({0.0, TraceEvent::metric, -1, 0, "rel-mean-diff", rel});
    summary.final_metrics["rel-mean-diff"] = rel;
    return summary;
  }

  if (cfg.algorithm == AlgorithmKind::reference_mala) {
    const Dataset data = make_dataset(cfg);
    const ReferenceResult ref = reference_posterior(cfg, data);
    summary.traces.push_back(path("trace.csv"));
    {
      CsvTraceWriter writer(summary.traces.back());
      for (Index j = 0; j < ref.rhat.size(); ++j) {
        writer.emit({0.0, TraceEvent::metric, -1, j, "rhat", ref.rhat(j)});
        writer.emit({0.0, TraceEvent::metric, -1, j, "std-error", ref.std_error(j)});
        writer.emit({0.0, TraceEvent::metric, -1, j, "mean", ref.mean(j)});
      }
      writer.emit({0.0, TraceEvent::metric, -1, 0, "mala-step", ref.step});
      writer.emit({0.0, TraceEvent::metric, -1, 0, "accept-rate", ref.accept_rate});
      writer.emit({0.0, TraceEvent::metric, -1, 0, "rhat-max", ref.rhat.maxCoeff()});
    }
    summary.final_metrics["rhat-max"] = ref.rhat.maxCoeff();
    summary.final_metrics["accept-rate"] = ref.accept_rate;
    if (!ref.accepted) {
      write_flat_params(path("reference.rejected.psfp"), ref.fit);
      throw Error(Errc::diagnostic_failure,
                  "split R-hat " + std::to_string(ref.rhat.maxCoeff()) + " is not below 1.01");
    }
    summary.posterior_path = path("reference.psfp");
    write_flat_params(summary.posterior_path, ref.fit);
    return summary;
  }

  Problem problem = build_problem(cfg);
  if (!problem.reference_mean) {
    const ReferenceResult ref = reference_posterior(cfg, problem.data);
    if (!ref.accepted) {
      write_flat_params(path("reference.rejected.psfp"), ref.fit);
      throw Error(Errc::diagnostic_failure,
                  "reference split R-hat " + std::to_string(ref.rhat.maxCoeff()) + " is not below 1.01");
    }
    write_flat_params(path("reference.psfp"), ref.fit);
    problem.reference_mean = ref.mean;
  }

  const bool single = cfg.repeats == 1;
  std::vector<std::vector<TraceRecord>> traces;
  for (long k = 0; k < cfg.repeats; ++k) {
    const std::string suffix = single ? "" : "_run" + std::to_string(k);
    summary.traces.push_back(path("trace" + suffix + ".csv"));
    MemorySink memory;
    CsvTraceWriter writer(summary.traces.back());
    TeeSink tee({&writer, &memory});
    RunOutcome outcome = run_once(cfg, problem, cfg.seed + static_cast<std::uint64_t>(k), tee);
    const std::string posterior = path("posterior" + suffix + ".psfp");
    write_flat_params(posterior, outcome.theta_posterior);
    if (k == 0) summary.posterior_path = posterior;
    for (const auto& [name, value] : final_metrics(memory.records)) {
      summary.final_metrics[name] += value / static_cast<double>(cfg.repeats);
    }
    traces.push_back(std::move(memory.records));
    summary.runs.push_back(std::move(outcome));
  }
  if (!single) {
    summary.traces.push_back(path("trace.csv"));
    CsvTraceWriter writer(summary.traces.back());
    for (const auto& r : average_traces(traces)) writer.emit(r);
  }
  return summary;
}

}  // namespace snep
