#pragma once

// Experiment orchestration: config files, problem construction, metrics, the
// MALA reference posterior and the end-to-end run that writes traces.

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "snep/models.hpp"
#include "snep/runtime.hpp"

namespace snep {

enum class AlgorithmKind { snep, sms, reference_mala, exact_oracle };
enum class KernelKind { sgld, mala, exact_gaussian, exact_moments };
enum class ReferenceInit { laplace, zero, x_star };
enum class TraceLevel { none, exchanges, outer, all };

struct ExperimentConfig {
  ModelKind model = ModelKind::logistic;
  long n_points = 5000;
  long dim = 10;
  long n_workers = 3;
  AlgorithmKind algorithm = AlgorithmKind::snep;
  Family family = Family::full;
  BetaMode beta_mode = BetaMode::fixed;
  double beta = 1.0;
  double eps = 0.02;
  StepKind eps_schedule = StepKind::constant;
  double eps_t0 = 1000.0;
  KernelKind kernel = KernelKind::sgld;
  double sgld_eps = 1e-3;
  double sgld_beta = 0.999;
  double sgld_delta = 1e-8;
  std::optional<double> sgld_noise_cap;  // unset: the SGLD step size
  bool sgld_adaptive = true;
  Debias debias = Debias::adam;
  long minibatch_size = 100;
  double mala_step = 0.3;
  long samples_per_iter = 1;
  long n_sync = 10;
  long n_outer = 10;
  double min_variance = 0.01;
  double site_init_variance = 1.0;
  long max_worker_iters = 2000;
  long eval_every = 10;
  std::uint64_t seed = 1;
  SchedulerKind scheduler = SchedulerKind::deterministic;
  long delay = 0;
  std::string output = "out";
  double noise_variance = 1.0;
  double prior_variance = 10.0;
  double sms_alpha = 0.5;
  long repeats = 5;
  long reference_chains = 4;
  long reference_iters = 50000;
  long reference_burnin = 10000;
  ReferenceInit reference_init = ReferenceInit::laplace;
  std::string reference_path;
  std::string data_path;
  TraceLevel trace_detail = TraceLevel::none;

  double resolved_beta() const;
  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

/// Flat key=value text with # comments. Missing keys keep their defaults.
ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig parse_config(const std::string& path);
/// Every key, one per line, in a form parse_config_text reads back exactly.
std::string serialize_config(const ExperimentConfig& cfg);
/// Throws validation_error naming the offending field.
void validate_config(const ExperimentConfig& cfg);

double metric_rmse(const Vector& probs, const Vector& labels);
double metric_rel_mean_diff(const Vector& estimate, const Vector& reference);

struct Problem {
  Dataset data;
  ModelSpec spec;
  std::vector<std::shared_ptr<const ShardLikelihood>> shards;
  std::optional<Vector> reference_mean;
};

/// Loads or generates the dataset and shards it. The reference mean is the
/// exact posterior mean for the linear model, or read from reference_path.
Problem build_problem(const ExperimentConfig& cfg);
Dataset make_dataset(const ExperimentConfig& cfg);

std::shared_ptr<const TiltedKernel> make_kernel(const ExperimentConfig& cfg);
SnepConfig make_snep_config(const ExperimentConfig& cfg);
SimulationSetup make_setup(const ExperimentConfig& cfg, const Problem& problem, std::uint64_t seed);

struct RunOutcome {
  SimulationResult sim;
  NaturalParams theta_posterior;
  double rel_mean_diff = 0.0;  // NaN without a reference
  double rmse = 0.0;           // NaN for the linear model
};

/// One simulation; metric records go to sink.
RunOutcome run_once(const ExperimentConfig& cfg, const Problem& problem, std::uint64_t seed,
                    TraceSink& sink);

/// Posterior mean estimate held by θ_posterior, or nullopt if invalid.
std::optional<Vector> posterior_mean(const NaturalParams& theta);

struct ReferenceResult {
  Vector mean;
  Matrix cov;
  Vector rhat;        // split-chain potential scale reduction, per dimension
  Vector std_error;   // Monte Carlo standard error of the pooled mean
  double step = 0.0;  // tuned MALA step
  double accept_rate = 0.0;
  Vector map;
  bool accepted = false;
  NaturalParams fit;  // full Gaussian with the pooled mean and covariance
};

/// Full-data MALA preconditioned by a Laplace approximation; chains start from
/// the configured initialization and the step is tuned on a pilot run.
ReferenceResult reference_posterior(const ExperimentConfig& cfg, const Dataset& data);

/// Split-chain R̂ per dimension; each chain is n×d with n ≥ 4.
Vector split_rhat(const std::vector<Matrix>& chains);

struct ExperimentSummary {
  std::vector<std::string> traces;
  std::string posterior_path;
  std::map<std::string, double> final_metrics;  // averaged over repeats
  std::vector<RunOutcome> runs;
};

/// Runs the configured algorithm and writes traces and parameter files into
/// out_dir. Throws diagnostic_failure when the reference is rejected.
ExperimentSummary run_experiment(const ExperimentConfig& cfg, const std::string& out_dir);

/// Metric records averaged over runs by (metric, occurrence index); only
/// positions present in every run are kept.
std::vector<TraceRecord> average_traces(const std::vector<std::vector<TraceRecord>>& runs);

/// Final server-side value of every metric in a trace, plus skip totals.
std::map<std::string, double> final_metrics(const std::vector<TraceRecord>& trace);

}  // namespace snep
