#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "snep/harness.hpp"
#include "snep/trace.hpp"

namespace {

constexpr const char* kOutputEnv = "SNEP_OUTPUT_DIR";

enum Exit { ok = 0, validation = 1, runtime = 2, diagnostic = 3 };

std::string output_dir(const snep::ExperimentConfig& cfg) {
  if (const char* env = std::getenv(kOutputEnv); env && *env) return env;
  return cfg.output;
}

void print_metrics(const std::map<std::string, double>& metrics) {
  for (const auto& [name, value] : metrics) std::printf("%-24s %.10g\n", name.c_str(), value);
}

int exit_code(const snep::Error& e) {
  switch (e.code()) {
    case snep::Errc::parse_error:
    case snep::Errc::validation_error: return validation;
    case snep::Errc::diagnostic_failure: return diagnostic;
    default: return runtime;
  }
}

int cmd_run(const std::string& config_path) {
  const auto cfg = snep::parse_config(config_path);
  const auto dir = output_dir(cfg);
  const auto summary = snep::run_experiment(cfg, dir);
  for (const auto& t : summary.traces) std::printf("trace %s\n", t.c_str());
  if (!summary.posterior_path.empty()) std::printf("posterior %s\n", summary.posterior_path.c_str());
  print_metrics(summary.final_metrics);
  return ok;
}

int cmd_generate(const std::string& config_path) {
  const auto cfg = snep::parse_config(config_path);
  const auto dir = output_dir(cfg);
  std::filesystem::create_directories(dir);
  const auto path = (std::filesystem::path(dir) / "dataset.psds").string();
  snep::write_dataset(path, snep::make_dataset(cfg));
  std::printf("dataset %s\n", path.c_str());
  return ok;
}

int cmd_reference(const std::string& config_path) {
  auto cfg = snep::parse_config(config_path);
  cfg.algorithm = snep::AlgorithmKind::reference_mala;
  const auto summary = snep::run_experiment(cfg, output_dir(cfg));
  std::printf("reference %s\n", summary.posterior_path.c_str());
  print_metrics(summary.final_metrics);
  return ok;
}

int cmd_report(const std::string& trace_path) {
  print_metrics(snep::final_metrics(snep::read_trace(trace_path)));
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Distributed Bayesian learning with stochastic natural-gradient EP"};
  app.require_subcommand(1);
  std::string path;
  auto* run = app.add_subcommand("run", "run the experiment described by a config file");
  run->add_option("config", path, "config file")->required();
  auto* gen = app.add_subcommand("generate-data", "write the configured synthetic dataset");
  gen->add_option("config", path, "config file")->required();
  auto* ref = app.add_subcommand("reference", "compute the MALA reference posterior");
  ref->add_option("config", path, "config file")->required();
  auto* rep = app.add_subcommand("report", "print the final metrics of a trace");
  rep->add_option("trace", path, "trace CSV")->required();
  app.footer(std::string("Environment: ") + kOutputEnv + " overrides the output directory.");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? ok : validation;
  }

  try {
    if (*run) return cmd_run(path);
    if (*gen) return cmd_generate(path);
    if (*ref) return cmd_reference(path);
    if (*rep) return cmd_report(path);
  } catch (const snep::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return runtime;
  }
  return runtime;
}
