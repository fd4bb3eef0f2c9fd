#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>
#include <utility>

#include "snep/harness.hpp"

namespace snep {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double to_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  errno = 0;
  const double out = std::strtod(v.c_str(), &end);
  if (v.empty() || *end != '\0' || errno == ERANGE) {
    throw Error(Errc::validation_error, key + ": expected a number, got '" + v + "'");
  }
  return out;
}

long to_long(const std::string& key, const std::string& v) {
  char* end = nullptr;
  errno = 0;
  const long long out = std::strtoll(v.c_str(), &end, 10);
  if (v.empty() || *end != '\0' || errno == ERANGE) {
    throw Error(Errc::validation_error, key + ": expected an integer, got '" + v + "'");
  }
  return static_cast<long>(out);
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw Error(Errc::validation_error, key + ": expected true or false, got '" + v + "'");
}

template <class E>
using Names = std::vector<std::pair<E, const char*>>;

template <class E>
E to_enum(const std::string& key, const std::string& v, const Names<E>& names) {
  for (const auto& [e, name] : names) {
    if (v == name) return e;
  }
  std::string allowed;
  for (const auto& [e, name] : names) allowed += std::string(allowed.empty() ? "" : "|") + name;
  throw Error(Errc::validation_error, key + ": expected " + allowed + ", got '" + v + "'");
}

template <class E>
std::string enum_name(E e, const Names<E>& names) {
  for (const auto& [x, name] : names) {
    if (x == e) return name;
  }
  return "?";
}

const Names<ModelKind> kModels{{ModelKind::logistic, "logistic"}, {ModelKind::linear_gaussian, "linear"}};
const Names<AlgorithmKind> kAlgorithms{{AlgorithmKind::snep, "snep"},
                                       {AlgorithmKind::sms, "sms"},
                                       {AlgorithmKind::reference_mala, "reference-mala"},
                                       {AlgorithmKind::exact_oracle, "exact-oracle"}};
const Names<Family> kFamilies{{Family::diag, "diag"}, {Family::full, "full"}};
const Names<BetaMode> kBetaModes{{BetaMode::fixed, "fixed"}, {BetaMode::one_over_n, "one-over-n"}};
const Names<StepKind> kSchedules{{StepKind::constant, "constant"}, {StepKind::inverse_t, "inverse-t"}};
const Names<KernelKind> kKernels{{KernelKind::sgld, "sgld"},
                                 {KernelKind::mala, "mala"},
                                 {KernelKind::exact_gaussian, "exact-gaussian"},
                                 {KernelKind::exact_moments, "exact-moments"}};
const Names<Debias> kDebias{{Debias::adam, "adam"}, {Debias::literal, "literal"}};
const Names<SchedulerKind> kSchedulers{{SchedulerKind::deterministic, "deterministic"},
                                       {SchedulerKind::threaded, "threaded"}};
const Names<ReferenceInit> kInits{{ReferenceInit::laplace, "laplace"},
                                  {ReferenceInit::zero, "zero"},
                                  {ReferenceInit::x_star, "x-star"}};
const Names<TraceLevel> kTraceLevels{{TraceLevel::none, "none"},
                                     {TraceLevel::exchanges, "exchanges"},
                                     {TraceLevel::outer, "outer"},
                                     {TraceLevel::all, "all"}};

struct Key {
  const char* name;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

#define SNEP_DOUBLE(field) \
  Key{#field, [](ExperimentConfig& c, const std::string& v) { c.field = to_double(#field, v); }, \
      [](const ExperimentConfig& c) { return fmt(c.field); }}
#define SNEP_LONG(field) \
  Key{#field, [](ExperimentConfig& c, const std::string& v) { c.field = to_long(#field, v); }, \
      [](const ExperimentConfig& c) { return std::to_string(c.field); }}
#define SNEP_ENUM(field, names) \
  Key{#field, [](ExperimentConfig& c, const std::string& v) { c.field = to_enum(#field, v, names); }, \
      [](const ExperimentConfig& c) { return enum_name(c.field, names); }}
#define SNEP_STRING(field) \
  Key{#field, [](ExperimentConfig& c, const std::string& v) { c.field = v; }, \
      [](const ExperimentConfig& c) { return c.field; }}

const std::vector<Key>& keys() {
  static const std::vector<Key> table = {
      SNEP_ENUM(model, kModels),
      SNEP_LONG(n_points),
      SNEP_LONG(dim),
      SNEP_LONG(n_workers),
      SNEP_ENUM(algorithm, kAlgorithms),
      SNEP_ENUM(family, kFamilies),
      SNEP_ENUM(beta_mode, kBetaModes),
      SNEP_DOUBLE(beta),
      SNEP_DOUBLE(eps),
      SNEP_ENUM(eps_schedule, kSchedules),
      SNEP_DOUBLE(eps_t0),
      SNEP_ENUM(kernel, kKernels),
      SNEP_DOUBLE(sgld_eps),
      SNEP_DOUBLE(sgld_beta),
      SNEP_DOUBLE(sgld_delta),
      Key{"sgld_noise_cap",
          [](ExperimentConfig& c, const std::string& v) {
            if (v == "default") {
              c.sgld_noise_cap.reset();
            } else {
              c.sgld_noise_cap = to_double("sgld_noise_cap", v);
            }
          },
          [](const ExperimentConfig& c) {
            return c.sgld_noise_cap ? fmt(*c.sgld_noise_cap) : std::string("default");
          }},
      Key{"sgld_adaptive",
          [](ExperimentConfig& c, const std::string& v) { c.sgld_adaptive = to_bool("sgld_adaptive", v); },
          [](const ExperimentConfig& c) { return std::string(c.sgld_adaptive ? "true" : "false"); }},
      SNEP_ENUM(debias, kDebias),
      SNEP_LONG(minibatch_size),
      SNEP_DOUBLE(mala_step),
      SNEP_LONG(samples_per_iter),
      SNEP_LONG(n_sync),
      SNEP_LONG(n_outer),
      SNEP_DOUBLE(min_variance),
      SNEP_DOUBLE(site_init_variance),
      SNEP_LONG(max_worker_iters),
      SNEP_LONG(eval_every),
      Key{"seed",
          [](ExperimentConfig& c, const std::string& v) {
            const long s = to_long("seed", v);
            if (s < 0) throw Error(Errc::validation_error, "seed: must be non-negative");
            c.seed = static_cast<std::uint64_t>(s);
          },
          [](const ExperimentConfig& c) { return std::to_string(c.seed); }},
      SNEP_ENUM(scheduler, kSchedulers),
      SNEP_LONG(delay),
      SNEP_STRING(output),
      SNEP_DOUBLE(noise_variance),
      SNEP_DOUBLE(prior_variance),
      SNEP_DOUBLE(sms_alpha),
      SNEP_LONG(repeats),
      SNEP_LONG(reference_chains),
      SNEP_LONG(reference_iters),
      SNEP_LONG(reference_burnin),
      SNEP_ENUM(reference_init, kInits),
      SNEP_STRING(reference_path),
      SNEP_STRING(data_path),
      SNEP_ENUM(trace_detail, kTraceLevels),
  };
  return table;
}

#undef SNEP_DOUBLE
#undef SNEP_LONG
#undef SNEP_ENUM
#undef SNEP_STRING

void require(bool ok, const char* field, const std::string& what) {
  if (!ok) throw Error(Errc::validation_error, std::string(field) + ": " + what);
}

}  // namespace

double ExperimentConfig::resolved_beta() const {
  return beta_mode == BetaMode::one_over_n ? 1.0 / static_cast<double>(n_workers) : beta;
}

void validate_config(const ExperimentConfig& c) {
  require(c.n_points > 0, "n_points", "must be positive");
  require(c.dim > 0, "dim", "must be positive");
  require(c.n_workers > 0, "n_workers", "must be positive");
  require(c.n_workers <= c.n_points, "n_workers", "cannot exceed n_points");
  require(c.beta > 0.0 && std::isfinite(c.beta), "beta", "must be positive");
  require(c.eps >= 0.0 && std::isfinite(c.eps), "eps", "must be non-negative");
  require(c.eps_t0 > 0.0, "eps_t0", "must be positive");
  require(c.sgld_eps > 0.0, "sgld_eps", "must be positive");
  require(c.sgld_beta >= 0.0 && c.sgld_beta < 1.0, "sgld_beta", "must lie in [0, 1)");
  require(c.sgld_delta >= 0.0, "sgld_delta", "must be non-negative");
  require(!c.sgld_noise_cap || *c.sgld_noise_cap >= 0.0, "sgld_noise_cap", "must be non-negative");
  require(c.minibatch_size > 0, "minibatch_size", "must be positive");
  require(c.mala_step > 0.0, "mala_step", "must be positive");
  require(c.samples_per_iter > 0, "samples_per_iter", "must be positive");
  require(c.n_sync > 0, "n_sync", "must be positive");
  require(c.n_outer > 0, "n_outer", "must be positive");
  require(c.min_variance >= 0.0, "min_variance", "must be non-negative");
  require(c.site_init_variance > 0.0, "site_init_variance", "must be positive");
  require(c.max_worker_iters > 0, "max_worker_iters", "must be positive");
  require(c.eval_every > 0, "eval_every", "must be positive");
  require(c.delay >= 0, "delay", "must be non-negative");
  require(!c.output.empty(), "output", "must not be empty");
  require(c.noise_variance > 0.0, "noise_variance", "must be positive");
  require(c.prior_variance > 0.0, "prior_variance", "must be positive");
  require(c.sms_alpha >= 0.0 && c.sms_alpha <= 1.0, "sms_alpha", "must lie in [0, 1]");
  require(c.repeats > 0, "repeats", "must be positive");
  require(c.reference_chains >= 2, "reference_chains", "at least two chains are needed");
  require(c.reference_iters >= 4, "reference_iters", "must be at least 4");
  require(c.reference_burnin >= 0, "reference_burnin", "must be non-negative");

  const bool exact_kernel = c.kernel == KernelKind::exact_gaussian || c.kernel == KernelKind::exact_moments;
  require(!exact_kernel || c.model == ModelKind::linear_gaussian, "kernel",
          "exact kernels need model=linear");
  require(c.algorithm != AlgorithmKind::exact_oracle || c.model == ModelKind::linear_gaussian,
          "algorithm", "exact-oracle needs model=linear");
  if (c.algorithm == AlgorithmKind::sms) {
    require(c.beta_mode == BetaMode::fixed && c.beta == 1.0, "beta", "sms runs with beta=1");
    require(c.scheduler == SchedulerKind::deterministic, "scheduler", "sms rounds are synchronous");
  }
  require(c.scheduler == SchedulerKind::deterministic || c.delay == 0, "delay",
          "only the deterministic scheduler simulates delays");
}

ExperimentConfig parse_config_text(const std::string& text) {
  ExperimentConfig cfg;
  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  std::vector<std::string> seen;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = "line " + std::to_string(line_no) + ": ";
    if (eq == std::string::npos) throw Error(Errc::parse_error, where + "expected key=value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const auto& table = keys();
    const auto it = std::find_if(table.begin(), table.end(), [&](const Key& k) { return key == k.name; });
    if (it == table.end()) throw Error(Errc::parse_error, where + "unknown key '" + key + "'");
    if (std::find(seen.begin(), seen.end(), key) != seen.end()) {
      throw Error(Errc::parse_error, where + "duplicate key '" + key + "'");
    }
    seen.push_back(key);
    it->set(cfg, value);
  }
  validate_config(cfg);
  return cfg;
}

ExperimentConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::io_error, "cannot read config " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

std::string serialize_config(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& k : keys()) {
    out += k.name;
    out += '=';
    out += k.get(cfg);
    out += '\n';
  }
  return out;
}

}  // namespace snep
