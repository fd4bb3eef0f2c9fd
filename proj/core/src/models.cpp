#include "snep/models.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "snep/bytes.hpp"

namespace snep {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

double clamp_logit(double t) { return std::clamp(t, -kLogitClamp, kLogitClamp); }

// log(1 + eᵘ) without overflow.
double softplus(double u) { return std::max(u, 0.0) + std::log1p(std::exp(-std::abs(u))); }

struct Covariates {
  Vector mu;
  Matrix p;
};

Covariates draw_covariate_law(Index dim, SeedStream& rng, const GeneratorOverrides& overrides) {
  Covariates law{Vector(dim), Matrix(dim, dim)};
  for (Index j = 0; j < dim; ++j) law.mu(j) = rng.uniform(0.0, 1.0);
  for (Index r = 0; r < dim; ++r) {
    for (Index c = 0; c < dim; ++c) law.p(r, c) = rng.uniform(-1.0, 1.0);
  }
  if (overrides.p) law.p = *overrides.p;
  return law;
}

Vector draw_weights(Index dim, SeedStream& rng, const GeneratorOverrides& overrides) {
  Vector x(dim);
  for (Index j = 0; j < dim; ++j) x(j) = std::sqrt(10.0) * rng.normal();
  if (overrides.x_star) x = *overrides.x_star;
  return x;
}

Dataset generate(ModelKind kind, Index n_points, Index dim, std::uint64_t seed,
                 double noise_variance, const GeneratorOverrides& overrides) {
  if (n_points < 1 || dim < 1) throw Error(Errc::validation_error, "n_points and dim must be >= 1");
  SeedStream rng = SeedStream::derive(seed, 0xda7a);
  Dataset data;
  data.kind = kind;
  const Covariates law = draw_covariate_law(dim, rng, overrides);
  data.meta.seed = seed;
  data.meta.mu = law.mu;
  data.meta.p = law.p;
  data.meta.x_star = draw_weights(dim, rng, overrides);
  data.meta.noise_variance = noise_variance;
  data.covariates.resize(n_points, dim);
  data.responses.resize(n_points);
  Vector xi(dim);
  const double noise_sd = std::sqrt(noise_variance);
  for (Index c = 0; c < n_points; ++c) {
    for (Index j = 0; j < dim; ++j) xi(j) = rng.normal();
    const Vector z = law.mu + law.p * xi;
    data.covariates.row(c) = z.transpose();
    const double logit = z.dot(data.meta.x_star);
    if (kind == ModelKind::logistic) {
      data.responses(c) = rng.uniform() < sigmoid(logit) ? 1.0 : 0.0;
    } else {
      data.responses(c) = logit + noise_sd * rng.normal();
    }
  }
  return data;
}

}  // namespace

const char* to_string(ModelKind kind) {
  return kind == ModelKind::logistic ? "logistic" : "linear";
}

NaturalParams isotropic_prior(Family family, Index dim, double variance) {
  if (!(variance > 0.0)) throw Error(Errc::validation_error, "prior variance must be positive");
  NaturalParams prior = NaturalParams::zeros(family, dim);
  if (family == Family::diag) {
    prior.second().setConstant(-1.0 / variance);
  } else {
    prior.second().diagonal().setConstant(-1.0 / variance);
  }
  return prior;
}

Dataset generate_logistic_data(Index n_points, Index dim, std::uint64_t seed,
                               const GeneratorOverrides& overrides) {
  return generate(ModelKind::logistic, n_points, dim, seed, 1.0, overrides);
}

Dataset generate_linear_data(Index n_points, Index dim, std::uint64_t seed, double noise_variance,
                             const GeneratorOverrides& overrides) {
  if (!(noise_variance > 0.0)) throw Error(Errc::validation_error, "noise_variance must be positive");
  return generate(ModelKind::linear_gaussian, n_points, dim, seed, noise_variance, overrides);
}

ShardAssignment assign_shards(Index n_points, std::size_t n_workers, std::uint64_t seed) {
  if (n_workers == 0) throw Error(Errc::validation_error, "n_workers must be positive");
  std::vector<std::size_t> perm(static_cast<std::size_t>(n_points));
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  SeedStream rng = SeedStream::derive(seed, 0x5a4d);
  std::shuffle(perm.begin(), perm.end(), rng.engine());
  ShardAssignment shards(n_workers);
  const std::size_t n = perm.size();
  for (std::size_t w = 0; w < n_workers; ++w) {
    const std::size_t begin = w * n / n_workers;
    const std::size_t end = (w + 1) * n / n_workers;
    shards[w].assign(perm.begin() + static_cast<std::ptrdiff_t>(begin),
                     perm.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return shards;
}

double sigmoid(double logit) {
  const double t = clamp_logit(logit);
  return t >= 0.0 ? 1.0 / (1.0 + std::exp(-t)) : std::exp(t) / (1.0 + std::exp(t));
}

Vector predict_probs(const Vector& x, const RowMatrix& covariates) {
  if (covariates.cols() != x.size()) throw Error(Errc::dimension_mismatch, "x has wrong length");
  const Vector logits = covariates * x;
  return logits.unaryExpr([](double t) { return sigmoid(t); });
}

ShardLikelihood::ShardLikelihood(ModelSpec spec, RowMatrix covariates, Vector responses)
    : spec_(std::move(spec)), z_(std::move(covariates)), y_(std::move(responses)) {
  if (z_.cols() != spec_.dim || z_.rows() != y_.size()) {
    throw Error(Errc::dimension_mismatch, "shard data does not match the model dimension");
  }
}

ShardLikelihood::ShardLikelihood(const ModelSpec& spec, const Dataset& data,
                                 std::span<const std::size_t> indices)
    : spec_(spec), z_(static_cast<Index>(indices.size()), data.dim()),
      y_(static_cast<Index>(indices.size())) {
  if (data.dim() != spec.dim) throw Error(Errc::dimension_mismatch, "dataset dim != model dim");
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto c = static_cast<Index>(indices[k]);
    z_.row(static_cast<Index>(k)) = data.covariates.row(c);
    y_(static_cast<Index>(k)) = data.responses(c);
  }
}

double ShardLikelihood::point_loglik(Index c, double logit) const {
  if (spec_.kind == ModelKind::logistic) {
    const double t = clamp_logit(logit);
    // y log σ(t) + (1-y) log(1-σ(t)) = -y softplus(-t) - (1-y) softplus(t)
    return -y_(c) * softplus(-t) - (1.0 - y_(c)) * softplus(t);
  }
  const double r = y_(c) - logit;
  return -0.5 * (kLog2Pi + std::log(spec_.noise_variance)) - 0.5 * r * r / spec_.noise_variance;
}

double ShardLikelihood::point_residual(Index c, double logit) const {
  if (spec_.kind == ModelKind::logistic) return y_(c) - sigmoid(logit);
  return (y_(c) - logit) / spec_.noise_variance;
}

LogLik ShardLikelihood::loglik_and_grad(const Vector& x) const {
  if (x.size() != spec_.dim) throw Error(Errc::dimension_mismatch, "x has wrong length");
  const Vector logits = z_ * x;
  LogLik out{0.0, Vector::Zero(spec_.dim)};
  Vector residual(z_.rows());
  for (Index c = 0; c < z_.rows(); ++c) {
    out.value += point_loglik(c, logits(c));
    residual(c) = point_residual(c, logits(c));
  }
  out.grad = z_.transpose() * residual;
  return out;
}

double ShardLikelihood::loglik(const Vector& x) const {
  if (x.size() != spec_.dim) throw Error(Errc::dimension_mismatch, "x has wrong length");
  const Vector logits = z_ * x;
  double value = 0.0;
  for (Index c = 0; c < z_.rows(); ++c) value += point_loglik(c, logits(c));
  return value;
}

LogLik ShardLikelihood::loglik_and_grad(const Vector& x, std::span<const std::size_t> batch) const {
  if (x.size() != spec_.dim) throw Error(Errc::dimension_mismatch, "x has wrong length");
  LogLik out{0.0, Vector::Zero(spec_.dim)};
  if (batch.empty()) return out;
  for (const std::size_t k : batch) {
    const auto c = static_cast<Index>(k);
    const double logit = z_.row(c).dot(x);
    out.value += point_loglik(c, logit);
    out.grad.noalias() += point_residual(c, logit) * z_.row(c).transpose();
  }
  const double scale = static_cast<double>(z_.rows()) / static_cast<double>(batch.size());
  out.value *= scale;
  out.grad *= scale;
  return out;
}

GaussianFactor linear_likelihood_factor(const ModelSpec& spec, const RowMatrix& covariates,
                                        const Vector& responses) {
  if (spec.kind != ModelKind::linear_gaussian) {
    throw Error(Errc::unsupported_model, "closed form requires the linear-Gaussian model");
  }
  const double inv_var = 1.0 / spec.noise_variance;
  const Index d = spec.dim;
  GaussianFactor f{NaturalParams::zeros(Family::full, d), 0.0};
  if (covariates.rows() == 0) return f;
  f.natural.first() = inv_var * (covariates.transpose() * responses);
  Matrix gram = covariates.transpose() * covariates;
  f.natural.second() = -inv_var * 0.5 * (gram + gram.transpose());
  f.constant = -0.5 * static_cast<double>(covariates.rows()) *
                   (kLog2Pi + std::log(spec.noise_variance)) -
               0.5 * inv_var * responses.squaredNorm();
  return f;
}

NaturalParams to_full(const NaturalParams& theta) {
  if (theta.family() == Family::full) return theta;
  return NaturalParams(Family::full, theta.first(), Matrix(theta.second().col(0).asDiagonal()));
}

NaturalParams exact_linear_posterior(const ModelSpec& spec, const Dataset& data) {
  if (spec.kind != ModelKind::linear_gaussian || data.kind != ModelKind::linear_gaussian) {
    throw Error(Errc::unsupported_model, "exact posterior requires the linear-Gaussian model");
  }
  const GaussianFactor f = linear_likelihood_factor(spec, data.covariates, data.responses);
  return to_full(spec.prior) + f.natural;
}

namespace {

NaturalParams tilted_natural(const ShardLikelihood& shard, const NaturalParams& base, double tilt,
                             double* constant) {
  const GaussianFactor f =
      linear_likelihood_factor(shard.spec(), shard.covariates(), shard.responses());
  if (base.dim() != shard.dim()) throw Error(Errc::dimension_mismatch, "base dim != model dim");
  if (constant) *constant = tilt * f.constant;
  return to_full(base) + tilt * f.natural;
}

}  // namespace

MeanParams exact_tilted_moments_linear(const ShardLikelihood& shard, const NaturalParams& base,
                                       double tilt_power) {
  const NaturalParams combined = tilted_natural(shard, base, tilt_power, nullptr);
  return project(to_mean(combined), base.family());
}

double tilted_log_partition_linear(const ShardLikelihood& shard, const NaturalParams& base,
                                   double tilt_power) {
  double constant = 0.0;
  const NaturalParams combined = tilted_natural(shard, base, tilt_power, &constant);
  return log_partition(combined) + constant;
}

std::vector<std::uint8_t> encode_dataset(const Dataset& data) {
  std::vector<std::uint8_t> out;
  const Index n = data.size();
  const Index d = data.dim();
  bytes::put_tag(out, "PSDS");
  bytes::put_u8(out, kDatasetVersion);
  bytes::put_u8(out, static_cast<std::uint8_t>(data.kind));
  bytes::put_u64(out, static_cast<std::uint64_t>(n));
  bytes::put_u64(out, static_cast<std::uint64_t>(d));
  bytes::put_u64(out, data.meta.seed);
  for (Index c = 0; c < n; ++c) {
    for (Index j = 0; j < d; ++j) bytes::put_f64(out, data.covariates(c, j));
  }
  for (Index c = 0; c < n; ++c) bytes::put_f64(out, data.responses(c));
  for (Index j = 0; j < d; ++j) bytes::put_f64(out, data.meta.mu(j));
  for (Index r = 0; r < d; ++r) {
    for (Index c = 0; c < d; ++c) bytes::put_f64(out, data.meta.p(r, c));
  }
  for (Index j = 0; j < d; ++j) bytes::put_f64(out, data.meta.x_star(j));
  return out;
}

Dataset decode_dataset(std::span<const std::uint8_t> raw) {
  bytes::Reader in(raw);
  const auto magic = in.take(4);
  if (!std::equal(magic.begin(), magic.end(), "PSDS")) {
    throw Error(Errc::bad_magic, "not a dataset file");
  }
  if (in.u8() != kDatasetVersion) throw Error(Errc::bad_version, "unsupported dataset version");
  const std::uint8_t kind = in.u8();
  if (kind > 1) throw Error(Errc::bad_type, "unknown model kind");
  Dataset data;
  data.kind = static_cast<ModelKind>(kind);
  const auto n = static_cast<Index>(in.u64());
  const auto d = static_cast<Index>(in.u64());
  data.meta.seed = in.u64();
  const auto need = (static_cast<std::size_t>(n) * static_cast<std::size_t>(d + 1) +
                     static_cast<std::size_t>(d) * static_cast<std::size_t>(d + 2)) *
                    8;
  if (in.remaining() < need) throw Error(Errc::truncated_payload, "dataset file is truncated");
  data.covariates.resize(n, d);
  data.responses.resize(n);
  for (Index c = 0; c < n; ++c) {
    for (Index j = 0; j < d; ++j) data.covariates(c, j) = in.f64();
  }
  for (Index c = 0; c < n; ++c) data.responses(c) = in.f64();
  data.meta.mu.resize(d);
  data.meta.p.resize(d, d);
  data.meta.x_star.resize(d);
  for (Index j = 0; j < d; ++j) data.meta.mu(j) = in.f64();
  for (Index r = 0; r < d; ++r) {
    for (Index c = 0; c < d; ++c) data.meta.p(r, c) = in.f64();
  }
  for (Index j = 0; j < d; ++j) data.meta.x_star(j) = in.f64();
  return data;
}

void write_dataset(const std::string& path, const Dataset& data) {
  bytes::write_file(path, encode_dataset(data));
}

Dataset read_dataset(const std::string& path) { return decode_dataset(bytes::read_file(path)); }

}  // namespace snep
