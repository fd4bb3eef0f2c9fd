#pragma once

// Posterior-server protocol: workers run SNEP against a stale cavity and
// exchange parameter deltas with a single server that owns θ_posterior.
//
// Two executors share the same step and exchange functions: a single-threaded
// scheduler whose interleaving and message delays are fixed by the config,
// and a threaded one with a thread per worker plus one for the server.

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "snep/expfam.hpp"
#include "snep/samplers.hpp"
#include "snep/snep_core.hpp"
#include "snep/trace.hpp"

namespace snep {

struct DeltaMessage {
  std::uint32_t worker_id = 0;
  NaturalParams delta;      // λ − λ_old
  long send_iteration = 0;  // worker-local t; not carried on the wire
  bool final = false;       // termination flush; not carried on the wire
};

struct PosteriorMessage {
  NaturalParams theta_posterior;
  std::uint32_t server_sequence = 0;
};

// Frame: "PSRV", version, type, u32 worker id / sequence, u64 payload bytes,
// payload = flatten(params) as f64, all little-endian.
inline constexpr std::uint8_t kWireVersion = 0x01;
enum class MessageType : std::uint8_t { delta = 0x01, posterior = 0x02 };

using Message = std::variant<DeltaMessage, PosteriorMessage>;

std::vector<std::uint8_t> encode_message(const DeltaMessage& msg);
std::vector<std::uint8_t> encode_message(const PosteriorMessage& msg);
/// The frame does not carry the parameter shape; the receiver supplies it.
Message decode_message(std::span<const std::uint8_t> bytes, Family family, Index dim);

// Flat-parameter file: "PSFP", version, family byte, u64 dim, u64 value count,
// then the canonical flat values.
inline constexpr std::uint8_t kFlatFileVersion = 1;
std::vector<std::uint8_t> encode_flat_params(const NaturalParams& theta);
NaturalParams decode_flat_params(std::span<const std::uint8_t> bytes);
void write_flat_params(const std::string& path, const NaturalParams& theta);
NaturalParams read_flat_params(const std::string& path);

struct AbsorbedDelta {
  std::uint32_t worker_id = 0;
  NaturalParams delta;
};

struct ServerState {
  NaturalParams theta0;
  std::vector<NaturalParams> initial_sites;  // λ⁽¹⁾, summed in worker order
  NaturalParams theta_posterior;
  std::map<std::uint32_t, NaturalParams> ledger;  // per worker: Σ absorbed deltas
  std::vector<AbsorbedDelta> log;                 // absorption order
  bool keep_log = true;
  std::uint32_t sequence = 0;
  long absorbed = 0;
  long dropped = 0;

  static ServerState start(const NaturalParams& theta0, std::vector<NaturalParams> initial_sites);
};

/// θ_posterior += Δ, ledger and log updated; the reply carries the result.
/// Throws dimension_mismatch (nothing is changed).
PosteriorMessage server_handle_delta(ServerState& server, const DeltaMessage& msg);

/// θ₀ + Σλ⁽¹⁾ followed by every logged delta, in the original order.
NaturalParams replay_posterior(const ServerState& server);

struct WorkerCounters {
  long tilted_skips = 0;
  long mean_rejections = 0;
  long aux_skips = 0;
  long sms_discards = 0;
  long deferrals = 0;
  long clamps = 0;
  long sends = 0;
  long receipts = 0;
  KernelCounters kernel;

  long skips() const {
    return tilted_skips + mean_rejections + aux_skips + sms_discards + deferrals + kernel.aborted;
  }
};

struct WorkerRuntime {
  LikelihoodSite site;
  SamplerState sampler;
  NaturalParams cavity;    // θ_{-i}
  NaturalParams received;  // last θ_posterior from the server
  bool pending = false;
  long t = 0;
  long last_send_t = 0;
  std::shared_ptr<const ShardLikelihood> shard;
  WorkerCounters counters;
};

/// cavity = θ_post_init − λ⁽¹⁾, θ' = θ_post_init, x drawn from θ_post_init.
WorkerRuntime init_worker(int worker_id, const NaturalParams& theta_post_init,
                          const NaturalParams& lambda1, double beta,
                          std::shared_ptr<const ShardLikelihood> shard, SeedStream rng);

struct WorkerStepReport {
  bool tilted_skip = false;
  UpdateStatus inner = UpdateStatus::applied;
  bool clamped = false;
  bool outer_due = false;
  UpdateStatus outer = UpdateStatus::applied;
  long aborted_steps = 0;
};

/// One SNEP iteration: M kernel steps, inner update against cavity + λ,
/// outer update every n_outer iterations, t += 1.
WorkerRuntime worker_step(WorkerRuntime rt, const SnepConfig& cfg, const TiltedKernel& kernel,
                          WorkerStepReport* report = nullptr);

/// Send side of an exchange. Returns nothing (and counts a deferral) while a
/// previous exchange is still pending.
std::optional<DeltaMessage> begin_exchange(WorkerRuntime& rt, bool final = false);

/// Receive side: cavity ← θ_posterior − λ_old, and the sampler position is
/// moved from the old cavity + λ Gaussian to the new one.
void complete_exchange(WorkerRuntime& rt, const PosteriorMessage& reply);

class WorkerTransport {
 public:
  virtual ~WorkerTransport() = default;
  virtual void send(DeltaMessage msg) = 0;
  /// Non-blocking.
  virtual std::optional<PosteriorMessage> poll(std::uint32_t worker_id) = 0;
};

/// Applies any arrived reply, then sends a delta unless one is pending.
WorkerRuntime sync_exchange(WorkerRuntime rt, WorkerTransport& transport);

struct SmsRoundReport {
  bool tilted_skip = false;
  bool discarded = false;
  long aborted_steps = 0;
};

/// Local half of a synchronous SMS round: samples the EP tilted distribution
/// (cavity times the full shard likelihood), takes the sample average of s(x)
/// and applies the damped EP update. The caller runs the blocking exchange.
WorkerRuntime sms_worker_round(WorkerRuntime rt, const TiltedKernel& kernel, int n_samples,
                               double alpha, SmsRoundReport* report = nullptr);

enum class SchedulerKind { deterministic, threaded };
enum class Algorithm { snep, sms };

struct SchedulerConfig {
  SchedulerKind kind = SchedulerKind::deterministic;
  long delay = 0;  // ticks, deterministic mode only
};

struct TraceDetail {
  bool exchanges = false;
  bool outer = false;
};

struct SimulationSetup {
  NaturalParams theta0;
  std::vector<std::shared_ptr<const ShardLikelihood>> shards;
  SnepConfig snep;
  Algorithm algorithm = Algorithm::snep;
  double sms_alpha = 0.5;
  std::shared_ptr<const TiltedKernel> kernel;
  long max_worker_iters = 1000;  // SMS: number of rounds
  std::uint64_t seed = 1;
  SchedulerConfig scheduler;
  long eval_every = 10;  // server absorptions between observer calls
  TraceDetail detail;
  bool keep_log = true;
};

/// Called with the server's θ_posterior after every eval_every absorptions and
/// once more at quiescence.
using Observer = std::function<void(const NaturalParams& theta_posterior, double time_s,
                                    long absorbed, TraceSink& sink)>;

struct SimulationResult {
  ServerState server;
  std::vector<WorkerRuntime> workers;
  long ticks = 0;
  double seconds = 0.0;
};

ServerState init_server(const SimulationSetup& setup);
std::vector<WorkerRuntime> init_workers(const SimulationSetup& setup, const ServerState& server);

SimulationResult run_simulation(const SimulationSetup& setup, TraceSink& sink,
                                const Observer& observer = {});

}  // namespace snep
