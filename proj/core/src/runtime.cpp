#include "snep/runtime.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <exception>
#include <mutex>
#include <thread>

namespace snep {

ServerState ServerState::start(const NaturalParams& theta0, std::vector<NaturalParams> initial_sites) {
  ServerState s;
  s.theta0 = theta0;
  s.theta_posterior = theta0;
  for (std::size_t i = 0; i < initial_sites.size(); ++i) {
    s.theta_posterior += initial_sites[i];
    s.ledger.emplace(static_cast<std::uint32_t>(i),
                     NaturalParams::zeros(theta0.family(), theta0.dim()));
  }
  s.initial_sites = std::move(initial_sites);
  return s;
}

PosteriorMessage server_handle_delta(ServerState& server, const DeltaMessage& msg) {
  server.theta_posterior.require_same_shape(msg.delta);
  server.theta_posterior += msg.delta;
  auto it = server.ledger.find(msg.worker_id);
  if (it == server.ledger.end()) {
    it = server.ledger
             .emplace(msg.worker_id, NaturalParams::zeros(msg.delta.family(), msg.delta.dim()))
             .first;
  }
  it->second += msg.delta;
  if (server.keep_log) server.log.push_back({msg.worker_id, msg.delta});
  ++server.absorbed;
  ++server.sequence;
  return {server.theta_posterior, server.sequence};
}

NaturalParams replay_posterior(const ServerState& server) {
  NaturalParams theta = server.theta0;
  for (const auto& l : server.initial_sites) theta += l;
  for (const auto& a : server.log) theta += a.delta;
  return theta;
}

WorkerRuntime init_worker(int worker_id, const NaturalParams& theta_post_init,
                          const NaturalParams& lambda1, double beta,
                          std::shared_ptr<const ShardLikelihood> shard, SeedStream rng) {
  WorkerRuntime rt;
  rt.site = make_site(worker_id, lambda1, theta_post_init, beta);
  rt.cavity = theta_post_init - lambda1;
  rt.received = theta_post_init;
  Vector x = sample_exact(theta_post_init, rng);
  rt.sampler = SamplerState::at(std::move(x), rng);
  rt.shard = std::move(shard);
  return rt;
}

WorkerRuntime worker_step(WorkerRuntime rt, const SnepConfig& cfg, const TiltedKernel& kernel,
                          WorkerStepReport* report) {
  WorkerStepReport local;
  WorkerStepReport& rep = report ? *report : local;
  rep = {};
  const long aborted_before = rt.counters.kernel.aborted;
  auto target = try_tilted_target(rt.site, rt.cavity, rt.shard);
  if (!target) {
    rep.tilted_skip = true;
    ++rt.counters.tilted_skips;
  } else {
    const SufficientStats stat = kernel.estimate(rt.sampler, *target, cfg.samples_per_iter,
                                                 rt.site.lambda.family(), rt.counters.kernel);
    const NaturalParams posterior = rt.cavity + rt.site.lambda;
    SiteUpdate upd = inner_update(rt.site, stat, posterior, cfg.step.at(rt.t), cfg.min_variance);
    rep.inner = upd.status;
    rep.clamped = upd.clamped;
    if (upd.status == UpdateStatus::rejected_mean_domain) ++rt.counters.mean_rejections;
    if (upd.clamped) ++rt.counters.clamps;
    rt.site = std::move(upd.site);
  }
  rep.aborted_steps = rt.counters.kernel.aborted - aborted_before;
  ++rt.t;
  if (cfg.n_outer > 0 && rt.t % cfg.n_outer == 0) {
    rep.outer_due = true;
    SiteUpdate o = outer_update(rt.site, rt.cavity);
    rep.outer = o.status;
    if (o.status == UpdateStatus::skipped_invalid_aux) ++rt.counters.aux_skips;
    rt.site = std::move(o.site);
  }
  return rt;
}

std::optional<DeltaMessage> begin_exchange(WorkerRuntime& rt, bool final) {
  if (rt.pending) {
    if (!final) ++rt.counters.deferrals;
    return std::nullopt;
  }
  DeltaMessage msg{static_cast<std::uint32_t>(rt.site.worker_id), rt.site.lambda - rt.site.lambda_old,
                   rt.t, final};
  rt.site.lambda_old = rt.site.lambda;
  rt.pending = true;
  rt.last_send_t = rt.t;
  ++rt.counters.sends;
  return msg;
}

void complete_exchange(WorkerRuntime& rt, const PosteriorMessage& reply) {
  NaturalParams next_cavity = reply.theta_posterior - rt.site.lambda_old;
  const NaturalParams before = rt.cavity + rt.site.lambda;
  const NaturalParams after = next_cavity + rt.site.lambda;
  if (is_valid(before) && is_valid(after)) {
    rt.sampler.x = shift_state(rt.sampler.x, before, after);
  }
  rt.cavity = std::move(next_cavity);
  rt.received = reply.theta_posterior;
  rt.pending = false;
  ++rt.counters.receipts;
}

WorkerRuntime sync_exchange(WorkerRuntime rt, WorkerTransport& transport) {
  if (auto reply = transport.poll(static_cast<std::uint32_t>(rt.site.worker_id))) {
    complete_exchange(rt, *reply);
  }
  if (auto msg = begin_exchange(rt)) transport.send(std::move(*msg));
  return rt;
}

WorkerRuntime sms_worker_round(WorkerRuntime rt, const TiltedKernel& kernel, int n_samples,
                               double alpha, SmsRoundReport* report) {
  SmsRoundReport local;
  SmsRoundReport& rep = report ? *report : local;
  rep = {};
  ++rt.t;
  if (!is_valid(rt.cavity)) {
    rep.tilted_skip = true;
    ++rt.counters.tilted_skips;
    return rt;
  }
  const long aborted_before = rt.counters.kernel.aborted;
  const TiltedTarget target{rt.cavity, 1.0, rt.shard};
  const SufficientStats stat =
      kernel.estimate(rt.sampler, target, n_samples, rt.site.lambda.family(), rt.counters.kernel);
  rep.aborted_steps = rt.counters.kernel.aborted - aborted_before;
  if (!is_valid(stat)) {
    rep.discarded = true;
    ++rt.counters.sms_discards;
    return rt;
  }
  SiteUpdate upd = damped_ep_update(rt.site, stat, rt.cavity, alpha);
  if (!upd.applied()) {
    rep.discarded = true;
    ++rt.counters.sms_discards;
    return rt;
  }
  rt.site = std::move(upd.site);
  return rt;
}

ServerState init_server(const SimulationSetup& setup) {
  const NaturalParams lambda1 = initial_site_factor(setup.theta0.family(), setup.theta0.dim(),
                                                    setup.snep.site_init_variance);
  ServerState s = ServerState::start(setup.theta0,
                                     std::vector<NaturalParams>(setup.shards.size(), lambda1));
  s.keep_log = setup.keep_log;
  return s;
}

std::vector<WorkerRuntime> init_workers(const SimulationSetup& setup, const ServerState& server) {
  const double beta = setup.algorithm == Algorithm::sms
                          ? 1.0
                          : setup.snep.resolved_beta(setup.shards.size());
  std::vector<WorkerRuntime> out;
  out.reserve(setup.shards.size());
  for (std::size_t i = 0; i < setup.shards.size(); ++i) {
    out.push_back(init_worker(static_cast<int>(i), server.theta_posterior, server.initial_sites[i],
                              beta, setup.shards[i], SeedStream::derive(setup.seed, 0x3000 + i)));
  }
  return out;
}

namespace {

void validate(const SimulationSetup& s) {
  if (s.shards.empty()) throw Error(Errc::validation_error, "at least one worker is required");
  if (!s.kernel) throw Error(Errc::validation_error, "no kernel configured");
  if (!is_valid(s.theta0)) throw Error(Errc::validation_error, "prior is not a valid Gaussian");
  if (s.max_worker_iters < 1) throw Error(Errc::validation_error, "max_worker_iters must be positive");
  if (s.snep.n_sync < 1) throw Error(Errc::validation_error, "n_sync must be positive");
  if (s.snep.n_outer < 1) throw Error(Errc::validation_error, "n_outer must be positive");
  if (s.snep.samples_per_iter < 1) throw Error(Errc::validation_error, "samples_per_iter must be positive");
  if (s.eval_every < 1) throw Error(Errc::validation_error, "eval_every must be positive");
  if (s.scheduler.delay < 0) throw Error(Errc::validation_error, "delay must be non-negative");
}

class Emitter {
 public:
  Emitter(TraceSink& sink, const TraceDetail& detail) : sink_(sink), detail_(detail) {}

  void skip(double time, const WorkerRuntime& rt, const char* what) {
    sink_.emit({time, TraceEvent::skip, rt.site.worker_id, rt.t, what,
                static_cast<double>(rt.counters.skips())});
  }

  void step(double time, const WorkerRuntime& rt, const WorkerStepReport& rep) {
    if (rep.tilted_skip) skip(time, rt, "tilted-invalid");
    if (rep.inner == UpdateStatus::rejected_mean_domain) skip(time, rt, "mean-domain");
    if (rep.aborted_steps > 0) skip(time, rt, "aborted-step");
    if (rep.outer_due && rep.outer == UpdateStatus::skipped_invalid_aux) skip(time, rt, "aux-invalid");
    if (detail_.outer && rep.outer_due && rep.outer == UpdateStatus::applied) {
      sink_.emit({time, TraceEvent::outer, rt.site.worker_id, rt.t, "outer", 1.0});
    }
  }

  void sms(double time, const WorkerRuntime& rt, const SmsRoundReport& rep) {
    if (rep.tilted_skip) skip(time, rt, "tilted-invalid");
    if (rep.aborted_steps > 0) skip(time, rt, "aborted-step");
    if (rep.discarded) skip(time, rt, "sms-discard");
  }

  void exchange(double time, int worker, long iter, const char* what, double value) {
    if (detail_.exchanges) sink_.emit({time, TraceEvent::exchange, worker, iter, what, value});
  }

  void summary(double time, const std::vector<WorkerRuntime>& workers) {
    for (const auto& w : workers) {
      const auto& c = w.counters;
      const double rate = c.kernel.steps > 0 ? static_cast<double>(c.kernel.accepted) /
                                                   static_cast<double>(c.kernel.steps)
                                             : 0.0;
      const std::pair<const char*, double> rows[] = {
          {"skips", static_cast<double>(c.skips())},
          {"clamps", static_cast<double>(c.clamps)},
          {"deferrals", static_cast<double>(c.deferrals)},
          {"sends", static_cast<double>(c.sends)},
          {"accept-rate", rate},
      };
      for (const auto& [name, value] : rows) {
        sink_.emit({time, TraceEvent::metric, w.site.worker_id, w.t, name, value});
      }
    }
  }

 private:
  TraceSink& sink_;
  const TraceDetail& detail_;
};

struct InFlight {
  long due = 0;
  DeltaMessage msg;
};

SimulationResult run_deterministic(const SimulationSetup& s, TraceSink& sink, const Observer& observer) {
  SimulationResult res;
  res.server = init_server(s);
  res.workers = init_workers(s, res.server);
  ServerState& server = res.server;
  auto& workers = res.workers;
  const std::size_t n = workers.size();
  const long delay = s.scheduler.delay;
  Emitter emit(sink, s.detail);

  std::deque<InFlight> to_server;
  std::vector<std::deque<std::pair<long, PosteriorMessage>>> to_worker(n);
  std::vector<bool> flushed(n, false);
  long last_eval = -1;
  auto evaluate = [&](double time) {
    if (observer) observer(server.theta_posterior, time, server.absorbed, sink);
    last_eval = server.absorbed;
  };
  evaluate(0.0);

  for (long tick = 0;; ++tick) {
    const auto time = static_cast<double>(tick);
    for (std::size_t i = 0; i < n; ++i) {
      auto& box = to_worker[i];
      while (!box.empty() && box.front().first <= tick) {
        complete_exchange(workers[i], box.front().second);
        emit.exchange(time, static_cast<int>(i), workers[i].t, "receive",
                      box.front().second.server_sequence);
        box.pop_front();
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      WorkerRuntime& w = workers[i];
      if (w.t < s.max_worker_iters) {
        WorkerStepReport rep;
        w = worker_step(std::move(w), s.snep, *s.kernel, &rep);
        emit.step(time, w, rep);
        if (w.t % s.snep.n_sync == 0) {
          if (auto msg = begin_exchange(w)) {
            emit.exchange(time, static_cast<int>(i), w.t, "send", static_cast<double>(w.counters.sends));
            to_server.push_back({tick + delay, std::move(*msg)});
          } else {
            emit.skip(time, w, "deferred-exchange");
          }
        }
      } else if (!flushed[i] && !w.pending) {
        auto msg = begin_exchange(w, true);
        flushed[i] = true;
        emit.exchange(time, static_cast<int>(i), w.t, "flush", static_cast<double>(w.counters.sends));
        to_server.push_back({tick + delay, std::move(*msg)});
      }
    }
    while (!to_server.empty() && to_server.front().due <= tick) {
      const DeltaMessage& msg = to_server.front().msg;
      try {
        PosteriorMessage reply = server_handle_delta(server, msg);
        emit.exchange(time, -1, server.absorbed, "absorb", msg.worker_id);
        to_worker[msg.worker_id].emplace_back(tick + std::max(delay, 1L), std::move(reply));
      } catch (const Error& e) {
        if (e.code() != Errc::dimension_mismatch) throw;
        ++server.dropped;
        sink.emit({time, TraceEvent::skip, -1, server.absorbed, "dropped-message",
                   static_cast<double>(server.dropped)});
      }
      to_server.pop_front();
      if (server.absorbed % s.eval_every == 0) evaluate(time);
    }
    const bool quiet =
        to_server.empty() && std::all_of(flushed.begin(), flushed.end(), [](bool f) { return f; }) &&
        std::none_of(workers.begin(), workers.end(), [](const WorkerRuntime& w) { return w.pending; });
    if (quiet) {
      res.ticks = tick + 1;
      if (last_eval != server.absorbed) evaluate(time);
      emit.summary(time, workers);
      return res;
    }
  }
}

SimulationResult run_sms(const SimulationSetup& s, TraceSink& sink, const Observer& observer) {
  SimulationResult res;
  res.server = init_server(s);
  res.workers = init_workers(s, res.server);
  ServerState& server = res.server;
  auto& workers = res.workers;
  Emitter emit(sink, s.detail);
  long last_eval = -1;
  auto evaluate = [&](double time) {
    if (observer) observer(server.theta_posterior, time, server.absorbed, sink);
    last_eval = server.absorbed;
  };
  evaluate(0.0);
  for (long round = 0; round < s.max_worker_iters; ++round) {
    const auto time = static_cast<double>(round);
    std::vector<DeltaMessage> outgoing;
    for (auto& w : workers) {
      SmsRoundReport rep;
      w = sms_worker_round(std::move(w), *s.kernel, s.snep.samples_per_iter, s.sms_alpha, &rep);
      emit.sms(time, w, rep);
      outgoing.push_back(*begin_exchange(w));
    }
    for (const auto& msg : outgoing) {
      server_handle_delta(server, msg);
      emit.exchange(time, -1, server.absorbed, "absorb", msg.worker_id);
      if (server.absorbed % s.eval_every == 0) evaluate(time);
    }
    const PosteriorMessage broadcast{server.theta_posterior, server.sequence};
    for (auto& w : workers) complete_exchange(w, broadcast);
  }
  res.ticks = s.max_worker_iters;
  const auto end = static_cast<double>(s.max_worker_iters);
  if (last_eval != server.absorbed) evaluate(end);
  emit.summary(end, workers);
  return res;
}

template <class T>
class Mailbox {
 public:
  void push(T value) {
    {
      std::lock_guard lock(mu_);
      queue_.push_back(std::move(value));
    }
    cv_.notify_all();
  }
  std::optional<T> try_pop() {
    std::lock_guard lock(mu_);
    if (queue_.empty()) return std::nullopt;
    T out = std::move(queue_.front());
    queue_.pop_front();
    return out;
  }
  std::optional<T> wait_pop(const std::atomic<bool>& stop) {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return !queue_.empty() || stop.load(); });
    if (queue_.empty()) return std::nullopt;
    T out = std::move(queue_.front());
    queue_.pop_front();
    return out;
  }
  void wake() {
    { std::lock_guard lock(mu_); }
    cv_.notify_all();
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<T> queue_;
};

SimulationResult run_threaded(const SimulationSetup& s, TraceSink& outer_sink, const Observer& observer) {
  SimulationResult res;
  res.server = init_server(s);
  res.workers = init_workers(s, res.server);
  const std::size_t n = res.workers.size();
  LockedSink sink(outer_sink);
  Emitter emit(sink, s.detail);
  const auto start = std::chrono::steady_clock::now();
  auto now = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  };

  Mailbox<DeltaMessage> inbox;
  std::vector<Mailbox<PosteriorMessage>> replies(n);
  std::atomic<bool> stop{false};
  std::mutex error_mu;
  std::exception_ptr error;
  auto fail = [&](std::exception_ptr e) {
    {
      std::lock_guard lock(error_mu);
      if (!error) error = e;
    }
    stop = true;
    inbox.wake();
    for (auto& r : replies) r.wake();
  };

  auto worker_main = [&](std::size_t i) {
    WorkerRuntime& w = res.workers[i];
    const int id = static_cast<int>(i);
    try {
      auto receive = [&](const PosteriorMessage& reply) {
        complete_exchange(w, reply);
        emit.exchange(now(), id, w.t, "receive", reply.server_sequence);
      };
      while (w.t < s.max_worker_iters) {
        if (stop) return;
        if (auto reply = replies[i].try_pop()) receive(*reply);
        WorkerStepReport rep;
        w = worker_step(std::move(w), s.snep, *s.kernel, &rep);
        emit.step(now(), w, rep);
        if (w.t % s.snep.n_sync == 0) {
          if (auto msg = begin_exchange(w)) {
            emit.exchange(now(), id, w.t, "send", static_cast<double>(w.counters.sends));
            inbox.push(std::move(*msg));
          } else {
            emit.skip(now(), w, "deferred-exchange");
          }
        }
      }
      if (w.pending) {
        auto reply = replies[i].wait_pop(stop);
        if (!reply) return;
        receive(*reply);
      }
      auto msg = begin_exchange(w, true);
      emit.exchange(now(), id, w.t, "flush", static_cast<double>(w.counters.sends));
      inbox.push(std::move(*msg));
      auto reply = replies[i].wait_pop(stop);
      if (!reply) return;
      receive(*reply);
    } catch (...) {
      fail(std::current_exception());
    }
  };

  auto server_main = [&] {
    try {
      ServerState& server = res.server;
      if (observer) observer(server.theta_posterior, 0.0, server.absorbed, sink);
      std::size_t finals = 0;
      long last_eval = 0;
      while (finals < n) {
        auto msg = inbox.wait_pop(stop);
        if (!msg) return;
        PosteriorMessage reply = server_handle_delta(server, *msg);
        emit.exchange(now(), -1, server.absorbed, "absorb", msg->worker_id);
        if (msg->final) ++finals;
        replies[msg->worker_id].push(std::move(reply));
        if (server.absorbed % s.eval_every == 0) {
          if (observer) observer(server.theta_posterior, now(), server.absorbed, sink);
          last_eval = server.absorbed;
        }
      }
      if (observer && last_eval != server.absorbed) {
        observer(server.theta_posterior, now(), server.absorbed, sink);
      }
    } catch (...) {
      fail(std::current_exception());
    }
  };

  std::vector<std::thread> threads;
  threads.emplace_back(server_main);
  for (std::size_t i = 0; i < n; ++i) threads.emplace_back(worker_main, i);
  for (auto& t : threads) t.join();
  if (error) std::rethrow_exception(error);
  res.seconds = now();
  emit.summary(res.seconds, res.workers);
  return res;
}

}  // namespace

SimulationResult run_simulation(const SimulationSetup& setup, TraceSink& sink, const Observer& observer) {
  validate(setup);
  const auto start = std::chrono::steady_clock::now();
  SimulationResult res;
  if (setup.algorithm == Algorithm::sms) {
    res = run_sms(setup, sink, observer);
  } else if (setup.scheduler.kind == SchedulerKind::threaded) {
    res = run_threaded(setup, sink, observer);
  } else {
    res = run_deterministic(setup, sink, observer);
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  sink.flush();
  return res;
}

}  // namespace snep
