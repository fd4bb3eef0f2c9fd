#pragma once

// Trace records and the CSV sink they are persisted through.

#include <cstdio>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

namespace snep {

enum class TraceEvent { metric, exchange, skip, outer };

const char* to_string(TraceEvent event);

struct TraceRecord {
  double time_s = 0.0;
  TraceEvent event = TraceEvent::metric;
  int worker = -1;  // -1: server
  long iter = 0;
  std::string metric;
  double value = 0.0;

  friend bool operator==(const TraceRecord&, const TraceRecord&) = default;
};

inline constexpr const char* kTraceHeader = "time_s,event,worker,iter,metric,value";

/// One CSV line without the trailing newline; doubles use 17 significant digits.
std::string format_record(const TraceRecord& r);

class TraceSink {
 public:
  virtual ~TraceSink() = default;
  virtual void emit(const TraceRecord& r) = 0;
  virtual void flush() {}
};

class MemorySink final : public TraceSink {
 public:
  void emit(const TraceRecord& r) override { records.push_back(r); }
  std::vector<TraceRecord> records;
};

/// Appends lines to a file as they arrive; the header is written on open.
class CsvTraceWriter final : public TraceSink {
 public:
  explicit CsvTraceWriter(const std::string& path);
  ~CsvTraceWriter() override;
  CsvTraceWriter(const CsvTraceWriter&) = delete;
  CsvTraceWriter& operator=(const CsvTraceWriter&) = delete;

  void emit(const TraceRecord& r) override;
  void flush() override;

 private:
  std::FILE* file_ = nullptr;
};

/// Fans records out to several sinks.
class TeeSink final : public TraceSink {
 public:
  explicit TeeSink(std::vector<TraceSink*> sinks) : sinks_(std::move(sinks)) {}
  void emit(const TraceRecord& r) override {
    for (auto* s : sinks_) s->emit(r);
  }
  void flush() override {
    for (auto* s : sinks_) s->flush();
  }

 private:
  std::vector<TraceSink*> sinks_;
};

/// Serializes emits from several threads into one downstream sink.
class LockedSink final : public TraceSink {
 public:
  explicit LockedSink(TraceSink& inner) : inner_(inner) {}
  void emit(const TraceRecord& r) override {
    std::lock_guard lock(mu_);
    inner_.emit(r);
  }
  void flush() override {
    std::lock_guard lock(mu_);
    inner_.flush();
  }

 private:
  TraceSink& inner_;
  std::mutex mu_;
};

/// Parses complete lines; an unterminated final line is ignored. Throws
/// parse_error on a malformed complete line.
std::vector<TraceRecord> parse_trace(const std::string& text);
std::vector<TraceRecord> read_trace(const std::string& path);

}  // namespace snep
