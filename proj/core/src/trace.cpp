#include "snep/trace.hpp"

#include <cerrno>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>

#include "snep/error.hpp"

namespace snep {

const char* to_string(TraceEvent event) {
  switch (event) {
    case TraceEvent::metric: return "metric";
    case TraceEvent::exchange: return "exchange";
    case TraceEvent::skip: return "skip";
    case TraceEvent::outer: return "outer";
  }
  return "unknown";
}

namespace {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

TraceEvent parse_event(const std::string& s, std::size_t line) {
  for (auto e : {TraceEvent::metric, TraceEvent::exchange, TraceEvent::skip, TraceEvent::outer}) {
    if (s == to_string(e)) return e;
  }
  throw Error(Errc::parse_error, "line " + std::to_string(line) + ": unknown event '" + s + "'");
}

double parse_double(const std::string& s, std::size_t line) {
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || *end != '\0') {
    throw Error(Errc::parse_error, "line " + std::to_string(line) + ": bad number '" + s + "'");
  }
  return v;
}

long parse_long(const std::string& s, std::size_t line) {
  char* end = nullptr;
  const long v = std::strtol(s.c_str(), &end, 10);
  if (s.empty() || *end != '\0') {
    throw Error(Errc::parse_error, "line " + std::to_string(line) + ": bad integer '" + s + "'");
  }
  return v;
}

}  // namespace

std::string format_record(const TraceRecord& r) {
  std::string out = format_double(r.time_s);
  out += ',';
  out += to_string(r.event);
  out += ',';
  out += std::to_string(r.worker);
  out += ',';
  out += std::to_string(r.iter);
  out += ',';
  out += r.metric;
  out += ',';
  out += format_double(r.value);
  return out;
}

CsvTraceWriter::CsvTraceWriter(const std::string& path) {
  file_ = std::fopen(path.c_str(), "wb");
  if (!file_) throw Error(Errc::io_error, "cannot open trace " + path + ": " + std::strerror(errno));
  std::fputs(kTraceHeader, file_);
  std::fputc('\n', file_);
}

CsvTraceWriter::~CsvTraceWriter() {
  if (file_) std::fclose(file_);
}

void CsvTraceWriter::emit(const TraceRecord& r) {
  const std::string line = format_record(r) + '\n';
  std::fwrite(line.data(), 1, line.size(), file_);
}

void CsvTraceWriter::flush() { std::fflush(file_); }

std::vector<TraceRecord> parse_trace(const std::string& text) {
  std::vector<TraceRecord> out;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos < text.size()) {
    const std::size_t nl = text.find('\n', pos);
    if (nl == std::string::npos) break;  // partial trailing line
    std::string line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1) {
      if (line != kTraceHeader) throw Error(Errc::parse_error, "line 1: unexpected trace header");
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, ',')) cols.push_back(col);
    if (line.back() == ',') cols.emplace_back();
    if (cols.size() != 6) {
      throw Error(Errc::parse_error, "line " + std::to_string(line_no) + ": expected 6 columns");
    }
    TraceRecord r;
    r.time_s = parse_double(cols[0], line_no);
    r.event = parse_event(cols[1], line_no);
    r.worker = static_cast<int>(parse_long(cols[2], line_no));
    r.iter = parse_long(cols[3], line_no);
    r.metric = cols[4];
    r.value = parse_double(cols[5], line_no);
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<TraceRecord> read_trace(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io_error, "cannot read trace " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_trace(buf.str());
}

}  // namespace snep
