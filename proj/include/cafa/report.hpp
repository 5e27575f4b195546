#pragma once

// Text outputs of an experiment: per-method RunRecord CSVs, the summary
// table (CSV and aligned text) and plot data (one column per method,
// x = batch index). Numbers are written in shortest round-trip form, so a
// CSV read back reproduces the in-memory doubles exactly.

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "cafa/error.hpp"
#include "cafa/experiment.hpp"
#include "cafa/tta.hpp"

namespace cafa {

inline constexpr const char* kRecordHeader = "batch_index,accuracy,loss,mean_intra,mean_inter";

/// Shortest decimal string that parses back to exactly `v`.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s) {
  double v = 0.0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  const auto res = std::from_chars(first, last, v);
  if (res.ec != std::errc() || res.ptr != last) throw Error(ErrorKind::Io, "not a number: '" + s + "'");
  return v;
}

namespace detail {

inline std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::Io, "cannot open '" + path + "' for writing");
  return out;
}

inline void finish(std::ofstream& out, const std::string& path) {
  out.flush();
  if (!out) throw Error(ErrorKind::Io, "write failed for '" + path + "'");
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ls(line);
  while (std::getline(ls, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// RunRecord CSV

inline void write_record_csv(std::ostream& out, const RunRecord& rec) {
  out << kRecordHeader << "\n";
  for (const auto& r : rec.rows) {
    out << r.batch_index << ',' << format_double(r.accuracy) << ',' << format_double(r.loss) << ','
        << format_double(r.mean_intra) << ',' << format_double(r.mean_inter) << "\n";
  }
}

inline void write_record_csv(const std::string& path, const RunRecord& rec) {
  auto out = detail::open_out(path);
  write_record_csv(out, rec);
  detail::finish(out, path);
}

/// Reads the rows of a RunRecord CSV. Only the columns of the CSV are
/// restored; wall time, step counts and predictions are not part of it.
inline std::vector<RunRow> read_record_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || line != kRecordHeader) {
    throw Error(ErrorKind::Io, "'" + path + "': expected header '" + std::string(kRecordHeader) + "'");
  }
  std::vector<RunRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != 5) {
      throw Error(ErrorKind::Io, "'" + path + "' line " + std::to_string(lineno) + ": expected 5 fields");
    }
    RunRow r;
    try {
      r.batch_index = std::stoull(cells[0]);
    } catch (const std::exception&) {
      throw Error(ErrorKind::Io, "'" + path + "' line " + std::to_string(lineno) + ": bad batch_index");
    }
    r.accuracy = parse_double(cells[1]);
    r.loss = parse_double(cells[2]);
    r.mean_intra = parse_double(cells[3]);
    r.mean_inter = parse_double(cells[4]);
    rows.push_back(r);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Summary table

inline void write_summary_csv(std::ostream& out, const std::vector<MethodSummary>& rows) {
  out << "method,mean_accuracy,final_quarter_accuracy,last_accuracy,first_mean_intra,final_mean_intra,"
         "final_mean_inter\n";
  for (const auto& s : rows) {
    out << s.name << ',' << format_double(s.mean_accuracy) << ',' << format_double(s.final_quarter_accuracy)
        << ',' << format_double(s.last_accuracy) << ',' << format_double(s.first_mean_intra) << ','
        << format_double(s.final_mean_intra) << ',' << format_double(s.final_mean_inter) << "\n";
  }
}

/// Fixed-width table for terminals; accuracies in percent.
inline std::string format_summary_table(const std::vector<MethodSummary>& rows) {
  std::size_t w = 6;
  for (const auto& s : rows) w = std::max(w, s.name.size());
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-*s  %9s  %9s  %9s  %12s  %12s  %12s\n", static_cast<int>(w), "method",
                "mean_acc", "final_q", "last_acc", "intra_first", "intra_final", "inter_final");
  out += buf;
  out += std::string(w + 2 + 9 * 3 + 2 * 3 + 12 * 3 + 2 * 2, '-') + "\n";
  for (const auto& s : rows) {
    std::snprintf(buf, sizeof buf, "%-*s  %8.2f%%  %8.2f%%  %8.2f%%  %12.4g  %12.4g  %12.4g\n",
                  static_cast<int>(w), s.name.c_str(), 100.0 * s.mean_accuracy,
                  100.0 * s.final_quarter_accuracy, 100.0 * s.last_accuracy, s.first_mean_intra,
                  s.final_mean_intra, s.final_mean_inter);
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Plot data

/// `batch_index,<name0>,<name1>,...`; runs shorter than the longest one
/// (an aborted method) leave their trailing cells empty.
template <class Field>
void write_plot_csv(std::ostream& out, const std::vector<RunRecord>& records, Field field) {
  out << "batch_index";
  std::size_t n = 0;
  for (const auto& r : records) {
    out << ',' << r.config.name;
    n = std::max(n, r.rows.size());
  }
  out << "\n";
  for (std::size_t i = 0; i < n; ++i) {
    out << i;
    for (const auto& r : records) {
      out << ',';
      if (i < r.rows.size()) out << format_double(field(r.rows[i]));
    }
    out << "\n";
  }
}

/// Writes summary.csv, summary.txt and plot_{accuracy,intra,inter}.csv
/// into `dir` (which must exist).
inline void write_report(const std::string& dir, const std::vector<RunRecord>& records) {
  std::vector<MethodSummary> rows;
  for (const auto& r : records) rows.push_back(summarize(r));
  {
    const std::string p = dir + "/summary.csv";
    auto out = detail::open_out(p);
    write_summary_csv(out, rows);
    detail::finish(out, p);
  }
  {
    const std::string p = dir + "/summary.txt";
    auto out = detail::open_out(p);
    out << format_summary_table(rows);
    detail::finish(out, p);
  }
  auto plot = [&](const char* name, auto field) {
    const std::string p = dir + "/" + name;
    auto out = detail::open_out(p);
    write_plot_csv(out, records, field);
    detail::finish(out, p);
  };
  plot("plot_accuracy.csv", [](const RunRow& r) { return r.accuracy; });
  plot("plot_intra.csv", [](const RunRow& r) { return r.mean_intra; });
  plot("plot_inter.csv", [](const RunRow& r) { return r.mean_inter; });
}

}  // namespace cafa
