#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "hess/errors.hpp"
#include "hess/pipeline.hpp"

namespace hess::report {

// Shortest text that parses back to the same double.
inline std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

inline double parse_double(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw ValidationError("not a number: '" + s + "'");
  return v;
}

inline std::vector<std::string> split(const std::string& line, char sep = ',') {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(line);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

inline constexpr const char* kSweepHeader = "mode,tau,rho,sparsity,e_cam,e_pc,seed";
inline constexpr const char* kAllocationHeader = "layer,head,hess,baseline,ideal,final";
inline constexpr const char* kLambdaHeader = "lambda,tau,rho,sparsity,e_cam,e_pc";

inline void write_sweep_csv(std::ostream& out, const std::vector<pipeline::ReportRow>& rows) {
  out << kSweepHeader << '\n';
  for (const auto& r : rows) {
    out << r.mode << ',' << fmt(r.tau) << ',' << fmt(r.rho) << ',' << fmt(r.sparsity) << ',' << fmt(r.e_cam) << ','
        << fmt(r.e_pc) << ',' << r.seed << '\n';
  }
}

inline std::vector<pipeline::ReportRow> read_sweep_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kSweepHeader) throw ValidationError("sweep report: unexpected header");
  std::vector<pipeline::ReportRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split(line);
    if (f.size() != 7) throw ValidationError("sweep report: expected 7 fields in '" + line + "'");
    pipeline::ReportRow r;
    r.mode = pipeline::to_string(pipeline::mode_from_string(f[0]));
    r.tau = parse_double(f[1]);
    r.rho = parse_double(f[2]);
    r.sparsity = parse_double(f[3]);
    r.e_cam = parse_double(f[4]);
    r.e_pc = parse_double(f[5]);
    r.seed = std::stoull(f[6]);
    if (!(r.tau >= 0 && r.tau <= 1 && r.rho >= 0 && r.rho <= 1 && r.sparsity >= 0 && r.sparsity <= 1)) {
      throw ValidationError("sweep report: fraction out of range in '" + line + "'");
    }
    if (!(r.e_cam >= 0.0) || (!std::isnan(r.e_pc) && !(r.e_pc >= 0.0))) {
      throw ValidationError("sweep report: negative error in '" + line + "'");
    }
    rows.push_back(r);
  }
  return rows;
}

// One line per (layer, head) of a sparse run.
inline void write_allocation_csv(std::ostream& out, const std::vector<budget::BudgetAllocation>& layers,
                                 const sens::HessTable* table) {
  out << kAllocationHeader << '\n';
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& a = layers[l];
    for (std::size_t h = 0; h < a.final.size(); ++h) {
      const double score = table ? table->at({l, h}).hess : a.weights[h];
      out << l << ',' << h << ',' << fmt(score) << ',' << a.baseline[h] << ',' << fmt(a.ideal[h]) << ','
          << a.final[h] << '\n';
    }
  }
}

struct AllocationRow {
  std::size_t layer = 0, head = 0;
  double hess = 0.0;
  std::size_t baseline = 0;
  double ideal = 0.0;
  std::size_t final = 0;
};

inline std::vector<AllocationRow> read_allocation_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kAllocationHeader) throw ValidationError("allocation dump: unexpected header");
  std::vector<AllocationRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split(line);
    if (f.size() != 6) throw ValidationError("allocation dump: expected 6 fields in '" + line + "'");
    rows.push_back({std::stoul(f[0]), std::stoul(f[1]), parse_double(f[2]), std::stoul(f[3]), parse_double(f[4]),
                    std::stoul(f[5])});
  }
  // Budgets are conserved per layer.
  std::map<std::size_t, std::pair<std::size_t, std::size_t>> sums;
  for (const auto& r : rows) {
    sums[r.layer].first += r.baseline;
    sums[r.layer].second += r.final;
  }
  for (const auto& [l, s] : sums)
    if (s.first != s.second) throw ValidationError("allocation dump: layer " + std::to_string(l) + " not conserved");
  return rows;
}

inline void write_lambda_csv(std::ostream& out, const std::vector<pipeline::LambdaRow>& rows) {
  out << kLambdaHeader << '\n';
  for (const auto& r : rows) {
    out << fmt(r.lambda) << ',' << fmt(r.tau) << ',' << fmt(r.rho) << ',' << fmt(r.sparsity) << ',' << fmt(r.e_cam)
        << ',' << fmt(r.e_pc) << '\n';
  }
}

// Line chart of e_cam against achieved sparsity, one polyline per mode.
inline void write_svg(std::ostream& out, const std::vector<pipeline::ReportRow>& rows) {
  const double w = 480, h = 320, m = 48;
  double ymax = 0.0;
  for (const auto& r : rows) ymax = std::max(ymax, r.e_cam);
  if (ymax <= 0.0) ymax = 1.0;
  auto px = [&](double s) { return m + s * (w - 2 * m); };
  auto py = [&](double e) { return h - m - e / ymax * (h - 2 * m); };
  const std::map<std::string, std::string> colors{{"uniform", "#1f77b4"}, {"hess", "#2ca02c"}, {"reverse", "#d62728"}};
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<line x1=\"" << m << "\" y1=\"" << h - m << "\" x2=\"" << w - m << "\" y2=\"" << h - m
      << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << m << "\" y1=\"" << m << "\" x2=\"" << m << "\" y2=\"" << h - m << "\" stroke=\"black\"/>\n";
  out << "<text x=\"" << w / 2 << "\" y=\"" << h - 12 << "\" text-anchor=\"middle\" font-size=\"12\">sparsity</text>\n";
  out << "<text x=\"14\" y=\"" << h / 2 << "\" font-size=\"12\" transform=\"rotate(-90 14 " << h / 2
      << ")\" text-anchor=\"middle\">e_cam (max " << fmt(ymax) << ")</text>\n";
  double legend_y = m;
  for (const auto& [mode, color] : colors) {
    std::vector<std::pair<double, double>> pts;
    for (const auto& r : rows)
      if (r.mode == mode) pts.emplace_back(r.sparsity, r.e_cam);
    if (pts.empty()) continue;
    std::sort(pts.begin(), pts.end());
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (const auto& [s, e] : pts) out << px(s) << ',' << py(e) << ' ';
    out << "\"/>\n";
    out << "<text x=\"" << w - m - 60 << "\" y=\"" << legend_y << "\" fill=\"" << color << "\" font-size=\"12\">"
        << mode << "</text>\n";
    legend_y += 16;
  }
  out << "</svg>\n";
}

}  // namespace hess::report
