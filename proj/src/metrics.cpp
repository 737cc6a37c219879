#include "drivenet/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>

namespace drivenet {

namespace {

struct GeoAccum {
  double sum_log = 0;
  int count = 0;
  void add(double x) {
    sum_log += std::log(x);
    ++count;
  }
  double mean() const { return std::exp(sum_log / count); }
};

// exp(RMS(ln x_i - ln center)) over the given ratios.
std::optional<double> geo_sd(const std::vector<double>& ratios, double center) {
  if (ratios.empty()) return std::nullopt;
  double sq = 0;
  for (double x : ratios) {
    const double d = std::log(x) - std::log(center);
    sq += d * d;
  }
  return std::exp(std::sqrt(sq / static_cast<double>(ratios.size())));
}

}  // namespace

ConvergenceStats convergence_stats(const LossCurve& curve,
                                   double warmup_factor) {
  if (curve.size() < 3) {
    throw std::invalid_argument("convergence_stats: need at least 3 epochs");
  }
  for (const auto& p : curve) {
    if (!(p.loss > 0) || !std::isfinite(p.loss)) {
      throw std::invalid_argument("convergence_stats: losses must be finite and positive");
    }
  }
  const int n = static_cast<int>(curve.size());
  int i_min = 0;
  for (int i = 1; i < n; ++i) {
    if (curve[static_cast<size_t>(i)].loss < curve[static_cast<size_t>(i_min)].loss) i_min = i;
  }
  const double l_min = curve[static_cast<size_t>(i_min)].loss;

  // leading epochs with l >> L* are excluded from the stability statistic
  int warmup_end = 0;
  while (warmup_end < n &&
         curve[static_cast<size_t>(warmup_end)].loss > warmup_factor * l_min) {
    ++warmup_end;
  }

  GeoAccum conv, div;
  std::vector<double> conv_stable, div_all;
  for (int e = 1; e < n; ++e) {
    const double num = curve[static_cast<size_t>(e)].loss - l_min;
    const double den = curve[static_cast<size_t>(e - 1)].loss - l_min;
    if (num <= 0 || den <= 0) continue;
    const double ratio = num / den;
    if (e <= i_min) {
      conv.add(ratio);
      if (e >= warmup_end) conv_stable.push_back(ratio);
    } else {
      div.add(ratio);
      div_all.push_back(ratio);
    }
  }
  if (conv.count == 0) {
    throw std::invalid_argument(
        "convergence_stats: every pre-minimum ratio was excluded");
  }

  ConvergenceStats stats;
  stats.r = conv.mean();
  stats.min_loss = l_min;
  stats.epoch_min = curve[static_cast<size_t>(i_min)].epoch;
  stats.warmup_excluded = warmup_end;
  stats.sigma_r = geo_sd(conv_stable, stats.r);
  if (div.count > 0) {
    stats.r_div = div.mean();
    stats.sigma_r_div = geo_sd(div_all, *stats.r_div);
  }
  return stats;
}

double autonomy(double t_seconds, int failures) {
  if (!(t_seconds > 0)) throw std::invalid_argument("autonomy: t must be > 0");
  if (failures < 0) throw std::invalid_argument("autonomy: n must be >= 0");
  const double a = (t_seconds - 6.0 * failures) / t_seconds;
  if (a < 0) {
    std::cerr << "warning: autonomy clamped to 0 (6n=" << 6.0 * failures
              << " exceeds t=" << t_seconds << ")\n";
    return 0.0;
  }
  return a;
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}
std::string fmt(const std::optional<double>& v) {
  return v ? fmt(*v) : std::string();
}

}  // namespace

void write_report(const std::vector<ReportRow>& rows, const std::string& path) {
  if (rows.empty()) throw std::invalid_argument("write_report: no rows");
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("write_report: cannot open " + path);
  out << "model,r,r_div,sigma_r,sigma_r_div,min_loss,epochs,parameters\n";
  for (const auto& row : rows) {
    out << row.model << ',' << fmt(row.stats.r) << ',' << fmt(row.stats.r_div)
        << ',' << fmt(row.stats.sigma_r) << ',' << fmt(row.stats.sigma_r_div)
        << ',' << fmt(row.stats.min_loss) << ',' << row.stats.epoch_min << ','
        << row.parameters << "\n";
  }
  if (!out) throw std::runtime_error("write_report: write failed: " + path);
}

LossCurve read_metrics_csv(const std::string& path, std::string* model_name,
                           std::int64_t* parameters) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_metrics_csv: cannot open " + path);
  LossCurve curve;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream hs(line.substr(1));
      std::string token;
      while (hs >> token) {
        const auto eq = token.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = token.substr(0, eq), val = token.substr(eq + 1);
        if (key == "model" && model_name) *model_name = val;
        if (key == "params" && parameters) *parameters = std::stoll(val);
      }
      continue;
    }
    if (line.rfind("epoch", 0) == 0) continue;  // header
    const auto comma = line.find(',');
    if (comma == std::string::npos) {
      throw std::runtime_error("read_metrics_csv: malformed row: " + line);
    }
    curve.push_back({std::stoi(line.substr(0, comma)),
                     std::stod(line.substr(comma + 1))});
  }
  return curve;
}

}  // namespace drivenet
