#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace drivenet {

struct LossPoint {
  int epoch;
  double loss;
};
using LossCurve = std::vector<LossPoint>;

// Convergence-rate statistics of a validation-loss curve.
//
// With L* the minimum loss and e* the first epoch attaining it, the
// per-epoch ratio is r_e = (l_e - L*) / (l_{e-1} - L*). r is the geometric
// mean of the valid ratios (numerator and denominator both positive) up to
// and including e*; r_div is the same over the epochs after e*. Each sigma
// is exp of the RMS deviation of ln r_e from ln of the corresponding mean.
// For sigma_r the leading epochs with l_e > warmup_factor * L* are dropped
// first, so initial training noise does not count against stability.
struct ConvergenceStats {
  double r = 0;
  std::optional<double> r_div;
  std::optional<double> sigma_r;
  std::optional<double> sigma_r_div;
  double min_loss = 0;
  int epoch_min = 0;
  int warmup_excluded = 0;
};

ConvergenceStats convergence_stats(const LossCurve& curve,
                                   double warmup_factor = 2.0);

// (t - 6n) / t: every failure costs a fixed six seconds of the run.
// Clamps to zero (with a warning) if 6n exceeds t.
double autonomy(double t_seconds, int failures);

struct ReportRow {
  std::string model;
  ConvergenceStats stats;
  std::int64_t parameters = 0;
};

void write_report(const std::vector<ReportRow>& rows, const std::string& path);

// Reads a metrics CSV written by training: an optional first comment line
// "# model=<kind> params=<count>", a header, then epoch,val_loss rows.
LossCurve read_metrics_csv(const std::string& path,
                           std::string* model_name = nullptr,
                           std::int64_t* parameters = nullptr);

}  // namespace drivenet
