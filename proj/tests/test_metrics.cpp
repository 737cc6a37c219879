#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>

#include "drivenet/metrics.hpp"
#include "drivenet/rng.hpp"

using namespace drivenet;

namespace {

LossCurve curve_of(std::initializer_list<double> losses) {
  LossCurve c;
  int e = 1;
  for (double l : losses) c.push_back({e++, l});
  return c;
}

// Independent transcription of the convergence statistics, written as plain
// loops straight from the definitions; the implementation must agree with
// this to near machine precision.
struct OracleStats {
  std::optional<double> r, r_div, sigma_r, sigma_r_div;
  double min_loss = 0;
  int epoch_min = 0;
};

OracleStats oracle(const LossCurve& c, double warmup = 2.0) {
  OracleStats o;
  const int n = static_cast<int>(c.size());
  int imin = 0;
  for (int i = 0; i < n; ++i) {
    if (c[static_cast<size_t>(i)].loss < c[static_cast<size_t>(imin)].loss) imin = i;
  }
  o.min_loss = c[static_cast<size_t>(imin)].loss;
  o.epoch_min = c[static_cast<size_t>(imin)].epoch;
  int wend = 0;
  while (wend < n && c[static_cast<size_t>(wend)].loss > warmup * o.min_loss) ++wend;

  std::vector<double> pre, pre_stable, post;
  for (int e = 1; e < n; ++e) {
    const double num = c[static_cast<size_t>(e)].loss - o.min_loss;
    const double den = c[static_cast<size_t>(e - 1)].loss - o.min_loss;
    if (num <= 0 || den <= 0) continue;
    if (e <= imin) {
      pre.push_back(num / den);
      if (e >= wend) pre_stable.push_back(num / den);
    } else {
      post.push_back(num / den);
    }
  }
  auto geomean = [](const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += std::log(x);
    return std::exp(s / static_cast<double>(v.size()));
  };
  auto geosd = [](const std::vector<double>& v, double mean) {
    double s = 0;
    for (double x : v) {
      const double d = std::log(x) - std::log(mean);
      s += d * d;
    }
    return std::exp(std::sqrt(s / static_cast<double>(v.size())));
  };
  if (!pre.empty()) {
    o.r = geomean(pre);
    if (!pre_stable.empty()) o.sigma_r = geosd(pre_stable, *o.r);
  }
  if (!post.empty()) {
    o.r_div = geomean(post);
    o.sigma_r_div = geosd(post, *o.r_div);
  }
  return o;
}

}  // namespace

TEST_CASE("hand-computed example") {
  auto stats = convergence_stats(curve_of({0.9, 0.3, 0.15, 0.1}));
  // ratios 0.25 and 0.25; the minimum-epoch term has numerator zero and is
  // excluded, otherwise r would always be zero
  CHECK(stats.r == doctest::Approx(0.25).epsilon(1e-12));
  REQUIRE(stats.sigma_r.has_value());
  CHECK(*stats.sigma_r == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(stats.min_loss == doctest::Approx(0.1));
  CHECK(stats.epoch_min == 4);
  CHECK(!stats.r_div.has_value());  // monotone curve, nothing after the min
}

TEST_CASE("pure geometric decay recovers its ratio exactly") {
  const double rho = 0.8, lstar = 0.05, c0 = 0.7;
  LossCurve c;
  for (int e = 0; e < 20; ++e) {
    c.push_back({e + 1, lstar + c0 * std::pow(rho, e)});
  }
  c.push_back({21, lstar});  // attain the minimum
  auto stats = convergence_stats(c);
  CHECK(stats.r == doctest::Approx(rho).epsilon(1e-10));
  REQUIRE(stats.sigma_r.has_value());
  CHECK(*stats.sigma_r == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("rising tail defines the divergence rate") {
  auto stats = convergence_stats(curve_of({0.8, 0.2, 0.1, 0.14, 0.18}));
  REQUIRE(stats.r_div.has_value());
  // ratios after the min: (0.14-0.1)/(0.18-0.1) needs epoch_min term skipped:
  // e=4: (0.04)/(0) invalid, e=5: 0.08/0.04 = 2
  CHECK(*stats.r_div == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("error cases") {
  CHECK_THROWS_AS(convergence_stats(curve_of({0.5, 0.4})), std::invalid_argument);
  CHECK_THROWS_AS(convergence_stats(curve_of({0.3, 0.3, 0.3, 0.3})),
                  std::invalid_argument);  // every term excluded
  CHECK_THROWS_AS(convergence_stats(curve_of({0.5, 0.4, std::nan("")})),
                  std::invalid_argument);
  CHECK_THROWS_AS(convergence_stats(curve_of({0.5, -0.1, 0.4})),
                  std::invalid_argument);
}

TEST_CASE("statistics are scale invariant and r is shift invariant") {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    LossCurve c;
    const int len = 5 + static_cast<int>(rng.uniform_int(20));
    for (int e = 0; e < len; ++e) {
      c.push_back({e + 1, 0.01 + std::exp(rng.uniform(-4.0, 0.0))});
    }
    ConvergenceStats base;
    try {
      base = convergence_stats(c);
    } catch (const std::invalid_argument&) {
      continue;
    }
    const double k = std::exp(rng.uniform(-2.0, 3.0));
    LossCurve scaled = c;
    for (auto& p : scaled) p.loss *= k;
    auto s = convergence_stats(scaled);
    CHECK(s.r == doctest::Approx(base.r).epsilon(1e-9));
    CHECK(s.r_div.has_value() == base.r_div.has_value());
    if (base.r_div) CHECK(*s.r_div == doctest::Approx(*base.r_div).epsilon(1e-9));
    if (base.sigma_r) CHECK(*s.sigma_r == doctest::Approx(*base.sigma_r).epsilon(1e-9));
    if (base.sigma_r_div) {
      CHECK(*s.sigma_r_div == doctest::Approx(*base.sigma_r_div).epsilon(1e-9));
    }

    // shifting changes L* but not any individual ratio, hence not r
    LossCurve shifted = c;
    for (auto& p : shifted) p.loss += 0.37;
    auto sh = convergence_stats(shifted);
    CHECK(sh.r == doctest::Approx(base.r).epsilon(1e-9));
  }
}

TEST_CASE("implementation agrees with the brute-force transcription") {
  Rng rng(23);
  int compared = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    LossCurve c;
    const int len = 3 + static_cast<int>(rng.uniform_int(40));
    // geometric-ish decay with noise and a occasional rising tail
    double level = std::exp(rng.uniform(-2.0, 1.0));
    const double floor_loss = std::exp(rng.uniform(-6.0, -3.0));
    for (int e = 0; e < len; ++e) {
      c.push_back({e + 1, floor_loss + level * std::exp(rng.uniform(-0.7, 0.25))});
      level *= rng.uniform(0.5, 1.05);
    }
    OracleStats expected = oracle(c);
    ConvergenceStats got;
    bool threw = false;
    try {
      got = convergence_stats(c);
    } catch (const std::invalid_argument&) {
      threw = true;
    }
    if (!expected.r.has_value()) {
      CHECK(threw);
      continue;
    }
    REQUIRE(!threw);
    ++compared;
    CHECK(std::abs(got.r - *expected.r) <= 1e-12 * std::max(1.0, std::abs(*expected.r)));
    CHECK(got.min_loss == expected.min_loss);
    CHECK(got.epoch_min == expected.epoch_min);
    CHECK(got.r_div.has_value() == expected.r_div.has_value());
    if (expected.r_div) {
      CHECK(std::abs(*got.r_div - *expected.r_div) <=
            1e-12 * std::max(1.0, std::abs(*expected.r_div)));
    }
    CHECK(got.sigma_r.has_value() == expected.sigma_r.has_value());
    if (expected.sigma_r) {
      CHECK(std::abs(*got.sigma_r - *expected.sigma_r) <= 1e-12 * std::abs(*expected.sigma_r));
    }
    if (expected.sigma_r_div) {
      CHECK(std::abs(*got.sigma_r_div - *expected.sigma_r_div) <=
            1e-12 * std::abs(*expected.sigma_r_div));
    }
  }
  CHECK(compared > 500);  // the generator must exercise the real path
}

TEST_CASE("autonomy formula") {
  CHECK(autonomy(100, 0) == 1.0);
  CHECK(autonomy(100, 3) == doctest::Approx(0.82).epsilon(1e-15));
  CHECK(autonomy(12, 2) == 0.0);
  CHECK(autonomy(10, 2) == 0.0);  // clamped with a warning
  CHECK_THROWS_AS(autonomy(0, 0), std::invalid_argument);
  CHECK_THROWS_AS(autonomy(10, -1), std::invalid_argument);
}

TEST_CASE("report CSV round trip") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "drivenet_metrics_test";
  fs::create_directories(dir);
  const std::string path = (dir / "report.csv").string();

  ReportRow a{"fcn", convergence_stats(curve_of({0.9, 0.3, 0.15, 0.1})), 85032};
  ReportRow b{"frfcn", convergence_stats(curve_of({0.5, 0.2, 0.11, 0.1, 0.13})), 130250};
  write_report({a, b}, path);

  std::ifstream in(path);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  REQUIRE(lines.size() == 3);  // header + 2 rows
  CHECK(lines[0] ==
        "model,r,r_div,sigma_r,sigma_r_div,min_loss,epochs,parameters");
  // parse row back and compare to 6 significant digits
  double r_parsed = 0;
  char name[16];
  REQUIRE(std::sscanf(lines[1].c_str(), "%15[^,],%lf", name, &r_parsed) == 2);
  CHECK(std::string(name) == "fcn");
  CHECK(r_parsed == doctest::Approx(a.stats.r).epsilon(1e-6));

  CHECK_THROWS_AS(write_report({}, path), std::invalid_argument);
  fs::remove_all(dir);
}

TEST_CASE("metrics csv reader recovers the training header") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "drivenet_metrics_test2";
  fs::create_directories(dir);
  const std::string path = (dir / "m.csv").string();
  {
    std::ofstream out(path);
    out << "# model=squeezefcn params=87672\n";
    out << "epoch,val_loss\n";
    out << "1,0.25\n2,0.125\n3,0.05\n";
  }
  std::string model;
  std::int64_t params = 0;
  LossCurve c = read_metrics_csv(path, &model, &params);
  CHECK(model == "squeezefcn");
  CHECK(params == 87672);
  REQUIRE(c.size() == 3);
  CHECK(c[2].epoch == 3);
  CHECK(c[2].loss == doctest::Approx(0.05));
  fs::remove_all(dir);
}
