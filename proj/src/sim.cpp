#include "drivenet/sim.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "drivenet/metrics.hpp"
#include "drivenet/rng.hpp"

namespace drivenet {
namespace sim {

namespace {

double wrap_angle(double a) { return std::remainder(a, 2.0 * M_PI); }

// Unsigned curvature from three consecutive points (circumscribed circle).
double three_point_curvature(const Vec2& a, const Vec2& b, const Vec2& c) {
  const Vec2 ab = b - a, bc = c - b, ac = c - a;
  const double cross = ab.x() * bc.y() - ab.y() * bc.x();
  const double denom = ab.norm() * bc.norm() * ac.norm();
  if (denom < 1e-12) return 0;
  return 2.0 * std::abs(cross) / denom;
}

}  // namespace

int Track::cell_of(double x, double y) const {
  const int cx = static_cast<int>(std::floor((x - grid_origin_.x()) / cell_size_));
  const int cy = static_cast<int>(std::floor((y - grid_origin_.y()) / cell_size_));
  if (cx < 0 || cy < 0 || cx >= grid_nx_ || cy >= grid_ny_) return -1;
  return cy * grid_nx_ + cx;
}

double Track::segment_distance(int seg, const Vec2& p, double* t_out) const {
  const int n = static_cast<int>(centerline.size());
  const Vec2& a = centerline[static_cast<size_t>(seg)];
  const Vec2& b = centerline[static_cast<size_t>((seg + 1) % n)];
  const Vec2 ab = b - a;
  const double len2 = ab.squaredNorm();
  double t = len2 > 0 ? (p - a).dot(ab) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  if (t_out) *t_out = t;
  return (p - (a + t * ab)).norm();
}

void Track::build_index() {
  const int n = static_cast<int>(centerline.size());
  if (n < 3) throw std::invalid_argument("track: centerline too short");
  arc.assign(static_cast<size_t>(n), 0.0);
  total_length_ = 0;
  for (int i = 0; i < n; ++i) {
    arc[static_cast<size_t>(i)] = total_length_;
    total_length_ +=
        (centerline[static_cast<size_t>((i + 1) % n)] - centerline[static_cast<size_t>(i)]).norm();
  }
  curvature.assign(static_cast<size_t>(n), 0.0);
  for (int i = 0; i < n; ++i) {
    curvature[static_cast<size_t>(i)] = three_point_curvature(
        centerline[static_cast<size_t>((i + n - 1) % n)], centerline[static_cast<size_t>(i)],
        centerline[static_cast<size_t>((i + 1) % n)]);
  }
  Vec2 lo = centerline[0], hi = centerline[0];
  for (const auto& p : centerline) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  const double margin = half_width + 1.0;
  grid_origin_ = lo - Vec2(margin, margin);
  const Vec2 span = hi - lo + 2 * Vec2(margin, margin);
  grid_nx_ = std::max(1, static_cast<int>(std::ceil(span.x() / cell_size_)));
  grid_ny_ = std::max(1, static_cast<int>(std::ceil(span.y() / cell_size_)));
  grid_.assign(static_cast<size_t>(grid_nx_) * grid_ny_, {});
  for (int i = 0; i < n; ++i) {
    const Vec2& a = centerline[static_cast<size_t>(i)];
    const Vec2& b = centerline[static_cast<size_t>((i + 1) % n)];
    const Vec2 s_lo = a.cwiseMin(b), s_hi = a.cwiseMax(b);
    const int cx0 = static_cast<int>(std::floor((s_lo.x() - grid_origin_.x()) / cell_size_));
    const int cy0 = static_cast<int>(std::floor((s_lo.y() - grid_origin_.y()) / cell_size_));
    const int cx1 = static_cast<int>(std::floor((s_hi.x() - grid_origin_.x()) / cell_size_));
    const int cy1 = static_cast<int>(std::floor((s_hi.y() - grid_origin_.y()) / cell_size_));
    for (int cy = cy0; cy <= cy1; ++cy) {
      for (int cx = cx0; cx <= cx1; ++cx) {
        if (cx >= 0 && cy >= 0 && cx < grid_nx_ && cy < grid_ny_) {
          grid_[static_cast<size_t>(cy) * grid_nx_ + cx].push_back(i);
        }
      }
    }
  }
}

bool Track::within(const Vec2& p, double radius) const {
  const int reach = static_cast<int>(std::ceil(radius / cell_size_));
  const int cx = static_cast<int>(std::floor((p.x() - grid_origin_.x()) / cell_size_));
  const int cy = static_cast<int>(std::floor((p.y() - grid_origin_.y()) / cell_size_));
  for (int dy = -reach; dy <= reach; ++dy) {
    for (int dx = -reach; dx <= reach; ++dx) {
      const int gx = cx + dx, gy = cy + dy;
      if (gx < 0 || gy < 0 || gx >= grid_nx_ || gy >= grid_ny_) continue;
      for (int seg : grid_[static_cast<size_t>(gy) * grid_nx_ + gx]) {
        if (segment_distance(seg, p, nullptr) <= radius) return true;
      }
    }
  }
  return false;
}

Track::Nearest Track::nearest(const Vec2& p) const {
  const int n = static_cast<int>(centerline.size());
  const int cx = static_cast<int>(std::floor((p.x() - grid_origin_.x()) / cell_size_));
  const int cy = static_cast<int>(std::floor((p.y() - grid_origin_.y()) / cell_size_));
  double best = std::numeric_limits<double>::infinity();
  int best_seg = -1;
  double best_t = 0;
  const int max_reach = std::max(grid_nx_, grid_ny_);
  for (int reach = 0; reach <= max_reach; ++reach) {
    // scan the ring of cells at Chebyshev distance `reach`
    for (int dy = -reach; dy <= reach; ++dy) {
      for (int dx = -reach; dx <= reach; ++dx) {
        if (std::max(std::abs(dx), std::abs(dy)) != reach) continue;
        const int gx = cx + dx, gy = cy + dy;
        if (gx < 0 || gy < 0 || gx >= grid_nx_ || gy >= grid_ny_) continue;
        for (int seg : grid_[static_cast<size_t>(gy) * grid_nx_ + gx]) {
          double t;
          const double d = segment_distance(seg, p, &t);
          if (d < best) {
            best = d;
            best_seg = seg;
            best_t = t;
          }
        }
      }
    }
    // anything in an unscanned cell is at least (reach-1) cells away
    if (best_seg >= 0 && best <= (reach - 1) * cell_size_) break;
  }
  if (best_seg < 0) {
    for (int seg = 0; seg < n; ++seg) {
      double t;
      const double d = segment_distance(seg, p, &t);
      if (d < best) {
        best = d;
        best_seg = seg;
        best_t = t;
      }
    }
  }
  const Vec2& a = centerline[static_cast<size_t>(best_seg)];
  const Vec2& b = centerline[static_cast<size_t>((best_seg + 1) % n)];
  const double seg_len = (b - a).norm();
  Nearest out;
  out.distance = best;
  out.arc_pos = arc[static_cast<size_t>(best_seg)] + best_t * seg_len;
  out.point = a + best_t * (b - a);
  out.tangent = seg_len > 0 ? Vec2((b - a) / seg_len) : Vec2(1, 0);
  return out;
}

Vec2 Track::point_at_arc(double s) const {
  const int n = static_cast<int>(centerline.size());
  s = std::fmod(s, total_length_);
  if (s < 0) s += total_length_;
  // uniform resampling makes the segment lookup a division
  const double spacing = total_length_ / n;
  int i = std::min(n - 1, static_cast<int>(s / spacing));
  while (i + 1 < n && arc[static_cast<size_t>(i + 1)] <= s) ++i;
  while (i > 0 && arc[static_cast<size_t>(i)] > s) --i;
  const Vec2& a = centerline[static_cast<size_t>(i)];
  const Vec2& b = centerline[static_cast<size_t>((i + 1) % n)];
  const double seg_len = (b - a).norm();
  const double t = seg_len > 0 ? (s - arc[static_cast<size_t>(i)]) / seg_len : 0;
  return a + std::clamp(t, 0.0, 1.0) * (b - a);
}

Vec2 Track::tangent_at_arc(double s) const {
  const int n = static_cast<int>(centerline.size());
  s = std::fmod(s, total_length_);
  if (s < 0) s += total_length_;
  const double spacing = total_length_ / n;
  int i = std::min(n - 1, static_cast<int>(s / spacing));
  while (i + 1 < n && arc[static_cast<size_t>(i + 1)] <= s) ++i;
  while (i > 0 && arc[static_cast<size_t>(i)] > s) --i;
  const Vec2 d = centerline[static_cast<size_t>((i + 1) % n)] - centerline[static_cast<size_t>(i)];
  const double len = d.norm();
  return len > 0 ? Vec2(d / len) : Vec2(1, 0);
}

double Track::curvature_max(double s_from, double window) const {
  const int n = static_cast<int>(centerline.size());
  const double spacing = total_length_ / n;
  const int count = std::max(1, static_cast<int>(window / spacing));
  const int start = static_cast<int>(std::fmod(std::max(s_from, 0.0), total_length_) / spacing);
  double k = 0;
  for (int j = 0; j <= count; ++j) {
    k = std::max(k, curvature[static_cast<size_t>((start + j) % n)]);
  }
  return k;
}

Track generate_track(std::uint64_t seed) {
  Rng rng(splitmix64(seed ^ 0x7261636b));
  Track track;
  track.seed = seed;
  const double r0 = rng.uniform(10.0, 16.0);
  double amp[4], phase[4];
  for (int k = 0; k < 4; ++k) {
    amp[k] = rng.uniform(0.02, 0.07) * 2.0 / (k + 2);
    phase[k] = rng.uniform(0.0, 2.0 * M_PI);
  }
  double scale = 1.0;
  for (int attempt = 0; attempt < 40; ++attempt, scale *= 0.75) {
    // radial perturbation of a circle; star-shaped, hence simple
    const int m = 4096;
    std::vector<Vec2> raw(static_cast<size_t>(m));
    for (int i = 0; i < m; ++i) {
      const double phi = 2.0 * M_PI * i / m;
      double r = 1.0;
      for (int k = 0; k < 4; ++k) {
        r += scale * amp[k] * std::cos((k + 2) * phi + phase[k]);
      }
      r *= r0;
      raw[static_cast<size_t>(i)] = Vec2(r * std::cos(phi), r * std::sin(phi));
    }
    // resample at uniform arc steps of ~5 cm
    double total = 0;
    std::vector<double> cum(static_cast<size_t>(m + 1), 0.0);
    for (int i = 0; i < m; ++i) {
      total += (raw[static_cast<size_t>((i + 1) % m)] - raw[static_cast<size_t>(i)]).norm();
      cum[static_cast<size_t>(i + 1)] = total;
    }
    const int points = std::max(64, static_cast<int>(total / 0.05));
    const double spacing = total / points;
    std::vector<Vec2> line(static_cast<size_t>(points));
    int seg = 0;
    for (int i = 0; i < points; ++i) {
      const double s = i * spacing;
      while (seg + 1 <= m && cum[static_cast<size_t>(seg + 1)] <= s) ++seg;
      const Vec2& a = raw[static_cast<size_t>(seg % m)];
      const Vec2& b = raw[static_cast<size_t>((seg + 1) % m)];
      const double seg_len = cum[static_cast<size_t>(seg + 1)] - cum[static_cast<size_t>(seg)];
      const double t = seg_len > 0 ? (s - cum[static_cast<size_t>(seg)]) / seg_len : 0;
      line[static_cast<size_t>(i)] = a + t * (b - a);
    }
    track.centerline = std::move(line);
    track.build_index();
    double k_max = 0;
    for (double k : track.curvature) k_max = std::max(k_max, k);
    const bool curvature_ok = k_max <= 1.0 / std::max(2.0 * kWheelbase, 2.5);
    const bool length_ok = track.length() >= 50.0 && track.length() <= 150.0;
    if (curvature_ok && length_ok) return track;
  }
  throw std::runtime_error("generate_track: constraints not met");
}

VehicleState step_vehicle(const VehicleState& state, float steer, float motor,
                          double dt) {
  if (!(steer >= 0.0f && steer <= 1.0f) || !(motor >= 0.0f && motor <= 1.0f)) {
    throw std::invalid_argument("step_vehicle: controls outside [0,1]");
  }
  const double delta = std::clamp((static_cast<double>(steer) - 0.5) *
                                      (60.0 * M_PI / 180.0),
                                  -kMaxSteerRad, kMaxSteerRad);
  VehicleState next = state;
  next.speed = static_cast<double>(motor) * kVMax;
  next.x = state.x + next.speed * std::cos(state.heading) * dt;
  next.y = state.y + next.speed * std::sin(state.heading) * dt;
  next.heading = wrap_angle(state.heading +
                            (next.speed / kWheelbase) * std::tan(delta) * dt);
  return next;
}

void render_view(const Track& track, const VehicleState& state,
                 double lateral_offset, std::uint8_t* out) {
  const Vec2 fwd(std::cos(state.heading), std::sin(state.heading));
  const Vec2 left(-std::sin(state.heading), std::cos(state.heading));
  const Vec2 origin = state.position() + lateral_offset * left;
  for (int r = 0; r < kObsHeight; ++r) {
    const double d = (kObsHeight - 1 - r + 0.5) * kObsRes;
    const Vec2 base = origin + d * fwd;
    std::uint8_t* row = out + static_cast<std::int64_t>(r) * kObsWidth;
    for (int c = 0; c < kObsWidth; ++c) {
      const double u = (c + 0.5 - kObsWidth / 2.0) * kObsRes;
      row[c] = track.within(base + u * left, track.half_width) ? 230 : 25;
    }
  }
}

std::vector<std::uint8_t> render_observation(const Track& track,
                                             const VehicleState& state) {
  std::vector<std::uint8_t> obs(2u * kObsHeight * kObsWidth);
  render_view(track, state, -kStereoBaseline, obs.data());
  render_view(track, state, kStereoBaseline,
              obs.data() + static_cast<std::int64_t>(kObsHeight) * kObsWidth);
  return obs;
}

std::pair<float, float> expert_control(const Track& track,
                                       const VehicleState& state) {
  const auto near = track.nearest(state.position());
  const double lookahead = 0.5;
  const Vec2 target = track.point_at_arc(near.arc_pos + lookahead);
  const Vec2 d = target - state.position();
  const double dist = std::max(d.norm(), 1e-6);
  const double alpha = wrap_angle(std::atan2(d.y(), d.x()) - state.heading);
  const double kappa_pp = 2.0 * std::sin(alpha) / dist;
  const double delta = std::atan(kappa_pp * kWheelbase);
  const double steer =
      std::clamp(0.5 + delta / (60.0 * M_PI / 180.0), 0.0, 1.0);
  const double kappa = track.curvature_max(near.arc_pos, 1.5);
  const double v_target = std::clamp(kVMax * (1.0 - kappa * kWheelbase * 2.0),
                                     0.3 * kVMax, kVMax);
  return {static_cast<float>(steer), static_cast<float>(v_target / kVMax)};
}

VehicleState start_state(const Track& track) {
  VehicleState s;
  const Vec2 p = track.centerline[0];
  const Vec2 t = track.tangent_at_arc(0);
  s.x = p.x();
  s.y = p.y();
  s.heading = std::atan2(t.y(), t.x());
  s.speed = 0;
  return s;
}

Episode record_episode(const Track& track, double duration_s,
                       double start_lateral_offset,
                       double start_heading_offset,
                       std::vector<VehicleState>* trajectory) {
  if (duration_s < 2.0) {
    throw std::invalid_argument("record_episode: duration must be >= 2 s");
  }
  const int steps = static_cast<int>(std::llround(duration_s / kDt));
  VehicleState state = start_state(track);
  const Vec2 left(-std::sin(state.heading), std::cos(state.heading));
  state.x += start_lateral_offset * left.x();
  state.y += start_lateral_offset * left.y();
  state.heading = wrap_angle(state.heading + start_heading_offset);

  Episode ep;
  ep.fps = static_cast<float>(1.0 / kDt);
  ep.height = kObsHeight;
  ep.width = kObsWidth;
  ep.channels = 2;
  ep.seed = track.seed;
  ep.source = Episode::Source::simulated;
  ep.frames.reserve(static_cast<size_t>(steps) * 2 * kObsHeight * kObsWidth);
  ep.controls.reserve(static_cast<size_t>(steps) * 2);
  for (int i = 0; i < steps; ++i) {
    auto obs = render_observation(track, state);
    ep.frames.insert(ep.frames.end(), obs.begin(), obs.end());
    const auto [steer, motor] = expert_control(track, state);
    ep.controls.push_back(steer);
    ep.controls.push_back(motor);
    if (trajectory) trajectory->push_back(state);
    state = step_vehicle(state, steer, motor);
  }
  ep.validate();
  return ep;
}

namespace {

struct RolloutAccounting {
  double seg_time = 0, seg_dist = 0;
  double total_dist = 0;
  std::vector<double> fail_times, fail_dists;

  void advance(double dt, double dist) {
    seg_time += dt;
    seg_dist += dist;
    total_dist += dist;
  }
  void fail() {
    fail_times.push_back(seg_time);
    fail_dists.push_back(seg_dist);
    seg_time = seg_dist = 0;
  }
};

bool off_track(const Track& track, const VehicleState& state) {
  const Vec2 fwd(std::cos(state.heading), std::sin(state.heading));
  const Vec2 left(-std::sin(state.heading), std::cos(state.heading));
  const Vec2 front = state.position() + kWheelbase * fwd;
  const Vec2 wheel_l = front + kHalfTrack * left;
  const Vec2 wheel_r = front - kHalfTrack * left;
  // a failure needs BOTH front wheels off the surface
  return !track.within(wheel_l, track.half_width) &&
         !track.within(wheel_r, track.half_width);
}

VehicleState reset_state(const Track& track, const VehicleState& state) {
  const auto near = track.nearest(state.position());
  VehicleState s;
  s.x = near.point.x();
  s.y = near.point.y();
  s.heading = std::atan2(near.tangent.y(), near.tangent.x());
  s.speed = 0;
  return s;
}

template <class ControlFn>
EvalReport run_rollout(const Track& track, double duration_s, ControlFn control,
                       std::vector<std::vector<std::uint8_t>>* buffer) {
  const int steps = static_cast<int>(std::llround(duration_s / kDt));
  VehicleState state = start_state(track);
  if (buffer) buffer->assign(kWindowInputFrames, render_observation(track, state));
  RolloutAccounting acct;
  int failures = 0;
  for (int i = 0; i < steps; ++i) {
    const auto [steer, motor] = control(state);
    const VehicleState next = step_vehicle(state, steer, motor);
    acct.advance(kDt, (next.position() - state.position()).norm());
    if (off_track(track, next)) {
      ++failures;
      acct.fail();
      state = reset_state(track, next);
      if (buffer) buffer->assign(kWindowInputFrames, render_observation(track, state));
    } else {
      state = next;
      if (buffer) {
        buffer->erase(buffer->begin());
        buffer->push_back(render_observation(track, state));
      }
    }
  }
  EvalReport report;
  report.duration_s = steps * kDt;
  report.failures = failures;
  report.autonomy = autonomy(report.duration_s, failures);
  if (failures > 0) {
    double t_sum = 0, d_sum = 0;
    for (double t : acct.fail_times) t_sum += t;
    for (double d : acct.fail_dists) d_sum += d;
    report.time_to_failure_avg = t_sum / failures;
    report.distance_to_failure_avg = d_sum / failures;
  } else {
    report.time_to_failure_avg = report.duration_s;
    report.distance_to_failure_avg = acct.total_dist;
  }
  return report;
}

}  // namespace

EvalReport closed_loop_eval(Model<float>& model, const Track& track,
                            double duration_s) {
  const ModelConfig& cfg = model.config();
  if (cfg.input_height != kObsHeight || cfg.input_width != kObsWidth ||
      cfg.channels_per_frame != 2 || cfg.frames_in != kWindowInputFrames) {
    throw std::invalid_argument(
        "closed_loop_eval: model config does not match the rendered observations");
  }
  std::vector<std::vector<std::uint8_t>> buffer;
  const Index plane = static_cast<Index>(kObsHeight) * kObsWidth;
  auto control = [&](const VehicleState&) -> std::pair<float, float> {
    TensorF input = model.kind() == ModelKind::frfcn
                        ? TensorF({1, cfg.frames_in, 2, kObsHeight, kObsWidth})
                        : TensorF({1, cfg.frames_in * 2, kObsHeight, kObsWidth});
    float* dst = input.data();
    for (int f = 0; f < cfg.frames_in; ++f) {
      const std::uint8_t* src = buffer[static_cast<size_t>(f)].data();
      for (Index i = 0; i < 2 * plane; ++i) {
        dst[static_cast<Index>(f) * 2 * plane + i] = src[i] * (1.0f / 255.0f);
      }
    }
    TensorF pred = model.forward(input, Mode::eval);
    const float steer = std::clamp(pred.at({0, 0, 0}), 0.0f, 1.0f);
    const float motor = std::clamp(pred.at({0, 0, 1}), 0.0f, 1.0f);
    return {steer, motor};
  };
  return run_rollout(track, duration_s, control, &buffer);
}

EvalReport closed_loop_expert(const Track& track, double duration_s) {
  auto control = [&](const VehicleState& s) { return expert_control(track, s); };
  return run_rollout(track, duration_s, control, nullptr);
}

void append_eval_csv(const EvalReport& report, std::uint64_t track_seed,
                     const std::string& path) {
  const bool fresh = !std::filesystem::exists(path);
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("append_eval_csv: cannot open " + path);
  if (fresh) {
    out << "track_seed,duration_s,failures,autonomy,avg_time_to_failure_s,"
           "avg_distance_to_failure_m\n";
  }
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%llu,%.9g,%d,%.9g,%.9g,%.9g\n",
                static_cast<unsigned long long>(track_seed), report.duration_s,
                report.failures, report.autonomy, report.time_to_failure_avg,
                report.distance_to_failure_avg);
  out << buf;
}

}  // namespace sim
}  // namespace drivenet
