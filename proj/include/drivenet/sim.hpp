#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <string>
#include <vector>

#include "drivenet/data.hpp"
#include "drivenet/model.hpp"

namespace drivenet {
namespace sim {

using Vec2 = Eigen::Vector2d;

constexpr double kWheelbase = 0.25;   // m
constexpr double kHalfTrack = 0.08;   // lateral front-wheel offset, m
constexpr double kVMax = 3.0;         // m/s
constexpr double kDt = 0.1;           // 10 FPS
constexpr double kMaxSteerRad = 30.0 * M_PI / 180.0;
constexpr double kStereoBaseline = 0.02;  // camera offset from center, m
constexpr int kObsHeight = 94;
constexpr int kObsWidth = 168;
constexpr double kObsRes = 0.05;  // m per pixel

// Closed course: a simple loop resampled at uniform arc steps, with
// per-point curvature and a uniform grid over the centerline segments for
// nearest-distance queries.
struct Track {
  std::vector<Vec2> centerline;   // closed; point i connects to i+1 (wrapped)
  std::vector<double> arc;        // cumulative arc length at each point
  std::vector<double> curvature;  // unsigned curvature at each point
  double half_width = 0.30;
  std::uint64_t seed = 0;

  double length() const { return total_length_; }
  void build_index();  // fills arc, curvature, and the segment grid

  // Nearest point on the centerline; always succeeds.
  struct Nearest {
    double distance;
    double arc_pos;
    Vec2 point;
    Vec2 tangent;
  };
  Nearest nearest(const Vec2& p) const;

  // True when p lies within `radius` of the centerline; cheap capped query.
  bool within(const Vec2& p, double radius) const;

  Vec2 point_at_arc(double s) const;
  Vec2 tangent_at_arc(double s) const;
  double curvature_max(double s_from, double window) const;

 private:
  double total_length_ = 0;
  double cell_size_ = 0.5;
  Vec2 grid_origin_{0, 0};
  int grid_nx_ = 0, grid_ny_ = 0;
  std::vector<std::vector<std::int32_t>> grid_;

  int cell_of(double x, double y) const;
  double segment_distance(int seg, const Vec2& p, double* t_out) const;
};

// Deterministic per seed; smooth closed loop of length 50-150 m whose
// minimum curvature radius stays safely above twice the wheelbase.
Track generate_track(std::uint64_t seed);

struct VehicleState {
  double x = 0;
  double y = 0;
  double heading = 0;  // rad
  double speed = 0;    // m/s
  Vec2 position() const { return {x, y}; }
};

// Kinematic bicycle step: delta = (steer-0.5)*60deg clamped to +-30deg,
// v = motor*v_max, then forward Euler over dt.
VehicleState step_vehicle(const VehicleState& state, float steer, float motor,
                          double dt = kDt);

// Top-down local window ahead of the vehicle, track surface bright and
// everything else dark; two views laterally offset by +-kStereoBaseline.
// Returns [2][kObsHeight][kObsWidth] u8, same layout as an Episode frame.
std::vector<std::uint8_t> render_observation(const Track& track,
                                             const VehicleState& state);

// Single view from a given lateral camera offset (0 = vehicle center).
void render_view(const Track& track, const VehicleState& state,
                 double lateral_offset, std::uint8_t* out);

// Pure-pursuit steering toward a 0.5 m lookahead point, speed backed off
// from the upcoming curvature.
std::pair<float, float> expert_control(const Track& track,
                                       const VehicleState& state);

VehicleState start_state(const Track& track);

// Drives the expert for duration_s at 10 FPS, storing rendered stereo frames
// and the applied expert controls. An optional start pose perturbation
// (lateral offset in meters, heading offset in radians) makes the opening
// seconds of each run show the expert recovering toward the centerline.
Episode record_episode(const Track& track, double duration_s,
                       double start_lateral_offset = 0.0,
                       double start_heading_offset = 0.0,
                       std::vector<VehicleState>* trajectory = nullptr);

struct EvalReport {
  double duration_s = 0;
  int failures = 0;
  double time_to_failure_avg = 0;      // full duration when no failure
  double distance_to_failure_avg = 0;  // path length, not displacement
  double autonomy = 0;
};

// Closed-loop rollout: the last six observations feed the model, prediction
// step 1 of 12 drives the vehicle. A failure is both front-axle wheel points
// leaving the track; the vehicle then resets to the nearest centerline point
// and the observation buffer is refilled from the reset pose.
EvalReport closed_loop_eval(Model<float>& model, const Track& track,
                            double duration_s);

// Expert-in-the-loop variant of the same rollout and failure accounting.
EvalReport closed_loop_expert(const Track& track, double duration_s);

void append_eval_csv(const EvalReport& report, std::uint64_t track_seed,
                     const std::string& path);

}  // namespace sim
}  // namespace drivenet
