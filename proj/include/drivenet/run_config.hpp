#pragma once

#include <stdexcept>
#include <string>

#include "drivenet/model.hpp"
#include "drivenet/training.hpp"

namespace drivenet {

// Command-line / config-file mistakes; the CLI maps these to exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flat key=value experiment configuration covering the optimizer, the model
// geometry, the split, and the simulator. Every key is optional; unknown
// keys are errors.
struct RunConfig {
  TrainConfig train;
  ModelConfig model;
  int val_runs = 20;
  double val_frame_fraction = 0.01;
  double track_half_width = 0.30;
  // start-pose perturbation bounds for recorded episodes, so the expert data
  // includes recovery toward the centerline
  double start_offset_max = 0.22;     // m
  double start_heading_max = 0.25;    // rad
};

RunConfig parse_run_config(const std::string& path);

// Applies one key=value assignment; shared by the file parser.
void apply_config_entry(RunConfig& cfg, const std::string& key,
                        const std::string& value);

}  // namespace drivenet
