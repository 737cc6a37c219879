#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "drivenet/model.hpp"
#include "drivenet/tensor.hpp"

namespace drivenet {

// One recorded run: a stereo frame stream at fixed FPS with one
// (steering, motor) label pair per frame, both controls in [0,1].
struct Episode {
  enum class Source : std::uint8_t { simulated, imported };

  float fps = 10.0f;
  int height = 0;
  int width = 0;
  int channels = 2;  // stereo grayscale
  std::vector<std::uint8_t> frames;  // [n][c][h][w]
  std::vector<float> controls;       // [n][2] = steering, motor
  std::uint64_t seed = 0;
  Source source = Source::simulated;

  int frame_count() const {
    const std::int64_t px = static_cast<std::int64_t>(channels) * height * width;
    return px > 0 ? static_cast<int>(frames.size() / px) : 0;
  }
  const std::uint8_t* frame(int i) const {
    return frames.data() +
           static_cast<std::int64_t>(i) * channels * height * width;
  }
  void validate() const;
};

// Input frames [start, start+5], target controls [start+6, start+17].
constexpr int kWindowInputFrames = 6;
constexpr int kWindowTargetSteps = 12;
constexpr int kWindowSpan = kWindowInputFrames + kWindowTargetSteps;

struct WindowRef {
  int episode;
  int start;
};

struct Dataset {
  std::vector<Episode> episodes;
};

struct Split {
  std::vector<WindowRef> train_windows;
  std::vector<WindowRef> val_windows;
};

// Bit-exact binary episode format, little-endian:
//   magic "FRFCNEP1", u16 version=1, u16 H, u16 W, u8 C, u32 N, f32 fps,
//   N*C*H*W u8 pixels, N*2 f32 controls.
void write_episode(const Episode& ep, const std::string& path);
Episode read_episode(const std::string& path);

// Manifest: one episode path per line (relative paths resolve against the
// manifest's directory).
void write_manifest(const std::vector<std::string>& paths,
                    const std::string& manifest_path);
Dataset load_manifest(const std::string& manifest_path);

std::vector<WindowRef> make_windows(const Episode& ep, int episode_index,
                                    int stride = 1);
std::vector<WindowRef> make_windows(const Dataset& data, int stride = 1);

// Reserves val_runs whole episodes (seed-chosen) for validation and samples
// val_frame_fraction of their windows; the remaining episodes supply every
// training window. The two sides never share an episode.
Split split_train_val(const Dataset& data, int val_runs,
                      double val_frame_fraction, std::uint64_t seed);

// u8 pixels scaled to [0,1] single precision, shape [C,H,W].
TensorF normalize_frame(const std::uint8_t* pixels, int channels, int height,
                        int width);

// Horizontal-flip augmentation: every frame mirrored along width with the
// stereo channels swapped, steering reflected about 0.5, motor unchanged.
struct WindowExample {
  std::vector<TensorF> frames;  // kWindowInputFrames x [C,H,W]
  std::vector<float> controls;  // kWindowTargetSteps x 2
};
WindowExample extract_window(const Dataset& data, const WindowRef& ref);
WindowExample augment_flip(const WindowExample& ex);

// Assembles a training batch. Feedforward kinds get [N, 6*C, H, W] with the
// frames stacked along channels in temporal order; the recurrent kind gets
// [N, 6, C, H, W]. Targets are [N, 12, 2]. flip[i] selects the mirrored
// variant of window i.
void assemble_batch(const Dataset& data, const std::vector<WindowRef>& refs,
                    const std::vector<char>& flip, ModelKind kind,
                    const ModelConfig& cfg, TensorF* input, TensorF* target);

}  // namespace drivenet
