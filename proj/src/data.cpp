#include "drivenet/data.hpp"

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "drivenet/rng.hpp"

namespace drivenet {

namespace {

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}
void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_f32(std::string& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

struct Reader {
  std::ifstream in;
  std::string what;

  Reader(const std::string& path, const char* tag) : in(path, std::ios::binary), what(tag) {
    if (!in) throw std::runtime_error(std::string(tag) + ": cannot open " + path);
  }
  void bytes(void* dst, size_t n) {
    in.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(in.gcount()) != n) {
      throw std::runtime_error(what + ": truncated file");
    }
  }
  std::uint16_t u16() {
    std::uint8_t b[2];
    bytes(b, 2);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
  }
  std::uint32_t u32() {
    std::uint8_t b[4];
    bytes(b, 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  }
  float f32() {
    std::uint32_t bits = u32();
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }
};

constexpr char kEpisodeMagic[8] = {'F', 'R', 'F', 'C', 'N', 'E', 'P', '1'};

}  // namespace

void Episode::validate() const {
  if (height <= 0 || width <= 0 || channels <= 0) {
    throw std::invalid_argument("episode: bad frame dimensions");
  }
  const std::int64_t px = static_cast<std::int64_t>(channels) * height * width;
  if (frames.size() % static_cast<size_t>(px) != 0) {
    throw std::invalid_argument("episode: pixel data not a whole frame count");
  }
  const int n = frame_count();
  if (controls.size() != static_cast<size_t>(n) * 2) {
    throw std::invalid_argument("episode: need one control pair per frame");
  }
  for (float c : controls) {
    if (!(c >= 0.0f && c <= 1.0f)) {
      throw std::invalid_argument("episode: control outside [0,1]");
    }
  }
  if (!(fps > 0)) throw std::invalid_argument("episode: fps must be positive");
}

void write_episode(const Episode& ep, const std::string& path) {
  ep.validate();
  std::string buf;
  buf.reserve(24 + ep.frames.size() + ep.controls.size() * 4);
  buf.append(kEpisodeMagic, 8);
  put_u16(buf, 1);
  put_u16(buf, static_cast<std::uint16_t>(ep.height));
  put_u16(buf, static_cast<std::uint16_t>(ep.width));
  buf.push_back(static_cast<char>(ep.channels));
  put_u32(buf, static_cast<std::uint32_t>(ep.frame_count()));
  put_f32(buf, ep.fps);
  buf.append(reinterpret_cast<const char*>(ep.frames.data()), ep.frames.size());
  for (float c : ep.controls) put_f32(buf, c);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("write_episode: cannot open " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("write_episode: write failed: " + path);
}

Episode read_episode(const std::string& path) {
  Reader r(path, "read_episode");
  char magic[8];
  r.bytes(magic, 8);
  if (std::memcmp(magic, kEpisodeMagic, 8) != 0) {
    throw std::runtime_error("read_episode: bad magic in " + path);
  }
  const std::uint16_t version = r.u16();
  if (version != 1) {
    throw std::runtime_error("read_episode: unsupported version " +
                             std::to_string(version));
  }
  Episode ep;
  ep.height = r.u16();
  ep.width = r.u16();
  std::uint8_t c;
  r.bytes(&c, 1);
  ep.channels = c;
  const std::uint32_t n = r.u32();
  ep.fps = r.f32();
  ep.frames.resize(static_cast<size_t>(n) * ep.channels * ep.height * ep.width);
  r.bytes(ep.frames.data(), ep.frames.size());
  ep.controls.resize(static_cast<size_t>(n) * 2);
  for (auto& v : ep.controls) v = r.f32();
  ep.source = Episode::Source::imported;
  ep.validate();
  return ep;
}

void write_manifest(const std::vector<std::string>& paths,
                    const std::string& manifest_path) {
  std::ofstream out(manifest_path, std::ios::trunc);
  if (!out) throw std::runtime_error("write_manifest: cannot open " + manifest_path);
  for (const auto& p : paths) out << p << "\n";
}

Dataset load_manifest(const std::string& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("load_manifest: cannot open " + manifest_path);
  const auto base = std::filesystem::path(manifest_path).parent_path();
  Dataset data;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::filesystem::path p(line);
    if (p.is_relative()) p = base / p;
    data.episodes.push_back(read_episode(p.string()));
  }
  return data;
}

std::vector<WindowRef> make_windows(const Episode& ep, int episode_index,
                                    int stride) {
  if (stride < 1) throw std::invalid_argument("make_windows: stride < 1");
  std::vector<WindowRef> out;
  const int n = ep.frame_count();
  for (int start = 0; start + kWindowSpan <= n; start += stride) {
    out.push_back({episode_index, start});
  }
  return out;
}

std::vector<WindowRef> make_windows(const Dataset& data, int stride) {
  std::vector<WindowRef> out;
  for (size_t i = 0; i < data.episodes.size(); ++i) {
    auto w = make_windows(data.episodes[i], static_cast<int>(i), stride);
    out.insert(out.end(), w.begin(), w.end());
  }
  return out;
}

Split split_train_val(const Dataset& data, int val_runs,
                      double val_frame_fraction, std::uint64_t seed) {
  const int n_eps = static_cast<int>(data.episodes.size());
  if (n_eps < val_runs + 1) {
    throw std::invalid_argument("split_train_val: need at least " +
                                std::to_string(val_runs + 1) + " episodes, got " +
                                std::to_string(n_eps));
  }
  std::vector<int> order(static_cast<size_t>(n_eps));
  for (int i = 0; i < n_eps; ++i) order[static_cast<size_t>(i)] = i;
  Rng rng = Rng(seed).fork(seed_stream::split);
  rng.shuffle(order);
  std::vector<char> is_val(static_cast<size_t>(n_eps), 0);
  for (int i = 0; i < val_runs; ++i) is_val[static_cast<size_t>(order[i])] = 1;

  Split split;
  std::vector<WindowRef> val_pool;
  for (int e = 0; e < n_eps; ++e) {
    auto w = make_windows(data.episodes[static_cast<size_t>(e)], e, 1);
    auto& dst = is_val[static_cast<size_t>(e)] ? val_pool : split.train_windows;
    dst.insert(dst.end(), w.begin(), w.end());
  }
  // Uniform sample of the validation episodes' windows, kept in temporal
  // order so evaluation batches are stable.
  const std::int64_t want = std::max<std::int64_t>(
      1, std::llround(val_frame_fraction * static_cast<double>(val_pool.size())));
  std::vector<std::int64_t> idx(val_pool.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<std::int64_t>(i);
  rng.shuffle(idx);
  idx.resize(static_cast<size_t>(std::min<std::int64_t>(want, static_cast<std::int64_t>(val_pool.size()))));
  std::sort(idx.begin(), idx.end());
  for (std::int64_t i : idx) split.val_windows.push_back(val_pool[static_cast<size_t>(i)]);
  return split;
}

TensorF normalize_frame(const std::uint8_t* pixels, int channels, int height,
                        int width) {
  TensorF t({channels, height, width});
  const Index n = t.size();
  for (Index i = 0; i < n; ++i) {
    t[i] = static_cast<float>(pixels[i]) * (1.0f / 255.0f);
  }
  return t;
}

WindowExample extract_window(const Dataset& data, const WindowRef& ref) {
  const Episode& ep = data.episodes[static_cast<size_t>(ref.episode)];
  WindowExample ex;
  for (int f = 0; f < kWindowInputFrames; ++f) {
    ex.frames.push_back(normalize_frame(ep.frame(ref.start + f), ep.channels,
                                        ep.height, ep.width));
  }
  const int target0 = ref.start + kWindowInputFrames;
  ex.controls.assign(ep.controls.begin() + static_cast<size_t>(target0) * 2,
                     ep.controls.begin() +
                         static_cast<size_t>(target0 + kWindowTargetSteps) * 2);
  return ex;
}

WindowExample augment_flip(const WindowExample& ex) {
  WindowExample out;
  for (const auto& frame : ex.frames) {
    TensorF flipped = flip_width(frame);
    if (frame.extent(0) == 2) {
      // stereo: left and right cameras swap under a mirror
      auto views = split_channels(flipped, {1, 1});
      flipped = concat_channels<float>({views[1], views[0]});
    }
    out.frames.push_back(std::move(flipped));
  }
  out.controls = ex.controls;
  for (size_t t = 0; t < out.controls.size(); t += 2) {
    out.controls[t] = 1.0f - out.controls[t];
  }
  return out;
}

namespace {

// Writes one window's frames into the batch row, flipping on the fly.
void write_input_row(const Episode& ep, int start, bool flip, float* dst,
                     int frames_in) {
  const int c = ep.channels, h = ep.height, w = ep.width;
  const Index plane = static_cast<Index>(h) * w;
  for (int f = 0; f < frames_in; ++f) {
    const std::uint8_t* src = ep.frame(start + f);
    for (int ci = 0; ci < c; ++ci) {
      // mirrored stereo swaps the two views
      const int src_c = (flip && c == 2) ? (1 - ci) : ci;
      const std::uint8_t* sp = src + static_cast<Index>(src_c) * plane;
      float* dp = dst + (static_cast<Index>(f) * c + ci) * plane;
      if (!flip) {
        for (Index i = 0; i < plane; ++i) dp[i] = sp[i] * (1.0f / 255.0f);
      } else {
        for (int hi = 0; hi < h; ++hi) {
          const std::uint8_t* srow = sp + static_cast<Index>(hi) * w;
          float* drow = dp + static_cast<Index>(hi) * w;
          for (int wi = 0; wi < w; ++wi) {
            drow[wi] = srow[w - 1 - wi] * (1.0f / 255.0f);
          }
        }
      }
    }
  }
}

}  // namespace

void assemble_batch(const Dataset& data, const std::vector<WindowRef>& refs,
                    const std::vector<char>& flip, ModelKind kind,
                    const ModelConfig& cfg, TensorF* input, TensorF* target) {
  const int n = static_cast<int>(refs.size());
  if (flip.size() != refs.size()) {
    throw std::invalid_argument("assemble_batch: flip flag per window required");
  }
  const int c = cfg.channels_per_frame, h = cfg.input_height, w = cfg.input_width;
  if (kind == ModelKind::frfcn) {
    *input = TensorF({n, cfg.frames_in, c, h, w});
  } else {
    *input = TensorF({n, cfg.frames_in * c, h, w});
  }
  *target = TensorF({n, cfg.steps_out, cfg.controls_per_step});
  const Index row = static_cast<Index>(cfg.frames_in) * c * h * w;
  for (int i = 0; i < n; ++i) {
    const Episode& ep = data.episodes[static_cast<size_t>(refs[static_cast<size_t>(i)].episode)];
    if (ep.channels != c || ep.height != h || ep.width != w) {
      throw std::invalid_argument("assemble_batch: episode dims do not match model config");
    }
    const bool f = flip[static_cast<size_t>(i)] != 0;
    write_input_row(ep, refs[static_cast<size_t>(i)].start, f,
                    input->data() + static_cast<Index>(i) * row, cfg.frames_in);
    const int t0 = refs[static_cast<size_t>(i)].start + kWindowInputFrames;
    float* tp = target->data() + static_cast<Index>(i) * cfg.steps_out * cfg.controls_per_step;
    for (int t = 0; t < cfg.steps_out; ++t) {
      const float steer = ep.controls[static_cast<size_t>(t0 + t) * 2];
      const float motor = ep.controls[static_cast<size_t>(t0 + t) * 2 + 1];
      tp[t * 2] = f ? 1.0f - steer : steer;
      tp[t * 2 + 1] = motor;
    }
  }
}

}  // namespace drivenet
