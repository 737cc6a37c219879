#pragma once

#include <cstdint>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "drivenet/layers.hpp"
#include "drivenet/recurrent.hpp"
#include "drivenet/rng.hpp"
#include "drivenet/tensor.hpp"

namespace drivenet {

enum class ModelKind : std::uint8_t {
  fcn = 0,
  squeezefcn = 1,
  frfcn = 2,
  baseline = 3
};

inline const char* to_string(ModelKind k) {
  switch (k) {
    case ModelKind::fcn: return "fcn";
    case ModelKind::squeezefcn: return "squeezefcn";
    case ModelKind::frfcn: return "frfcn";
    case ModelKind::baseline: return "baseline";
  }
  return "?";
}

inline ModelKind model_kind_from_string(const std::string& s) {
  if (s == "fcn") return ModelKind::fcn;
  if (s == "squeezefcn") return ModelKind::squeezefcn;
  if (s == "frfcn") return ModelKind::frfcn;
  if (s == "baseline") return ModelKind::baseline;
  throw std::invalid_argument("unknown model kind: " + s);
}

// Channel ladders are tunable; the defaults are sized so that total
// trainable-parameter counts land inside the published bands
// (fcn ~85k, squeezefcn ~88k, frfcn ~130k, baseline ~356k).
struct ModelConfig {
  int input_height = 94;
  int input_width = 168;
  int channels_per_frame = 2;  // stereo grayscale
  int frames_in = 6;
  int steps_out = 12;
  int controls_per_step = 2;  // steering, motor
  int embedding_dim = 16;
  int lstm_hidden = 64;
  float dropout_p = 0.25f;
  float bn_eps = 1e-5f;
  float bn_momentum = 0.1f;
  std::vector<std::vector<int>> fcn_stages = {
      {16, 16, 16}, {32, 32}, {40, 40}, {40, 32, 24, 24}};
  std::vector<int> squeeze_entry = {16, 16, 16};
  std::vector<FireSpec> fires = {{16, 8, 16, 16},
                                 {32, 16, 32, 32},
                                 {64, 16, 32, 32},
                                 {64, 24, 48, 48},
                                 {96, 24, 48, 48}};
  std::vector<int> squeeze_exit = {32, 24, 24};

  int stacked_channels() const { return frames_in * channels_per_frame; }
  int output_size() const { return steps_out * controls_per_step; }
};

// One network with its forward/backward drivers. Feedforward kinds are a
// single layer stack ending in global average pooling over output_size
// channels. The recurrent kind runs a per-frame embedder, an encoder over
// the frame embeddings, a zero-input decoder, and a per-step FC head with
// weights shared across the output steps.
template <class S>
class Model {
 public:
  Model(ModelKind kind, const ModelConfig& config)
      : kind_(kind), config_(config) {}

  ModelKind kind() const { return kind_; }
  const ModelConfig& config() const { return config_; }

  Tensor<S> forward(const Tensor<S>& batch, Mode mode) {
    Tensor<S> flat;
    if (kind_ == ModelKind::frfcn) {
      check_sequence_input(batch);
      const int n = batch.extent(0);
      batch_n_ = n;
      Tensor<S> frames = batch.reshaped({n * config_.frames_in,
                                         config_.channels_per_frame,
                                         config_.input_height,
                                         config_.input_width});
      // [N*frames, emb] rows are already in (sample, time) order
      Tensor<S> emb = embedder_.forward(frames, mode);
      Tensor<S> seq =
          emb.reshaped({n, config_.frames_in, config_.embedding_dim});
      enc_run_ = encode_batch(*encoder_, seq);
      dec_run_ = decode_batch(*decoder_, enc_run_.final_state,
                              config_.steps_out);
      Tensor<S> h_all({n * config_.steps_out, config_.lstm_hidden});
      for (int t = 0; t < config_.steps_out; ++t) {
        const Tensor<S>& ht = dec_run_.outputs[static_cast<size_t>(t)];
        for (int ni = 0; ni < n; ++ni) {
          std::copy(ht.data() + static_cast<Index>(ni) * config_.lstm_hidden,
                    ht.data() + static_cast<Index>(ni + 1) * config_.lstm_hidden,
                    h_all.data() + (static_cast<Index>(ni) * config_.steps_out + t) *
                                       config_.lstm_hidden);
        }
      }
      flat = head_.forward(h_all, mode);  // [N*steps, controls]
    } else {
      check_stacked_input(batch);
      batch_n_ = batch.extent(0);
      flat = trunk_.forward(batch, mode);  // [N, output_size]
    }
    Tensor<S> pred = flat.reshaped(
        {batch_n_, config_.steps_out, config_.controls_per_step});
    pred.require_finite("model forward");
    return pred;
  }

  // grad_pred is [N, steps_out, controls_per_step].
  void backward(const Tensor<S>& grad_pred) {
    const int n = batch_n_;
    if (kind_ != ModelKind::frfcn) {
      trunk_.backward(grad_pred.reshaped({n, config_.output_size()}));
      return;
    }
    Tensor<S> gh_all = head_.backward(grad_pred.reshaped(
        {n * config_.steps_out, config_.controls_per_step}));
    // decoder BPTT, newest step first
    Tensor<S> dh({n, config_.lstm_hidden}), dc({n, config_.lstm_hidden});
    for (int t = config_.steps_out - 1; t >= 0; --t) {
      for (int ni = 0; ni < n; ++ni) {
        const S* src = gh_all.data() +
                       (static_cast<Index>(ni) * config_.steps_out + t) *
                           config_.lstm_hidden;
        S* dst = dh.data() + static_cast<Index>(ni) * config_.lstm_hidden;
        for (int j = 0; j < config_.lstm_hidden; ++j) dst[j] += src[j];
      }
      Tensor<S> dh_prev, dc_prev;
      decoder_->step_backward(dec_run_.caches[static_cast<size_t>(t)], dh, dc,
                              &dh_prev, &dc_prev, nullptr);
      dh = std::move(dh_prev);
      dc = std::move(dc_prev);
    }
    // encoder BPTT continues from the handed-off state gradients
    Tensor<S> demb({n * config_.frames_in, config_.embedding_dim});
    for (int t = config_.frames_in - 1; t >= 0; --t) {
      Tensor<S> dh_prev, dc_prev, dx;
      encoder_->step_backward(enc_run_.caches[static_cast<size_t>(t)], dh, dc,
                              &dh_prev, &dc_prev, &dx);
      for (int ni = 0; ni < n; ++ni) {
        std::copy(dx.data() + static_cast<Index>(ni) * config_.embedding_dim,
                  dx.data() + static_cast<Index>(ni + 1) * config_.embedding_dim,
                  demb.data() + (static_cast<Index>(ni) * config_.frames_in + t) *
                                    config_.embedding_dim);
      }
      dh = std::move(dh_prev);
      dc = std::move(dc_prev);
    }
    embedder_.backward(demb);
  }

  void collect_params(std::vector<NamedParam<S>>& out) {
    if (kind_ == ModelKind::frfcn) {
      embedder_.collect_params("embedder", out);
      encoder_->collect_params("encoder", out);
      decoder_->collect_params("decoder", out);
      head_.collect_params("head", out);
    } else {
      trunk_.collect_params("trunk", out);
    }
  }

  void collect_buffers(std::vector<NamedBuffer<S>>& out) {
    if (kind_ == ModelKind::frfcn) {
      embedder_.collect_buffers("embedder", out);
      head_.collect_buffers("head", out);
    } else {
      trunk_.collect_buffers("trunk", out);
    }
  }

  Index count_params() {
    std::vector<NamedParam<S>> params;
    collect_params(params);
    Index total = 0;
    for (auto& p : params) total += p.param->value.size();
    return total;
  }

  void zero_grads() {
    std::vector<NamedParam<S>> params;
    collect_params(params);
    for (auto& p : params) p.param->zero_grad();
  }

  void reseed_dropout(std::uint64_t seed) {
    for (size_t i = 0; i < dropouts_.size(); ++i) {
      dropouts_[static_cast<size_t>(i)]->reseed(derive_seed(seed, i));
    }
  }

  // Builder internals below; not part of the inference API.
  LayerStack<S>& trunk() { return trunk_; }
  LayerStack<S>& embedder() { return embedder_; }
  LayerStack<S>& head() { return head_; }
  std::unique_ptr<LstmCell<S>> encoder_, decoder_;
  std::vector<Dropout<S>*> dropouts_;

 private:
  void check_stacked_input(const Tensor<S>& x) const {
    if (x.rank() != 4 || x.extent(1) != config_.stacked_channels() ||
        x.extent(2) != config_.input_height ||
        x.extent(3) != config_.input_width) {
      throw std::invalid_argument(
          std::string("model(") + to_string(kind_) + "): expected [N," +
          std::to_string(config_.stacked_channels()) + "," +
          std::to_string(config_.input_height) + "," +
          std::to_string(config_.input_width) + "], got " + x.shape_string());
    }
  }

  void check_sequence_input(const Tensor<S>& x) const {
    if (x.rank() != 5 || x.extent(1) != config_.frames_in ||
        x.extent(2) != config_.channels_per_frame ||
        x.extent(3) != config_.input_height ||
        x.extent(4) != config_.input_width) {
      throw std::invalid_argument(
          "model(frfcn): expected [N," + std::to_string(config_.frames_in) +
          "," + std::to_string(config_.channels_per_frame) + "," +
          std::to_string(config_.input_height) + "," +
          std::to_string(config_.input_width) + "], got " + x.shape_string());
    }
  }

  ModelKind kind_;
  ModelConfig config_;
  LayerStack<S> trunk_;
  LayerStack<S> embedder_;
  LayerStack<S> head_;
  LstmRun<S> enc_run_, dec_run_;
  int batch_n_ = 0;
};

namespace detail {

template <class S>
void add_conv_act_bn(LayerStack<S>& stack, int in_ch, int out_ch, int stride,
                     ActKind act, const ModelConfig& cfg, Rng& rng) {
  stack.template add<Conv2d<S>>(in_ch, out_ch, 3, stride, 1, rng);
  stack.template add<Activation<S>>(act);
  stack.template add<BatchNorm2d<S>>(out_ch, static_cast<S>(cfg.bn_eps),
                                     static_cast<S>(cfg.bn_momentum));
}

// Shared SqueezeFCN trunk: entry conv triplet (first conv stride 2), three
// avg-pool stages of Fire blocks, dropout, exit conv triplet, global average
// pool. Ends as [N, last_exit_channels].
template <class S>
void build_squeeze_trunk(LayerStack<S>& stack, int in_channels,
                         const ModelConfig& cfg, Rng& rng,
                         std::vector<Dropout<S>*>& dropouts) {
  if (cfg.squeeze_entry.size() != 3 || cfg.squeeze_exit.size() != 3 ||
      cfg.fires.size() != 5) {
    throw std::invalid_argument("squeeze trunk: need 3 entry, 5 fire, 3 exit");
  }
  int ch = in_channels;
  for (size_t i = 0; i < cfg.squeeze_entry.size(); ++i) {
    add_conv_act_bn(stack, ch, cfg.squeeze_entry[i], i == 0 ? 2 : 1,
                    ActKind::elu, cfg, rng);
    ch = cfg.squeeze_entry[i];
  }
  const int fire_groups[3] = {1, 2, 2};
  size_t fire_idx = 0;
  for (int group = 0; group < 3; ++group) {
    stack.template add<Pool2d<S>>(PoolKind::avg);
    for (int j = 0; j < fire_groups[group]; ++j, ++fire_idx) {
      const FireSpec& spec = cfg.fires[fire_idx];
      if (spec.in_channels != ch) {
        throw std::invalid_argument("fire ladder: channel mismatch at fire " +
                                    std::to_string(fire_idx));
      }
      stack.template add<Fire<S>>(spec, rng, ActKind::elu);
      ch = spec.out_channels();
      stack.template add<BatchNorm2d<S>>(ch, static_cast<S>(cfg.bn_eps),
                                         static_cast<S>(cfg.bn_momentum));
    }
  }
  dropouts.push_back(
      stack.template add<Dropout<S>>(static_cast<double>(cfg.dropout_p)));
  for (int out_ch : cfg.squeeze_exit) {
    add_conv_act_bn(stack, ch, out_ch, 1, ActKind::elu, cfg, rng);
    ch = out_ch;
  }
  stack.template add<GlobalAvgPool<S>>();
}

}  // namespace detail

template <class S>
Model<S> build_model(ModelKind kind, const ModelConfig& cfg,
                     std::uint64_t init_seed) {
  Rng rng(init_seed);
  Model<S> model(kind, cfg);
  switch (kind) {
    case ModelKind::fcn: {
      if (cfg.fcn_stages.empty() ||
          cfg.fcn_stages.back().back() != cfg.output_size()) {
        throw std::invalid_argument(
            "fcn ladder must end at " + std::to_string(cfg.output_size()) +
            " channels");
      }
      int ch = cfg.stacked_channels();
      for (size_t stage = 0; stage < cfg.fcn_stages.size(); ++stage) {
        if (stage > 0) {
          model.trunk().template add<Pool2d<S>>(PoolKind::max);
        }
        if (stage + 1 == cfg.fcn_stages.size()) {
          model.dropouts_.push_back(model.trunk().template add<Dropout<S>>(
              static_cast<double>(cfg.dropout_p)));
        }
        for (size_t j = 0; j < cfg.fcn_stages[stage].size(); ++j) {
          const int out_ch = cfg.fcn_stages[stage][j];
          detail::add_conv_act_bn(model.trunk(), ch, out_ch,
                                  (stage == 0 && j == 0) ? 2 : 1,
                                  ActKind::relu, cfg, rng);
          ch = out_ch;
        }
      }
      model.trunk().template add<GlobalAvgPool<S>>();
      break;
    }
    case ModelKind::squeezefcn: {
      if (cfg.squeeze_exit.back() != cfg.output_size()) {
        throw std::invalid_argument("squeezefcn exit ladder must end at " +
                                    std::to_string(cfg.output_size()) +
                                    " channels");
      }
      detail::build_squeeze_trunk(model.trunk(), cfg.stacked_channels(), cfg,
                                  rng, model.dropouts_);
      break;
    }
    case ModelKind::frfcn: {
      if (cfg.embedding_dim != 16) {
        std::cerr << "note: frfcn embedding_dim overridden to "
                  << cfg.embedding_dim << "\n";
      }
      detail::build_squeeze_trunk(model.embedder(), cfg.channels_per_frame,
                                  cfg, rng, model.dropouts_);
      model.embedder().template add<Linear<S>>(cfg.squeeze_exit.back(),
                                               cfg.embedding_dim, rng);
      model.encoder_ = std::make_unique<LstmCell<S>>(cfg.embedding_dim,
                                                     cfg.lstm_hidden, rng);
      model.decoder_ = std::make_unique<LstmCell<S>>(cfg.embedding_dim,
                                                     cfg.lstm_hidden, rng);
      model.dropouts_.push_back(model.head().template add<Dropout<S>>(
          static_cast<double>(cfg.dropout_p)));
      model.head().template add<Linear<S>>(cfg.lstm_hidden, 32, rng);
      model.head().template add<Activation<S>>(ActKind::elu);
      model.head().template add<Linear<S>>(32, cfg.controls_per_step, rng);
      break;
    }
    case ModelKind::baseline: {
      // The cited five-conv / three-FC design, widened for the 12-channel
      // input and 24-dim output.
      struct ConvSpec {
        int out_ch, k, stride;
      };
      const ConvSpec convs[5] = {
          {24, 5, 2}, {36, 5, 2}, {48, 5, 2}, {64, 3, 1}, {64, 3, 1}};
      int ch = cfg.stacked_channels();
      int h = cfg.input_height, w = cfg.input_width;
      for (const auto& c : convs) {
        model.trunk().template add<Conv2d<S>>(ch, c.out_ch, c.k, c.stride, 0,
                                              rng);
        model.trunk().template add<Activation<S>>(ActKind::relu);
        ch = c.out_ch;
        h = conv_out_extent(h, c.k, c.stride, 0);
        w = conv_out_extent(w, c.k, c.stride, 0);
        if (h < 1 || w < 1) {
          throw std::invalid_argument("baseline: input too small");
        }
      }
      model.trunk().template add<Flatten<S>>();
      const int flat = ch * h * w;
      model.trunk().template add<Linear<S>>(flat, 48, rng);
      model.trunk().template add<Activation<S>>(ActKind::relu);
      model.trunk().template add<Linear<S>>(48, 50, rng);
      model.trunk().template add<Activation<S>>(ActKind::relu);
      model.trunk().template add<Linear<S>>(50, cfg.output_size(), rng);
      break;
    }
  }
  return model;
}

// ---------------------------------------------------------------------------
// Receptive-field measurement. A stage is rebuilt stride-1 / pool-free with
// strictly positive weights and probed with an all-ones input, so the
// bounding box of nonzero input gradient is exactly the region that can
// influence the chosen output pixel.

struct GradBox {
  int h_lo, h_hi, w_lo, w_hi;
  int height() const { return h_hi - h_lo + 1; }
  int width() const { return w_hi - w_lo + 1; }
};

inline LayerStack<double> build_probe_stage(int n_convs, int in_ch, int mid_ch,
                                            ActKind act, Rng& rng) {
  LayerStack<double> stage;
  int ch = in_ch;
  for (int i = 0; i < n_convs; ++i) {
    auto* conv = stage.add<Conv2d<double>>(ch, mid_ch, 3, 1, 1, rng);
    for (Index j = 0; j < conv->weight().value.size(); ++j) {
      conv->weight().value[j] = rng.uniform(0.05, 0.5);
    }
    conv->bias().value.fill(0.01);
    stage.add<Activation<double>>(act);
    ch = mid_ch;
  }
  return stage;
}

inline GradBox receptive_field_probe(LayerStack<double>& stage, int in_ch,
                                     int input_h, int input_w, int pixel_h,
                                     int pixel_w) {
  if (pixel_h < 0 || pixel_h >= input_h || pixel_w < 0 || pixel_w >= input_w) {
    throw std::invalid_argument("receptive_field_probe: pixel out of range");
  }
  Tensor<double> x = Tensor<double>::full({1, in_ch, input_h, input_w}, 1.0);
  Tensor<double> y = stage.forward(x, Mode::train);
  Tensor<double> gy(y.shape());
  gy.at({0, 0, pixel_h, pixel_w}) = 1.0;
  Tensor<double> gx = stage.backward(gy);
  GradBox box{input_h, -1, input_w, -1};
  for (int c = 0; c < gx.extent(1); ++c) {
    for (int h = 0; h < input_h; ++h) {
      for (int w = 0; w < input_w; ++w) {
        if (std::abs(gx.at({0, c, h, w})) > 1e-12) {
          box.h_lo = std::min(box.h_lo, h);
          box.h_hi = std::max(box.h_hi, h);
          box.w_lo = std::min(box.w_lo, w);
          box.w_hi = std::max(box.w_hi, w);
        }
      }
    }
  }
  if (box.h_hi < 0) throw std::runtime_error("probe: gradient vanished");
  return box;
}

}  // namespace drivenet
