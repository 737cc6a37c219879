#include "drivenet/training.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "drivenet/checkpoint.hpp"
#include "drivenet/data.hpp"
#include "drivenet/rng.hpp"

namespace drivenet {

double validation_loss(Model<float>& model, const Dataset& data,
                       const std::vector<WindowRef>& windows, int batch_size) {
  if (windows.empty()) {
    throw std::invalid_argument("validation_loss: empty validation set");
  }
  double sum = 0;
  std::int64_t count = 0;
  TensorF input, target;
  for (size_t at = 0; at < windows.size(); at += static_cast<size_t>(batch_size)) {
    const size_t end = std::min(windows.size(), at + static_cast<size_t>(batch_size));
    std::vector<WindowRef> batch(windows.begin() + static_cast<std::ptrdiff_t>(at),
                                 windows.begin() + static_cast<std::ptrdiff_t>(end));
    std::vector<char> flip(batch.size(), 0);
    assemble_batch(data, batch, flip, model.kind(), model.config(), &input, &target);
    TensorF pred = model.forward(input, Mode::eval);
    for (Index i = 0; i < pred.size(); ++i) {
      const double d = static_cast<double>(pred[i]) - target[i];
      sum += d * d;
    }
    count += pred.size();
  }
  return sum / static_cast<double>(count);
}

LossCurve train(Model<float>& model, const Dataset& data, const Split& split,
                const TrainConfig& cfg, std::vector<std::int64_t>* sampled_log) {
  if (split.train_windows.empty()) {
    throw std::invalid_argument("train: no training windows");
  }
  if (split.val_windows.empty()) {
    throw std::invalid_argument("train: no validation windows");
  }
  const std::int64_t n_base = static_cast<std::int64_t>(split.train_windows.size());
  const std::int64_t n_aug = 2 * n_base;  // every window plus its mirror

  // Sparse mode draws from a fixed, seed-determined 10% of the base windows
  // (together with their mirrored twins). The pool is represented by indices
  // into [0, 2*n_base): index i >= n_base means window i-n_base, flipped.
  std::vector<std::int64_t> pool;
  if (cfg.sparse) {
    std::vector<std::int64_t> base(static_cast<size_t>(n_base));
    for (std::int64_t i = 0; i < n_base; ++i) base[static_cast<size_t>(i)] = i;
    Rng subset_rng = Rng(cfg.seed).fork(seed_stream::sparse_subset);
    subset_rng.shuffle(base);
    const std::int64_t keep = std::max<std::int64_t>(
        1, static_cast<std::int64_t>(std::ceil(cfg.sparse_fraction * static_cast<double>(n_base))));
    base.resize(static_cast<size_t>(keep));
    std::sort(base.begin(), base.end());
    pool.reserve(static_cast<size_t>(2 * keep));
    for (std::int64_t i : base) pool.push_back(i);
    for (std::int64_t i : base) pool.push_back(n_base + i);
  }

  // One validation epoch covers epoch_unit_fraction of the augmented
  // training windows, rounded up to whole batches.
  const std::int64_t unit = std::max<std::int64_t>(
      1, static_cast<std::int64_t>(std::ceil(cfg.epoch_unit_fraction * static_cast<double>(n_aug))));
  const std::int64_t batches_per_epoch =
      (unit + cfg.batch_size - 1) / cfg.batch_size;

  Rng sampler = Rng(cfg.seed).fork(seed_stream::sampler);
  model.reseed_dropout(derive_seed(cfg.seed, seed_stream::dropout));
  std::vector<NamedParam<float>> params;
  model.collect_params(params);

  std::ofstream metrics;
  if (!cfg.metrics_path.empty()) {
    metrics.open(cfg.metrics_path, std::ios::trunc);
    if (!metrics) {
      throw std::runtime_error("train: cannot open metrics file " + cfg.metrics_path);
    }
    metrics << "# model=" << to_string(model.kind())
            << " params=" << model.count_params() << "\n";
    metrics << "epoch,val_loss\n";
  }

  LossCurve curve;
  double best = std::numeric_limits<double>::infinity();
  TensorF input, target;
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    for (std::int64_t b = 0; b < batches_per_epoch; ++b) {
      std::vector<WindowRef> refs(static_cast<size_t>(cfg.batch_size));
      std::vector<char> flip(static_cast<size_t>(cfg.batch_size));
      for (int i = 0; i < cfg.batch_size; ++i) {
        const std::int64_t pick =
            cfg.sparse ? pool[static_cast<size_t>(sampler.uniform_int(
                             static_cast<std::int64_t>(pool.size())))]
                       : sampler.uniform_int(n_aug);
        if (sampled_log) sampled_log->push_back(pick);
        const bool flipped = pick >= n_base;
        refs[static_cast<size_t>(i)] =
            split.train_windows[static_cast<size_t>(flipped ? pick - n_base : pick)];
        flip[static_cast<size_t>(i)] = flipped ? 1 : 0;
      }
      assemble_batch(data, refs, flip, model.kind(), model.config(), &input, &target);
      TensorF pred = model.forward(input, Mode::train);
      auto [loss, grad] = mse_loss(pred, target);
      if (!std::isfinite(loss)) {
        throw std::runtime_error("train: diverged (non-finite training loss)");
      }
      model.backward(grad);
      adam_step(params, cfg);
    }
    const double val = validation_loss(model, data, split.val_windows, cfg.batch_size);
    curve.push_back({epoch, val});
    if (metrics.is_open()) {
      char buf[64];
      std::snprintf(buf, sizeof(buf), "%d,%.17g\n", epoch, val);
      metrics << buf;
      metrics.flush();
    }
    if (!std::isfinite(val)) {
      throw std::runtime_error("train: diverged (non-finite validation loss)");
    }
    if (val < best) {
      best = val;
      if (!cfg.checkpoint_path.empty()) {
        save_checkpoint(model, cfg.checkpoint_path);
      }
    }
    std::cerr << "epoch " << epoch << " val_loss " << val << "\n";
    if (cfg.stop_below_val > 0 && val < cfg.stop_below_val) break;
  }
  return curve;
}

}  // namespace drivenet
