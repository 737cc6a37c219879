#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "drivenet/layers.hpp"
#include "drivenet/metrics.hpp"
#include "drivenet/model.hpp"

namespace drivenet {

struct Dataset;
struct Split;
struct WindowRef;

// Defaults follow the published experiment setup: Adam(1e-3, 0.9, 0.999,
// 1e-8), batch 32, one validation epoch per 0.1% of the training windows,
// sparse mode sampling from a fixed 10% subset.
struct TrainConfig {
  double alpha = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int batch_size = 32;
  bool sparse = false;
  double sparse_fraction = 0.10;
  double epoch_unit_fraction = 0.001;
  int max_epochs = 100;
  double stop_below_val = 0;  // > 0: stop once validation loss drops under it
  std::uint64_t seed = 1;
  std::string checkpoint_path;  // empty: no checkpointing
  std::string metrics_path;     // empty: no CSV
};

// Mean of squared differences over every entry, with its gradient
// 2*(pred - target)/count.
template <class S>
std::pair<double, Tensor<S>> mse_loss(const Tensor<S>& pred,
                                      const Tensor<S>& target) {
  if (!pred.same_shape(target)) {
    throw std::invalid_argument("mse_loss: shape mismatch " +
                                pred.shape_string() + " vs " +
                                target.shape_string());
  }
  pred.require_finite("mse_loss pred");
  const double count = static_cast<double>(pred.size());
  Tensor<S> grad(pred.shape());
  double sum = 0;
  for (Index i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - target[i];
    sum += d * d;
    grad[i] = static_cast<S>(2.0 * d / count);
  }
  return {sum / count, std::move(grad)};
}

// One Adam update over all parameters; gradients are zeroed afterwards.
// A non-finite gradient aborts before any parameter is touched.
template <class S>
void adam_step(std::vector<NamedParam<S>>& params, const TrainConfig& cfg) {
  for (auto& np : params) {
    if (!np.param->grad.all_finite()) {
      throw std::runtime_error("adam_step: non-finite gradient in " + np.name);
    }
  }
  for (auto& np : params) {
    Parameter<S>& p = *np.param;
    p.step_count += 1;
    const double t = static_cast<double>(p.step_count);
    const double corr1 = 1.0 - std::pow(cfg.beta1, t);
    const double corr2 = 1.0 - std::pow(cfg.beta2, t);
    for (Index i = 0; i < p.value.size(); ++i) {
      const double g = static_cast<double>(p.grad[i]);
      const double m = cfg.beta1 * p.adam_m[i] + (1.0 - cfg.beta1) * g;
      const double v = cfg.beta2 * p.adam_v[i] + (1.0 - cfg.beta2) * g * g;
      p.adam_m[i] = static_cast<S>(m);
      p.adam_v[i] = static_cast<S>(v);
      const double m_hat = m / corr1;
      const double v_hat = v / corr2;
      p.value[i] = static_cast<S>(p.value[i] -
                                  cfg.alpha * m_hat / (std::sqrt(v_hat) + cfg.eps));
      p.grad[i] = S(0);
    }
  }
}

// Mean validation MSE over the given windows, computed in eval mode without
// touching any parameter or running statistic.
double validation_loss(Model<float>& model, const Dataset& data,
                       const std::vector<WindowRef>& windows, int batch_size);

// Runs validation epochs until max_epochs: each epoch draws
// ceil(epoch_unit_fraction * |augmented train windows|) samples (rounded up
// to whole batches) from the sampling policy, then evaluates the fixed
// validation set. Checkpoints at every new minimum validation loss. Metrics
// rows are flushed per epoch so a diverged run leaves its partial curve
// behind.
LossCurve train(Model<float>& model, const Dataset& data, const Split& split,
                const TrainConfig& cfg,
                std::vector<std::int64_t>* sampled_log = nullptr);

}  // namespace drivenet
