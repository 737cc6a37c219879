#pragma once

#include <functional>
#include <string>
#include <vector>

#include "drivenet/layers.hpp"
#include "drivenet/recurrent.hpp"
#include "drivenet/rng.hpp"
#include "drivenet/tensor.hpp"
#include "drivenet/training.hpp"

namespace drivenet {

struct GradCheckResult {
  std::string name;
  double max_rel_err;
  double tolerance;
  bool pass;
};

namespace gradcheck_detail {

constexpr double kEps = 1e-5;

inline TensorD random_tensor(std::vector<int> shape, Rng& rng, double lo = -1,
                             double hi = 1) {
  TensorD t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

inline double weighted_sum(const TensorD& w, const TensorD& y) {
  double s = 0;
  for (Index i = 0; i < y.size(); ++i) s += w[i] * y[i];
  return s;
}

// Central differences over an arbitrary parameter tensor, evaluated through
// an opaque closure that reruns the forward pass.
inline TensorD fd_over(TensorD& storage, const std::function<double()>& eval,
                       double eps = kEps) {
  TensorD g(storage.shape());
  for (Index i = 0; i < storage.size(); ++i) {
    const double v = storage[i];
    storage[i] = v + eps;
    const double fp = eval();
    storage[i] = v - eps;
    const double fm = eval();
    storage[i] = v;
    g[i] = (fp - fm) / (2 * eps);
  }
  return g;
}

// Compares a layer's analytic input and parameter gradients of the loss
// sum(w*forward(x)) against central differences. pre_forward runs before
// every forward call (used to pin dropout masks).
inline double check_layer(Layer<double>& layer, const TensorD& x, Mode mode,
                          Rng& rng,
                          const std::function<void()>& pre_forward = {}) {
  auto fwd = [&](const TensorD& xin) {
    if (pre_forward) pre_forward();
    return layer.forward(xin, mode);
  };
  const TensorD y0 = fwd(x);
  const TensorD w = random_tensor(y0.shape(), rng);

  std::vector<NamedParam<double>> params;
  layer.collect_params("p", params);
  for (auto& p : params) p.param->zero_grad();
  TensorD gw(w.shape());
  for (Index i = 0; i < w.size(); ++i) gw[i] = w[i];
  const TensorD y = fwd(x);
  (void)y;
  const TensorD gx = layer.backward(gw);

  double worst = max_rel_error(
      gx, finite_diff_grad([&](const TensorD& xin) { return weighted_sum(w, fwd(xin)); },
                           x, kEps));
  for (auto& p : params) {
    const TensorD fd = fd_over(p.param->value,
                               [&] { return weighted_sum(w, fwd(x)); });
    worst = std::max(worst, max_rel_error(p.param->grad, fd));
  }
  return worst;
}

// Full 6-step encode / 12-step decode BPTT against finite differences on the
// sequence inputs and every gate parameter of both cells.
inline double check_lstm(int batch, int input_dim, int hidden_dim,
                         int encode_steps, int decode_steps, Rng& rng) {
  LstmCell<double> enc(input_dim, hidden_dim, rng);
  LstmCell<double> dec(input_dim, hidden_dim, rng);
  TensorD seq = random_tensor({batch, encode_steps, input_dim}, rng);
  std::vector<TensorD> w;
  for (int t = 0; t < decode_steps; ++t) {
    w.push_back(random_tensor({batch, hidden_dim}, rng));
  }

  auto loss = [&]() {
    auto enc_run = encode_batch(enc, seq);
    auto dec_run = decode_batch(dec, enc_run.final_state, decode_steps);
    double s = 0;
    for (int t = 0; t < decode_steps; ++t) {
      s += weighted_sum(w[static_cast<size_t>(t)],
                        dec_run.outputs[static_cast<size_t>(t)]);
    }
    return s;
  };

  std::vector<NamedParam<double>> params;
  enc.collect_params("enc", params);
  dec.collect_params("dec", params);
  for (auto& p : params) p.param->zero_grad();

  auto enc_run = encode_batch(enc, seq);
  auto dec_run = decode_batch(dec, enc_run.final_state, decode_steps);
  TensorD dh({batch, hidden_dim}), dc({batch, hidden_dim});
  for (int t = decode_steps - 1; t >= 0; --t) {
    for (Index i = 0; i < dh.size(); ++i) dh[i] += w[static_cast<size_t>(t)][i];
    TensorD dh_prev, dc_prev;
    dec.step_backward(dec_run.caches[static_cast<size_t>(t)], dh, dc, &dh_prev,
                      &dc_prev, nullptr);
    dh = std::move(dh_prev);
    dc = std::move(dc_prev);
  }
  TensorD dseq({batch, encode_steps, input_dim});
  for (int t = encode_steps - 1; t >= 0; --t) {
    TensorD dh_prev, dc_prev, dx;
    enc.step_backward(enc_run.caches[static_cast<size_t>(t)], dh, dc, &dh_prev,
                      &dc_prev, &dx);
    for (int ni = 0; ni < batch; ++ni) {
      std::copy(dx.data() + static_cast<Index>(ni) * input_dim,
                dx.data() + static_cast<Index>(ni + 1) * input_dim,
                dseq.data() + (static_cast<Index>(ni) * encode_steps + t) * input_dim);
    }
    dh = std::move(dh_prev);
    dc = std::move(dc_prev);
  }

  double worst = max_rel_error(dseq, fd_over(seq, loss));
  for (auto& p : params) {
    worst = std::max(worst, max_rel_error(p.param->grad, fd_over(p.param->value, loss)));
  }
  return worst;
}

}  // namespace gradcheck_detail

// Every layer kind over several random shapes, the LSTM over a full
// 18-step encode/decode, and the MSE gradient. Names are filterable
// substrings ("conv2d", "batchnorm", "lstm", ...).
inline std::vector<GradCheckResult> run_gradcheck_suite(
    const std::string& filter = "") {
  using namespace gradcheck_detail;
  std::vector<GradCheckResult> results;
  Rng rng(20240917);
  auto record = [&](const std::string& name, double err, double tol = 1e-4) {
    if (!filter.empty() && name.find(filter) == std::string::npos) return;
    results.push_back({name, err, tol, err <= tol});
  };

  struct ConvCase {
    int in_ch, out_ch, k, stride, pad, h, w;
  };
  const ConvCase conv_cases[] = {
      {3, 4, 3, 1, 1, 7, 8}, {2, 5, 3, 2, 1, 9, 10}, {4, 3, 1, 1, 0, 5, 6},
      {1, 2, 5, 2, 2, 11, 9}};
  int idx = 0;
  for (const auto& c : conv_cases) {
    Conv2d<double> conv(c.in_ch, c.out_ch, c.k, c.stride, c.pad, rng);
    TensorD x = random_tensor({2, c.in_ch, c.h, c.w}, rng);
    record("conv2d/" + std::to_string(idx++), check_layer(conv, x, Mode::train, rng));
  }

  idx = 0;
  for (const auto shape : {std::vector<int>{2, 3, 7, 8}, {1, 2, 6, 9}, {3, 1, 5, 5}}) {
    {
      Pool2d<double> pool(PoolKind::max);
      TensorD x = random_tensor(shape, rng);
      record("pool_max/" + std::to_string(idx), check_layer(pool, x, Mode::train, rng));
    }
    {
      Pool2d<double> pool(PoolKind::avg);
      TensorD x = random_tensor(shape, rng);
      record("pool_avg/" + std::to_string(idx), check_layer(pool, x, Mode::train, rng));
    }
    ++idx;
  }

  idx = 0;
  for (const auto shape : {std::vector<int>{4, 3, 5, 6}, {2, 5, 4, 4}, {3, 2, 7, 3}}) {
    BatchNorm2d<double> bn(shape[1]);
    // non-unit scale and shift so their gradients are exercised
    for (Index i = 0; i < bn.gamma().value.size(); ++i) {
      bn.gamma().value[i] = rng.uniform(0.5, 1.5);
      bn.beta().value[i] = rng.uniform(-0.5, 0.5);
    }
    TensorD x = random_tensor(shape, rng);
    record("batchnorm/" + std::to_string(idx++), check_layer(bn, x, Mode::train, rng));
  }

  idx = 0;
  for (const auto shape : {std::vector<int>{2, 3, 4, 5}, {4, 16}, {1, 2, 6, 6}}) {
    {
      Activation<double> act(ActKind::relu);
      TensorD x = random_tensor(shape, rng);
      record("relu/" + std::to_string(idx), check_layer(act, x, Mode::train, rng));
    }
    {
      Activation<double> act(ActKind::elu);
      TensorD x = random_tensor(shape, rng);
      record("elu/" + std::to_string(idx), check_layer(act, x, Mode::train, rng));
    }
    ++idx;
  }

  idx = 0;
  for (const auto shape : {std::vector<int>{2, 3, 4, 5}, {6, 10}, {3, 2, 5, 5}}) {
    Dropout<double> drop(0.25);
    TensorD x = random_tensor(shape, rng);
    // reseeding before every forward pins the mask across FD evaluations
    record("dropout/" + std::to_string(idx++),
           check_layer(drop, x, Mode::train, rng, [&] { drop.reseed(42); }));
  }

  idx = 0;
  for (const auto dims : {std::pair<int, int>{3, 4}, {7, 2}, {5, 5}}) {
    Linear<double> lin(dims.first, dims.second, rng);
    TensorD x = random_tensor({3, dims.first}, rng);
    record("linear/" + std::to_string(idx++), check_layer(lin, x, Mode::train, rng));
  }

  idx = 0;
  for (const auto spec : {FireSpec{4, 2, 3, 3}, FireSpec{6, 3, 4, 4},
                          FireSpec{3, 2, 2, 2}}) {
    Fire<double> fire(spec, rng);
    TensorD x = random_tensor({2, spec.in_channels, 5, 6}, rng);
    record("fire/" + std::to_string(idx++), check_layer(fire, x, Mode::train, rng));
  }

  record("lstm/0", check_lstm(2, 3, 4, 6, 12, rng));
  record("lstm/1", check_lstm(1, 5, 3, 6, 12, rng));
  record("lstm/2", check_lstm(3, 2, 6, 6, 12, rng));

  {
    Rng wrng = rng.fork(99);
    TensorD pred = random_tensor({2, 12, 2}, wrng, 0, 1);
    TensorD target = random_tensor({2, 12, 2}, wrng, 0, 1);
    auto [loss, grad] = mse_loss(pred, target);
    (void)loss;
    TensorD fd = finite_diff_grad(
        [&](const TensorD& p) { return mse_loss(p, target).first; }, pred, kEps);
    record("mse", max_rel_error(grad, fd), 1e-6);
  }

  return results;
}

}  // namespace drivenet
