#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <string>
#include <vector>

#include "drivenet/rng.hpp"
#include "drivenet/tensor.hpp"

namespace drivenet {

enum class Mode { train, eval };

template <class S>
struct Parameter {
  Tensor<S> value;
  Tensor<S> grad;
  Tensor<S> adam_m;
  Tensor<S> adam_v;
  long step_count = 0;

  explicit Parameter(Tensor<S> v = Tensor<S>())
      : value(std::move(v)),
        grad(value.shape()),
        adam_m(value.shape()),
        adam_v(value.shape()) {}

  void zero_grad() { grad.fill(S(0)); }
};

template <class S>
struct NamedParam {
  std::string name;
  Parameter<S>* param;
};

// Non-trainable persistent state (BatchNorm running statistics).
template <class S>
struct NamedBuffer {
  std::string name;
  Tensor<S>* tensor;
};

// A differentiable block. forward caches whatever backward needs, so an
// instance is single-threaded across one forward/backward pair.
template <class S>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor<S> forward(const Tensor<S>& x, Mode mode) = 0;
  virtual Tensor<S> backward(const Tensor<S>& grad_out) = 0;
  virtual void collect_params(const std::string& prefix,
                              std::vector<NamedParam<S>>& out) {
    (void)prefix;
    (void)out;
  }
  virtual void collect_buffers(const std::string& prefix,
                               std::vector<NamedBuffer<S>>& out) {
    (void)prefix;
    (void)out;
  }
};

inline int conv_out_extent(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// He-uniform fan-in initialization; biases start at zero.
template <class S>
void he_uniform_init(Tensor<S>& w, Index fan_in, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (Index i = 0; i < w.size(); ++i) {
    w[i] = static_cast<S>(rng.uniform(-limit, limit));
  }
}

// Number of fixed batch chunks used by the parallel conv paths. Weight-grad
// partials are reduced chunk by chunk in index order, so results are
// bitwise identical no matter how many threads actually run.
constexpr int kBatchChunks = 4;

// ---------------------------------------------------------------------------
// Conv2d: cross-correlation with per-output-channel bias.
// Forward builds, per sample, a [C*k*k, Ho*Wo] patch matrix (im2col) and runs
// a single GEMM against the [O, C*k*k] weight matrix.
template <class S>
class Conv2d : public Layer<S> {
 public:
  Conv2d(int in_ch, int out_ch, int ksize, int stride, int pad, Rng& rng)
      : in_ch_(in_ch), out_ch_(out_ch), k_(ksize), stride_(stride), pad_(pad) {
    if (in_ch <= 0 || out_ch <= 0 || ksize <= 0 || stride <= 0 || pad < 0) {
      throw std::invalid_argument("conv2d: bad geometry");
    }
    weight_ = Parameter<S>(Tensor<S>({out_ch, in_ch, ksize, ksize}));
    bias_ = Parameter<S>(Tensor<S>({out_ch}));
    he_uniform_init(weight_.value,
                    static_cast<Index>(in_ch) * ksize * ksize, rng);
  }

  Tensor<S> forward(const Tensor<S>& x, Mode mode) override {
    check_input(x);
    // the input is cached for backward only while training
    if (mode == Mode::train) {
      x_ = x;
    } else {
      x_ = Tensor<S>();
    }
    const int n = x.extent(0), h = x.extent(2), w = x.extent(3);
    const int ho = conv_out_extent(h, k_, stride_, pad_);
    const int wo = conv_out_extent(w, k_, stride_, pad_);
    if (ho < 1 || wo < 1) {
      throw std::invalid_argument("conv2d: output extent underflow for input " +
                                  x.shape_string());
    }
    Tensor<S> y({n, out_ch_, ho, wo});
    const Index ckk = static_cast<Index>(in_ch_) * k_ * k_;
    const Index p = static_cast<Index>(ho) * wo;
    const Index in_stride = static_cast<Index>(in_ch_) * h * w;
    const Index out_stride = static_cast<Index>(out_ch_) * p;
    auto wmat = map_matrix(weight_.value.data(), out_ch_, ckk);
    auto bvec = map_vector(bias_.value.data(), out_ch_);

#pragma omp parallel for schedule(static)
    for (int chunk = 0; chunk < kBatchChunks; ++chunk) {
      AlignedVec<S> col(static_cast<size_t>(ckk * p));
      for (int ni = chunk_begin(n, chunk); ni < chunk_begin(n, chunk + 1);
           ++ni) {
        im2col(x.data() + ni * in_stride, h, w, ho, wo, col.data());
        auto cmat = map_matrix(static_cast<const S*>(col.data()), ckk, p);
        auto ymat = map_matrix(y.data() + ni * out_stride, out_ch_, p);
        ymat.noalias() = wmat * cmat;
        ymat.colwise() += bvec;
      }
    }
    return y;
  }

  Tensor<S> backward(const Tensor<S>& gy) override {
    if (x_.size() == 0) {
      throw std::logic_error("conv2d backward: last forward ran in eval mode");
    }
    const int n = x_.extent(0), h = x_.extent(2), w = x_.extent(3);
    const int ho = gy.extent(2), wo = gy.extent(3);
    const Index ckk = static_cast<Index>(in_ch_) * k_ * k_;
    const Index p = static_cast<Index>(ho) * wo;
    const Index in_stride = static_cast<Index>(in_ch_) * h * w;
    const Index out_stride = static_cast<Index>(out_ch_) * p;
    Tensor<S> gx({n, in_ch_, h, w});
    auto wmat = map_matrix(weight_.value.data(), out_ch_, ckk);

    std::vector<Tensor<S>> dw_part(kBatchChunks,
                                   Tensor<S>(weight_.value.shape()));
    std::vector<Tensor<S>> db_part(kBatchChunks, Tensor<S>({out_ch_}));

#pragma omp parallel for schedule(static)
    for (int chunk = 0; chunk < kBatchChunks; ++chunk) {
      AlignedVec<S> col(static_cast<size_t>(ckk * p));
      AlignedVec<S> dcol(static_cast<size_t>(ckk * p));
      auto dwmat = map_matrix(dw_part[chunk].data(), out_ch_, ckk);
      auto dbvec = map_vector(db_part[chunk].data(), out_ch_);
      for (int ni = chunk_begin(n, chunk); ni < chunk_begin(n, chunk + 1);
           ++ni) {
        im2col(x_.data() + ni * in_stride, h, w, ho, wo, col.data());
        auto cmat = map_matrix(static_cast<const S*>(col.data()), ckk, p);
        auto gymat = map_matrix(gy.data() + ni * out_stride, out_ch_, p);
        dwmat.noalias() += gymat * cmat.transpose();
        dbvec += gymat.rowwise().sum();
        auto dcmat = map_matrix(dcol.data(), ckk, p);
        dcmat.noalias() = wmat.transpose() * gymat;
        col2im_add(dcol.data(), h, w, ho, wo, gx.data() + ni * in_stride);
      }
    }
    for (int chunk = 0; chunk < kBatchChunks; ++chunk) {
      map_vector(weight_.grad.data(), weight_.grad.size()) +=
          map_vector(static_cast<const S*>(dw_part[chunk].data()),
                     dw_part[chunk].size());
      map_vector(bias_.grad.data(), out_ch_) +=
          map_vector(static_cast<const S*>(db_part[chunk].data()), out_ch_);
    }
    return gx;
  }

  void collect_params(const std::string& prefix,
                      std::vector<NamedParam<S>>& out) override {
    out.push_back({prefix + ".weight", &weight_});
    out.push_back({prefix + ".bias", &bias_});
  }

  Parameter<S>& weight() { return weight_; }
  Parameter<S>& bias() { return bias_; }
  int kernel() const { return k_; }

 private:
  static int chunk_begin(int n, int chunk) {
    return static_cast<int>((static_cast<std::int64_t>(n) * chunk) /
                            kBatchChunks);
  }

  void check_input(const Tensor<S>& x) const {
    if (x.rank() != 4 || x.extent(1) != in_ch_) {
      throw std::invalid_argument("conv2d: expected [N," +
                                  std::to_string(in_ch_) + ",H,W], got " +
                                  x.shape_string());
    }
  }

  // col is [C*k*k, Ho*Wo]; row r = (c*k + kh)*k + kw holds the input value at
  // (c, ho*stride - pad + kh, wo*stride - pad + kw), zero outside the image.
  void im2col(const S* x, int h, int w, int ho, int wo, S* col) const {
    const Index plane = static_cast<Index>(h) * w;
    for (int c = 0; c < in_ch_; ++c) {
      for (int kh = 0; kh < k_; ++kh) {
        for (int kw = 0; kw < k_; ++kw) {
          S* row = col + ((static_cast<Index>(c) * k_ + kh) * k_ + kw) *
                             (static_cast<Index>(ho) * wo);
          for (int oh = 0; oh < ho; ++oh) {
            const int ih = oh * stride_ - pad_ + kh;
            S* dst = row + static_cast<Index>(oh) * wo;
            if (ih < 0 || ih >= h) {
              std::fill(dst, dst + wo, S(0));
              continue;
            }
            const S* src = x + c * plane + static_cast<Index>(ih) * w;
            if (stride_ == 1) {
              const int lo = std::max(0, pad_ - kw);
              const int hi = std::min(wo, w + pad_ - kw);
              std::fill(dst, dst + lo, S(0));
              if (hi > lo) std::memcpy(dst + lo, src + lo - pad_ + kw,
                                       static_cast<size_t>(hi - lo) * sizeof(S));
              std::fill(dst + std::max(lo, hi), dst + wo, S(0));
            } else {
              for (int ow = 0; ow < wo; ++ow) {
                const int iw = ow * stride_ - pad_ + kw;
                dst[ow] = (iw >= 0 && iw < w) ? src[iw] : S(0);
              }
            }
          }
        }
      }
    }
  }

  void col2im_add(const S* col, int h, int w, int ho, int wo, S* gx) const {
    const Index plane = static_cast<Index>(h) * w;
    for (int c = 0; c < in_ch_; ++c) {
      for (int kh = 0; kh < k_; ++kh) {
        for (int kw = 0; kw < k_; ++kw) {
          const S* row = col + ((static_cast<Index>(c) * k_ + kh) * k_ + kw) *
                                   (static_cast<Index>(ho) * wo);
          for (int oh = 0; oh < ho; ++oh) {
            const int ih = oh * stride_ - pad_ + kh;
            if (ih < 0 || ih >= h) continue;
            S* dst = gx + c * plane + static_cast<Index>(ih) * w;
            const S* src = row + static_cast<Index>(oh) * wo;
            for (int ow = 0; ow < wo; ++ow) {
              const int iw = ow * stride_ - pad_ + kw;
              if (iw >= 0 && iw < w) dst[iw] += src[ow];
            }
          }
        }
      }
    }
  }

  int in_ch_, out_ch_, k_, stride_, pad_;
  Parameter<S> weight_, bias_;
  Tensor<S> x_;
};

// ---------------------------------------------------------------------------
// Pooling. Max routes the gradient to the argmax (lowest flat index wins
// ties); average divides by the number of window cells inside the image, so
// constant inputs stay constant at the borders.
enum class PoolKind { max, avg };

template <class S>
class Pool2d : public Layer<S> {
 public:
  explicit Pool2d(PoolKind kind, int ksize = 3, int stride = 2, int pad = 1)
      : kind_(kind), k_(ksize), stride_(stride), pad_(pad) {}

  Tensor<S> forward(const Tensor<S>& x, Mode mode) override {
    if (x.rank() != 4) throw std::invalid_argument("pool: need [N,C,H,W]");
    in_shape_ = x.shape();
    const int n = x.extent(0), c = x.extent(1), h = x.extent(2),
              w = x.extent(3);
    const int ho = conv_out_extent(h, k_, stride_, pad_);
    const int wo = conv_out_extent(w, k_, stride_, pad_);
    if (ho < 1 || wo < 1) {
      throw std::invalid_argument("pool: output extent underflow");
    }
    Tensor<S> y({n, c, ho, wo});
    const bool keep_argmax = kind_ == PoolKind::max && mode == Mode::train;
    if (keep_argmax) {
      argmax_.assign(static_cast<size_t>(y.size()), 0);
    } else {
      argmax_.clear();
    }
    Index oi = 0;
    for (int ni = 0; ni < n; ++ni) {
      for (int ci = 0; ci < c; ++ci) {
        const S* plane = x.data() + (static_cast<Index>(ni) * c + ci) * h * w;
        for (int oh = 0; oh < ho; ++oh) {
          for (int ow = 0; ow < wo; ++ow, ++oi) {
            const int h0 = oh * stride_ - pad_, w0 = ow * stride_ - pad_;
            if (kind_ == PoolKind::max) {
              S best = S(0);
              Index best_idx = -1;
              for (int kh = 0; kh < k_; ++kh) {
                const int ih = h0 + kh;
                if (ih < 0 || ih >= h) continue;
                for (int kw = 0; kw < k_; ++kw) {
                  const int iw = w0 + kw;
                  if (iw < 0 || iw >= w) continue;
                  const S v = plane[static_cast<Index>(ih) * w + iw];
                  if (best_idx < 0 || v > best) {
                    best = v;
                    best_idx = static_cast<Index>(ih) * w + iw;
                  }
                }
              }
              y[oi] = best;
              if (keep_argmax) argmax_[static_cast<size_t>(oi)] = best_idx;
            } else {
              double sum = 0;
              int count = 0;
              for (int kh = 0; kh < k_; ++kh) {
                const int ih = h0 + kh;
                if (ih < 0 || ih >= h) continue;
                for (int kw = 0; kw < k_; ++kw) {
                  const int iw = w0 + kw;
                  if (iw < 0 || iw >= w) continue;
                  sum += static_cast<double>(plane[static_cast<Index>(ih) * w + iw]);
                  ++count;
                }
              }
              y[oi] = static_cast<S>(sum / count);
            }
          }
        }
      }
    }
    return y;
  }

  Tensor<S> backward(const Tensor<S>& gy) override {
    if (kind_ == PoolKind::max && argmax_.empty()) {
      throw std::logic_error("max pool backward: last forward ran in eval mode");
    }
    const int n = in_shape_[0], c = in_shape_[1], h = in_shape_[2],
              w = in_shape_[3];
    const int ho = gy.extent(2), wo = gy.extent(3);
    Tensor<S> gx({n, c, h, w});
    Index oi = 0;
    for (int ni = 0; ni < n; ++ni) {
      for (int ci = 0; ci < c; ++ci) {
        S* plane = gx.data() + (static_cast<Index>(ni) * c + ci) * h * w;
        for (int oh = 0; oh < ho; ++oh) {
          for (int ow = 0; ow < wo; ++ow, ++oi) {
            if (kind_ == PoolKind::max) {
              plane[argmax_[static_cast<size_t>(oi)]] += gy[oi];
            } else {
              const int h0 = oh * stride_ - pad_, w0 = ow * stride_ - pad_;
              int count = 0;
              for (int kh = 0; kh < k_; ++kh) {
                const int ih = h0 + kh;
                if (ih < 0 || ih >= h) continue;
                for (int kw = 0; kw < k_; ++kw) {
                  if (w0 + kw >= 0 && w0 + kw < w) ++count;
                }
              }
              const S share = gy[oi] / static_cast<S>(count);
              for (int kh = 0; kh < k_; ++kh) {
                const int ih = h0 + kh;
                if (ih < 0 || ih >= h) continue;
                for (int kw = 0; kw < k_; ++kw) {
                  const int iw = w0 + kw;
                  if (iw >= 0 && iw < w) {
                    plane[static_cast<Index>(ih) * w + iw] += share;
                  }
                }
              }
            }
          }
        }
      }
    }
    return gx;
  }

 private:
  PoolKind kind_;
  int k_, stride_, pad_;
  std::vector<int> in_shape_;
  std::vector<Index> argmax_;
};

// ---------------------------------------------------------------------------
// BatchNorm over [N,C,H,W], one statistic per channel. Train mode normalizes
// with biased batch variance and tracks running stats (unbiased variance) by
// exponential moving average; eval mode applies the running statistics.
template <class S>
class BatchNorm2d : public Layer<S> {
 public:
  explicit BatchNorm2d(int channels, S eps = S(1e-5), S momentum = S(0.1))
      : channels_(channels), eps_(eps), momentum_(momentum) {
    gamma_ = Parameter<S>(Tensor<S>::full({channels}, S(1)));
    beta_ = Parameter<S>(Tensor<S>({channels}));
    running_mean_ = Tensor<S>({channels});
    running_var_ = Tensor<S>::full({channels}, S(1));
  }

  Tensor<S> forward(const Tensor<S>& x, Mode mode) override {
    if (x.rank() != 4 || x.extent(1) != channels_) {
      throw std::invalid_argument("batchnorm: expected [N," +
                                  std::to_string(channels_) + ",H,W]");
    }
    const int n = x.extent(0), h = x.extent(2), w = x.extent(3);
    if (mode == Mode::train && n < 2) {
      throw std::invalid_argument("batchnorm: train mode needs batch >= 2");
    }
    const Index plane = static_cast<Index>(h) * w;
    const Index m = static_cast<Index>(n) * plane;
    Tensor<S> y(x.shape());
    xhat_ = mode == Mode::train ? Tensor<S>(x.shape()) : Tensor<S>();
    inv_std_ = Tensor<S>({channels_});
    for (int ci = 0; ci < channels_; ++ci) {
      double mean, var;
      if (mode == Mode::train) {
        // fixed 4-lane accumulation: fast and still order-deterministic
        double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
        double q0 = 0, q1 = 0, q2 = 0, q3 = 0;
        for (int ni = 0; ni < n; ++ni) {
          const S* p = x.data() + (static_cast<Index>(ni) * channels_ + ci) * plane;
          Index i = 0;
          for (; i + 4 <= plane; i += 4) {
            const double a = p[i], b = p[i + 1], c = p[i + 2], d = p[i + 3];
            s0 += a; s1 += b; s2 += c; s3 += d;
            q0 += a * a; q1 += b * b; q2 += c * c; q3 += d * d;
          }
          for (; i < plane; ++i) {
            const double a = p[i];
            s0 += a;
            q0 += a * a;
          }
        }
        const double sum = (s0 + s1) + (s2 + s3);
        const double sq = (q0 + q1) + (q2 + q3);
        mean = sum / static_cast<double>(m);
        var = sq / static_cast<double>(m) - mean * mean;
        var = std::max(var, 0.0);
        const double unbiased = m > 1 ? var * static_cast<double>(m) / (m - 1) : var;
        running_mean_[ci] = static_cast<S>((1 - momentum_) * running_mean_[ci] +
                                           momentum_ * mean);
        running_var_[ci] = static_cast<S>((1 - momentum_) * running_var_[ci] +
                                          momentum_ * unbiased);
      } else {
        mean = running_mean_[ci];
        var = running_var_[ci];
      }
      const double istd = 1.0 / std::sqrt(var + static_cast<double>(eps_));
      inv_std_[ci] = static_cast<S>(istd);
      const S g = gamma_.value[ci], b = beta_.value[ci];
      const S mean_s = static_cast<S>(mean), istd_s = static_cast<S>(istd);
      for (int ni = 0; ni < n; ++ni) {
        const Index base = (static_cast<Index>(ni) * channels_ + ci) * plane;
        const S* p = x.data() + base;
        S* out = y.data() + base;
        if (mode == Mode::train) {
          S* xh = xhat_.data() + base;
          for (Index i = 0; i < plane; ++i) {
            xh[i] = (p[i] - mean_s) * istd_s;
            out[i] = g * xh[i] + b;
          }
        } else {
          for (Index i = 0; i < plane; ++i) {
            out[i] = g * ((p[i] - mean_s) * istd_s) + b;
          }
        }
      }
    }
    return y;
  }

  Tensor<S> backward(const Tensor<S>& gy) override {
    if (xhat_.size() == 0) {
      throw std::logic_error("batchnorm backward: last forward ran in eval mode");
    }
    const int n = gy.extent(0), h = gy.extent(2), w = gy.extent(3);
    const Index plane = static_cast<Index>(h) * w;
    const Index m = static_cast<Index>(n) * plane;
    Tensor<S> gx(gy.shape());
    for (int ci = 0; ci < channels_; ++ci) {
      double s0 = 0, s1 = 0, x0 = 0, x1 = 0;
      for (int ni = 0; ni < n; ++ni) {
        const Index base = (static_cast<Index>(ni) * channels_ + ci) * plane;
        const S* g = gy.data() + base;
        const S* xh = xhat_.data() + base;
        Index i = 0;
        for (; i + 2 <= plane; i += 2) {
          s0 += g[i];
          s1 += g[i + 1];
          x0 += static_cast<double>(g[i]) * xh[i];
          x1 += static_cast<double>(g[i + 1]) * xh[i + 1];
        }
        for (; i < plane; ++i) {
          s0 += g[i];
          x0 += static_cast<double>(g[i]) * xh[i];
        }
      }
      const double sum_gy = s0 + s1;
      const double sum_gy_xh = x0 + x1;
      gamma_.grad[ci] += static_cast<S>(sum_gy_xh);
      beta_.grad[ci] += static_cast<S>(sum_gy);
      const S gs = static_cast<S>(gamma_.value[ci] * static_cast<double>(inv_std_[ci]));
      // dx = gamma*istd * (gy - mean(gy) - xhat * mean(gy*xhat))
      const S mg = static_cast<S>(sum_gy / static_cast<double>(m));
      const S mgx = static_cast<S>(sum_gy_xh / static_cast<double>(m));
      for (int ni = 0; ni < n; ++ni) {
        const Index base = (static_cast<Index>(ni) * channels_ + ci) * plane;
        const S* g = gy.data() + base;
        const S* xh = xhat_.data() + base;
        S* out = gx.data() + base;
        for (Index i = 0; i < plane; ++i) {
          out[i] = gs * (g[i] - mg - xh[i] * mgx);
        }
      }
    }
    return gx;
  }

  void collect_params(const std::string& prefix,
                      std::vector<NamedParam<S>>& out) override {
    out.push_back({prefix + ".gamma", &gamma_});
    out.push_back({prefix + ".beta", &beta_});
  }

  void collect_buffers(const std::string& prefix,
                       std::vector<NamedBuffer<S>>& out) override {
    out.push_back({prefix + ".running_mean", &running_mean_});
    out.push_back({prefix + ".running_var", &running_var_});
  }

  Parameter<S>& gamma() { return gamma_; }
  Parameter<S>& beta() { return beta_; }
  Tensor<S>& running_mean() { return running_mean_; }
  Tensor<S>& running_var() { return running_var_; }

 private:
  int channels_;
  S eps_, momentum_;
  Parameter<S> gamma_, beta_;
  Tensor<S> running_mean_, running_var_;
  Tensor<S> xhat_, inv_std_;
};

// ---------------------------------------------------------------------------
enum class ActKind { relu, elu };

template <class S>
class Activation : public Layer<S> {
 public:
  explicit Activation(ActKind kind) : kind_(kind) {}

  Tensor<S> forward(const Tensor<S>& x, Mode mode) override {
    Tensor<S> y(x.shape());
    const Index n = x.size();
    if (kind_ == ActKind::relu) {
      for (Index i = 0; i < n; ++i) y[i] = x[i] > S(0) ? x[i] : S(0);
    } else {
      // vectorized exp; elu(x) = expm1(x) for x <= 0
      auto xa = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>(x.data(), n);
      auto ya = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>(y.data(), n);
      ya = (xa > S(0)).select(xa, xa.exp() - S(1));
    }
    if (mode == Mode::train) {
      y_ = y;
    } else {
      y_ = Tensor<S>();
    }
    return y;
  }

  // elu'(x) = e^x = y+1 below zero, so the cached output is enough
  Tensor<S> backward(const Tensor<S>& gy) override {
    if (y_.size() == 0) {
      throw std::logic_error("activation backward: last forward ran in eval mode");
    }
    const Index n = gy.size();
    Tensor<S> gx(gy.shape());
    auto ya = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>(y_.data(), n);
    auto ga = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>(gy.data(), n);
    auto out = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>(gx.data(), n);
    if (kind_ == ActKind::relu) {
      out = (ya > S(0)).select(ga, S(0));
    } else {
      out = (ya > S(0)).select(ga, ga * (ya + S(1)));
    }
    return gx;
  }

 private:
  ActKind kind_;
  Tensor<S> y_;
};

// ---------------------------------------------------------------------------
// Inverted dropout: train mode zeroes elements with probability p and scales
// survivors by 1/(1-p); eval mode is the identity.
template <class S>
class Dropout : public Layer<S> {
 public:
  explicit Dropout(double p, std::uint64_t seed = 0) : p_(p), rng_(seed) {
    if (p < 0 || p >= 1) throw std::invalid_argument("dropout: p outside [0,1)");
  }

  void reseed(std::uint64_t seed) { rng_ = Rng(seed); }

  Tensor<S> forward(const Tensor<S>& x, Mode mode) override {
    mode_ = mode;
    if (mode == Mode::eval || p_ == 0) return x;
    const S keep_scale = static_cast<S>(1.0 / (1.0 - p_));
    mask_ = Tensor<S>(x.shape());
    Tensor<S> y(x.shape());
    for (Index i = 0; i < x.size(); ++i) {
      mask_[i] = rng_.uniform() >= p_ ? keep_scale : S(0);
      y[i] = x[i] * mask_[i];
    }
    return y;
  }

  Tensor<S> backward(const Tensor<S>& gy) override {
    if (mode_ == Mode::eval || p_ == 0) return gy;
    Tensor<S> gx(gy.shape());
    for (Index i = 0; i < gy.size(); ++i) gx[i] = gy[i] * mask_[i];
    return gx;
  }

 private:
  double p_;
  Rng rng_;
  Mode mode_ = Mode::train;
  Tensor<S> mask_;
};

// ---------------------------------------------------------------------------
template <class S>
class Linear : public Layer<S> {
 public:
  Linear(int in_dim, int out_dim, Rng& rng) : in_(in_dim), out_(out_dim) {
    weight_ = Parameter<S>(Tensor<S>({out_dim, in_dim}));
    bias_ = Parameter<S>(Tensor<S>({out_dim}));
    he_uniform_init(weight_.value, in_dim, rng);
  }

  Tensor<S> forward(const Tensor<S>& x, Mode mode) override {
    if (x.rank() != 2 || x.extent(1) != in_) {
      throw std::invalid_argument("linear: expected [N," + std::to_string(in_) +
                                  "], got " + x.shape_string());
    }
    if (mode == Mode::train) {
      x_ = x;
    } else {
      x_ = Tensor<S>();
    }
    const int n = x.extent(0);
    Tensor<S> y({n, out_});
    auto xm = map_matrix(x.data(), n, in_);
    auto wm = map_matrix(weight_.value.data(), out_, in_);
    auto ym = map_matrix(y.data(), n, out_);
    ym.noalias() = xm * wm.transpose();
    ym.rowwise() += map_vector(bias_.value.data(), out_).transpose();
    return y;
  }

  Tensor<S> backward(const Tensor<S>& gy) override {
    if (x_.size() == 0 && in_ > 0) {
      throw std::logic_error("linear backward: last forward ran in eval mode");
    }
    const int n = x_.extent(0);
    auto gym = map_matrix(gy.data(), n, out_);
    auto xm = map_matrix(x_.data(), n, in_);
    map_matrix(weight_.grad.data(), out_, in_).noalias() +=
        gym.transpose() * xm;
    map_vector(bias_.grad.data(), out_) += gym.colwise().sum().transpose();
    Tensor<S> gx({n, in_});
    map_matrix(gx.data(), n, in_).noalias() =
        gym * map_matrix(weight_.value.data(), out_, in_);
    return gx;
  }

  void collect_params(const std::string& prefix,
                      std::vector<NamedParam<S>>& out) override {
    out.push_back({prefix + ".weight", &weight_});
    out.push_back({prefix + ".bias", &bias_});
  }

  Parameter<S>& weight() { return weight_; }
  Parameter<S>& bias() { return bias_; }

 private:
  int in_, out_;
  Parameter<S> weight_, bias_;
  Tensor<S> x_;
};

// ---------------------------------------------------------------------------
// Global average pooling head: [N,C,H,W] -> [N,C].
template <class S>
class GlobalAvgPool : public Layer<S> {
 public:
  Tensor<S> forward(const Tensor<S>& x, Mode) override {
    if (x.rank() != 4) throw std::invalid_argument("gap: need [N,C,H,W]");
    in_shape_ = x.shape();
    const int n = x.extent(0), c = x.extent(1);
    const Index plane = static_cast<Index>(x.extent(2)) * x.extent(3);
    Tensor<S> y({n, c});
    for (Index i = 0; i < static_cast<Index>(n) * c; ++i) {
      double sum = 0;
      const S* p = x.data() + i * plane;
      for (Index j = 0; j < plane; ++j) sum += p[j];
      y[i] = static_cast<S>(sum / static_cast<double>(plane));
    }
    return y;
  }

  Tensor<S> backward(const Tensor<S>& gy) override {
    Tensor<S> gx(in_shape_);
    const Index plane = static_cast<Index>(in_shape_[2]) * in_shape_[3];
    const S scale = static_cast<S>(1.0 / static_cast<double>(plane));
    for (Index i = 0; i < gy.size(); ++i) {
      S* p = gx.data() + i * plane;
      const S v = gy[i] * scale;
      for (Index j = 0; j < plane; ++j) p[j] = v;
    }
    return gx;
  }

 private:
  std::vector<int> in_shape_;
};

template <class S>
class Flatten : public Layer<S> {
 public:
  Tensor<S> forward(const Tensor<S>& x, Mode) override {
    in_shape_ = x.shape();
    const int n = x.extent(0);
    return x.reshaped({n, static_cast<int>(x.size() / n)});
  }
  Tensor<S> backward(const Tensor<S>& gy) override {
    return gy.reshaped(in_shape_);
  }

 private:
  std::vector<int> in_shape_;
};

// ---------------------------------------------------------------------------
// Fire block: squeeze 1x1 conv, then parallel expand 1x1 and expand 3x3
// (padding 1) convs, channel-concatenated. Activations after every conv;
// spatial extents preserved.
struct FireSpec {
  int in_channels;
  int squeeze_channels;
  int expand1_channels;
  int expand3_channels;
  int out_channels() const { return expand1_channels + expand3_channels; }
};

template <class S>
class Fire : public Layer<S> {
 public:
  Fire(const FireSpec& spec, Rng& rng, ActKind act = ActKind::elu)
      : spec_(spec),
        squeeze_(spec.in_channels, spec.squeeze_channels, 1, 1, 0, rng),
        expand1_(spec.squeeze_channels, spec.expand1_channels, 1, 1, 0, rng),
        expand3_(spec.squeeze_channels, spec.expand3_channels, 3, 1, 1, rng),
        act_s_(act),
        act_e1_(act),
        act_e3_(act) {
    if (spec.squeeze_channels >= spec.expand1_channels + spec.expand3_channels) {
      throw std::invalid_argument("fire: squeeze must be narrower than expand");
    }
  }

  Tensor<S> forward(const Tensor<S>& x, Mode mode) override {
    Tensor<S> s = act_s_.forward(squeeze_.forward(x, mode), mode);
    Tensor<S> a = act_e1_.forward(expand1_.forward(s, mode), mode);
    Tensor<S> b = act_e3_.forward(expand3_.forward(s, mode), mode);
    const int n = a.extent(0), h = a.extent(2), w = a.extent(3);
    const int ca = a.extent(1), cb = b.extent(1);
    Tensor<S> y({n, ca + cb, h, w});
    const Index plane = static_cast<Index>(h) * w;
    for (int ni = 0; ni < n; ++ni) {
      std::memcpy(y.data() + static_cast<Index>(ni) * (ca + cb) * plane,
                  a.data() + static_cast<Index>(ni) * ca * plane,
                  static_cast<size_t>(ca * plane) * sizeof(S));
      std::memcpy(y.data() + (static_cast<Index>(ni) * (ca + cb) + ca) * plane,
                  b.data() + static_cast<Index>(ni) * cb * plane,
                  static_cast<size_t>(cb * plane) * sizeof(S));
    }
    return y;
  }

  Tensor<S> backward(const Tensor<S>& gy) override {
    const int n = gy.extent(0), h = gy.extent(2), w = gy.extent(3);
    const int ca = spec_.expand1_channels, cb = spec_.expand3_channels;
    Tensor<S> ga({n, ca, h, w}), gb({n, cb, h, w});
    const Index plane = static_cast<Index>(h) * w;
    for (int ni = 0; ni < n; ++ni) {
      std::memcpy(ga.data() + static_cast<Index>(ni) * ca * plane,
                  gy.data() + static_cast<Index>(ni) * (ca + cb) * plane,
                  static_cast<size_t>(ca * plane) * sizeof(S));
      std::memcpy(gb.data() + static_cast<Index>(ni) * cb * plane,
                  gy.data() + (static_cast<Index>(ni) * (ca + cb) + ca) * plane,
                  static_cast<size_t>(cb * plane) * sizeof(S));
    }
    Tensor<S> gs = expand1_.backward(act_e1_.backward(ga));
    Tensor<S> gs3 = expand3_.backward(act_e3_.backward(gb));
    for (Index i = 0; i < gs.size(); ++i) gs[i] += gs3[i];
    return squeeze_.backward(act_s_.backward(gs));
  }

  void collect_params(const std::string& prefix,
                      std::vector<NamedParam<S>>& out) override {
    squeeze_.collect_params(prefix + ".squeeze", out);
    expand1_.collect_params(prefix + ".expand1", out);
    expand3_.collect_params(prefix + ".expand3", out);
  }

  const FireSpec& spec() const { return spec_; }

 private:
  FireSpec spec_;
  Conv2d<S> squeeze_, expand1_, expand3_;
  Activation<S> act_s_, act_e1_, act_e3_;
};

// ---------------------------------------------------------------------------
// Sequential container.
template <class S>
class LayerStack : public Layer<S> {
 public:
  LayerStack() = default;

  template <class L, class... Args>
  L* add(Args&&... args) {
    auto layer = std::make_unique<L>(std::forward<Args>(args)...);
    L* raw = layer.get();
    layers_.push_back(std::move(layer));
    return raw;
  }

  Tensor<S> forward(const Tensor<S>& x, Mode mode) override {
    Tensor<S> cur = x;
    for (auto& l : layers_) cur = l->forward(cur, mode);
    return cur;
  }

  Tensor<S> backward(const Tensor<S>& gy) override {
    Tensor<S> cur = gy;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
      cur = (*it)->backward(cur);
    }
    return cur;
  }

  void collect_params(const std::string& prefix,
                      std::vector<NamedParam<S>>& out) override {
    for (size_t i = 0; i < layers_.size(); ++i) {
      layers_[i]->collect_params(prefix + "." + std::to_string(i), out);
    }
  }

  void collect_buffers(const std::string& prefix,
                       std::vector<NamedBuffer<S>>& out) override {
    for (size_t i = 0; i < layers_.size(); ++i) {
      layers_[i]->collect_buffers(prefix + "." + std::to_string(i), out);
    }
  }

  size_t depth() const { return layers_.size(); }
  Layer<S>* layer(size_t i) { return layers_[i].get(); }

 private:
  std::vector<std::unique_ptr<Layer<S>>> layers_;
};

}  // namespace drivenet
