#pragma once

#include <cstdint>
#include <vector>

#include "drivenet/layers.hpp"
#include "drivenet/tensor.hpp"

namespace drivenet {

// Batched LSTM state: h and c are [N, hidden].
template <class S>
struct LstmState {
  Tensor<S> h;
  Tensor<S> c;
};

template <class S>
struct LstmStepCache {
  Tensor<S> z;       // [N, hidden+input], the concatenation [h_{t-1}, x_t]
  Tensor<S> f, i, cbar, o;
  Tensor<S> c_prev, c, tanh_c;
};

// One LSTM cell with sigmoid forget/input/output gates and tanh candidate
// and output squashing. Each gate weight is [hidden, hidden+input] acting on
// [h_{t-1}, x_t]; the forget-gate bias starts at 1 so early steps keep their
// cell memory.
template <class S>
class LstmCell {
 public:
  LstmCell(int input_dim, int hidden_dim, Rng& rng)
      : input_(input_dim), hidden_(hidden_dim) {
    const double limit = 1.0 / std::sqrt(static_cast<double>(hidden_dim + input_dim));
    for (Parameter<S>* w : {&w_f_, &w_i_, &w_c_, &w_o_}) {
      *w = Parameter<S>(Tensor<S>({hidden_dim, hidden_dim + input_dim}));
      for (Index j = 0; j < w->value.size(); ++j) {
        w->value[j] = static_cast<S>(rng.uniform(-limit, limit));
      }
    }
    b_f_ = Parameter<S>(Tensor<S>::full({hidden_dim}, S(1)));
    b_i_ = Parameter<S>(Tensor<S>({hidden_dim}));
    b_c_ = Parameter<S>(Tensor<S>({hidden_dim}));
    b_o_ = Parameter<S>(Tensor<S>({hidden_dim}));
  }

  int input_dim() const { return input_; }
  int hidden_dim() const { return hidden_; }

  LstmState<S> zero_state(int batch) const {
    return {Tensor<S>({batch, hidden_}), Tensor<S>({batch, hidden_})};
  }

  // f,i,o = sigmoid(W[h,x]+b); c' = tanh(W[h,x]+b);
  // c_t = f*c_{t-1} + i*c'; h_t = o*tanh(c_t)
  LstmState<S> step(const LstmState<S>& prev, const Tensor<S>& x,
                    LstmStepCache<S>* cache) const {
    const int n = prev.h.extent(0);
    if (x.rank() != 2 || x.extent(0) != n || x.extent(1) != input_) {
      throw std::invalid_argument("lstm step: expected x [N," +
                                  std::to_string(input_) + "]");
    }
    Tensor<S> z({n, hidden_ + input_});
    for (int ni = 0; ni < n; ++ni) {
      std::copy(prev.h.data() + static_cast<Index>(ni) * hidden_,
                prev.h.data() + static_cast<Index>(ni + 1) * hidden_,
                z.data() + static_cast<Index>(ni) * (hidden_ + input_));
      std::copy(x.data() + static_cast<Index>(ni) * input_,
                x.data() + static_cast<Index>(ni + 1) * input_,
                z.data() + static_cast<Index>(ni) * (hidden_ + input_) + hidden_);
    }
    Tensor<S> f = gate(z, w_f_, b_f_, true);
    Tensor<S> i = gate(z, w_i_, b_i_, true);
    Tensor<S> cbar = gate(z, w_c_, b_c_, false);
    Tensor<S> o = gate(z, w_o_, b_o_, true);
    Tensor<S> c({n, hidden_});
    Tensor<S> tanh_c({n, hidden_});
    Tensor<S> h({n, hidden_});
    for (Index j = 0; j < c.size(); ++j) {
      c[j] = f[j] * prev.c[j] + i[j] * cbar[j];
      tanh_c[j] = static_cast<S>(std::tanh(static_cast<double>(c[j])));
      h[j] = o[j] * tanh_c[j];
    }
    if (cache) {
      *cache = {std::move(z), std::move(f), std::move(i), std::move(cbar),
                std::move(o), prev.c, c, std::move(tanh_c)};
    }
    return {std::move(h), std::move(c)};
  }

  // Accumulates gate parameter gradients; returns gradients for the previous
  // state and, if dx is non-null, for the step input.
  void step_backward(const LstmStepCache<S>& cache, const Tensor<S>& dh,
                     const Tensor<S>& dc, Tensor<S>* dh_prev,
                     Tensor<S>* dc_prev, Tensor<S>* dx) {
    const int n = dh.extent(0);
    Tensor<S> da_f({n, hidden_}), da_i({n, hidden_}), da_c({n, hidden_}),
        da_o({n, hidden_});
    Tensor<S> dcp({n, hidden_});
    for (Index j = 0; j < dh.size(); ++j) {
      const S o = cache.o[j], tc = cache.tanh_c[j];
      const S dct = dc[j] + dh[j] * o * (S(1) - tc * tc);
      const S f = cache.f[j], i = cache.i[j], cb = cache.cbar[j];
      da_f[j] = dct * cache.c_prev[j] * f * (S(1) - f);
      da_i[j] = dct * cb * i * (S(1) - i);
      da_c[j] = dct * i * (S(1) - cb * cb);
      const S dho = dh[j] * tc;
      da_o[j] = dho * o * (S(1) - o);
      dcp[j] = dct * f;
    }
    Tensor<S> dz({n, hidden_ + input_});
    auto dzm = map_matrix(dz.data(), n, hidden_ + input_);
    accumulate_gate_grads(cache.z, da_f, w_f_, b_f_, dzm, true);
    accumulate_gate_grads(cache.z, da_i, w_i_, b_i_, dzm, false);
    accumulate_gate_grads(cache.z, da_c, w_c_, b_c_, dzm, false);
    accumulate_gate_grads(cache.z, da_o, w_o_, b_o_, dzm, false);
    if (dh_prev) {
      *dh_prev = Tensor<S>({n, hidden_});
      for (int ni = 0; ni < n; ++ni) {
        std::copy(dz.data() + static_cast<Index>(ni) * (hidden_ + input_),
                  dz.data() + static_cast<Index>(ni) * (hidden_ + input_) + hidden_,
                  dh_prev->data() + static_cast<Index>(ni) * hidden_);
      }
    }
    if (dc_prev) *dc_prev = std::move(dcp);
    if (dx) {
      *dx = Tensor<S>({n, input_});
      for (int ni = 0; ni < n; ++ni) {
        std::copy(dz.data() + static_cast<Index>(ni) * (hidden_ + input_) + hidden_,
                  dz.data() + static_cast<Index>(ni + 1) * (hidden_ + input_),
                  dx->data() + static_cast<Index>(ni) * input_);
      }
    }
  }

  void collect_params(const std::string& prefix,
                      std::vector<NamedParam<S>>& out) {
    out.push_back({prefix + ".w_f", &w_f_});
    out.push_back({prefix + ".w_i", &w_i_});
    out.push_back({prefix + ".w_c", &w_c_});
    out.push_back({prefix + ".w_o", &w_o_});
    out.push_back({prefix + ".b_f", &b_f_});
    out.push_back({prefix + ".b_i", &b_i_});
    out.push_back({prefix + ".b_c", &b_c_});
    out.push_back({prefix + ".b_o", &b_o_});
  }

  Parameter<S>& w_f() { return w_f_; }
  Parameter<S>& b_f() { return b_f_; }
  Parameter<S>& b_i() { return b_i_; }

 private:
  Tensor<S> gate(const Tensor<S>& z, const Parameter<S>& w,
                 const Parameter<S>& b, bool sigmoid) const {
    const int n = z.extent(0);
    Tensor<S> a({n, hidden_});
    auto am = map_matrix(a.data(), n, hidden_);
    am.noalias() = map_matrix(z.data(), n, hidden_ + input_) *
                   map_matrix(w.value.data(), hidden_, hidden_ + input_).transpose();
    am.rowwise() += map_vector(b.value.data(), hidden_).transpose();
    for (Index j = 0; j < a.size(); ++j) {
      a[j] = sigmoid ? static_cast<S>(1.0 / (1.0 + std::exp(-static_cast<double>(a[j]))))
                     : static_cast<S>(std::tanh(static_cast<double>(a[j])));
    }
    return a;
  }

  void accumulate_gate_grads(const Tensor<S>& z, const Tensor<S>& da,
                             Parameter<S>& w, Parameter<S>& b,
                             Eigen::Map<MatrixRM<S>>& dzm, bool first) {
    const int n = z.extent(0);
    auto dam = map_matrix(da.data(), n, hidden_);
    auto zm = map_matrix(z.data(), n, hidden_ + input_);
    map_matrix(w.grad.data(), hidden_, hidden_ + input_).noalias() +=
        dam.transpose() * zm;
    map_vector(b.grad.data(), hidden_) += dam.colwise().sum().transpose();
    auto wm = map_matrix(w.value.data(), hidden_, hidden_ + input_);
    if (first) {
      dzm.noalias() = dam * wm;
    } else {
      dzm.noalias() += dam * wm;
    }
  }

  int input_, hidden_;
  Parameter<S> w_f_, w_i_, w_c_, w_o_;
  Parameter<S> b_f_, b_i_, b_c_, b_o_;
};

// ---------------------------------------------------------------------------
// Sequence drivers. The encoder consumes the embeddings in temporal order;
// the decoder runs from the encoder's final state (both h and c are handed
// off) with zero-vector inputs, emitting its hidden state at every step.

template <class S>
struct LstmRun {
  std::vector<LstmStepCache<S>> caches;
  LstmState<S> final_state;
  std::vector<Tensor<S>> outputs;  // decoder h_t per step (decode only)
};

// seq is [N, T, input_dim].
template <class S>
LstmRun<S> encode_batch(const LstmCell<S>& cell, const Tensor<S>& seq) {
  if (seq.rank() != 3 || seq.extent(2) != cell.input_dim()) {
    throw std::invalid_argument("encode: expected [N,T," +
                                std::to_string(cell.input_dim()) + "]");
  }
  const int n = seq.extent(0), t_len = seq.extent(1), in = seq.extent(2);
  if (t_len < 1) throw std::invalid_argument("encode: empty sequence");
  LstmRun<S> run;
  run.caches.resize(static_cast<size_t>(t_len));
  LstmState<S> state = cell.zero_state(n);
  for (int t = 0; t < t_len; ++t) {
    Tensor<S> x({n, in});
    for (int ni = 0; ni < n; ++ni) {
      const S* src = seq.data() + (static_cast<Index>(ni) * t_len + t) * in;
      std::copy(src, src + in, x.data() + static_cast<Index>(ni) * in);
    }
    state = cell.step(state, x, &run.caches[static_cast<size_t>(t)]);
  }
  run.final_state = std::move(state);
  return run;
}

template <class S>
LstmRun<S> decode_batch(const LstmCell<S>& cell, const LstmState<S>& init,
                        int steps) {
  if (steps < 1) throw std::invalid_argument("decode: steps < 1");
  const int n = init.h.extent(0);
  LstmRun<S> run;
  run.caches.resize(static_cast<size_t>(steps));
  run.outputs.reserve(static_cast<size_t>(steps));
  LstmState<S> state = init;
  const Tensor<S> zero_x({n, cell.input_dim()});
  for (int t = 0; t < steps; ++t) {
    state = cell.step(state, zero_x, &run.caches[static_cast<size_t>(t)]);
    run.outputs.push_back(state.h);
  }
  run.final_state = std::move(state);
  return run;
}

// Single-sequence convenience wrappers over the batched drivers.
template <class S>
LstmState<S> encode(const LstmCell<S>& cell,
                    const std::vector<Tensor<S>>& embeddings) {
  if (embeddings.empty()) throw std::invalid_argument("encode: no embeddings");
  const int t_len = static_cast<int>(embeddings.size());
  Tensor<S> seq({1, t_len, cell.input_dim()});
  for (int t = 0; t < t_len; ++t) {
    if (embeddings[static_cast<size_t>(t)].size() != cell.input_dim()) {
      throw std::invalid_argument("encode: embedding dim mismatch");
    }
    std::copy(embeddings[static_cast<size_t>(t)].data(),
              embeddings[static_cast<size_t>(t)].data() + cell.input_dim(),
              seq.data() + static_cast<Index>(t) * cell.input_dim());
  }
  return encode_batch(cell, seq).final_state;
}

template <class S>
std::vector<Tensor<S>> decode(const LstmCell<S>& cell, const LstmState<S>& init,
                              int steps) {
  return decode_batch(cell, init, steps).outputs;
}

// ---------------------------------------------------------------------------
// Exact count of h_0 occurrences in the fully unwrapped expressions for h_t
// and c_t. Unwrapping one step substitutes h_{t-1} four times into h_t (the
// four gate applications) and three times into c_t, while c_{t-1} appears
// once in each:
//   A_h(t) = 4*A_h(t-1) + A_c(t-1),  A_h(0) = 1
//   A_c(t) = 3*A_h(t-1) + A_c(t-1),  A_c(0) = 0
struct FeedbackPathCount {
  std::uint64_t a_h;
  std::uint64_t a_c;
};

inline FeedbackPathCount feedback_path_count(int t) {
  if (t < 0) throw std::invalid_argument("feedback_path_count: t < 0");
  FeedbackPathCount count{1, 0};
  for (int step = 0; step < t; ++step) {
    const std::uint64_t h_prev = count.a_h, c_prev = count.a_c;
    count.a_h = 4 * h_prev + c_prev;
    count.a_c = 3 * h_prev + c_prev;
  }
  return count;
}

}  // namespace drivenet
