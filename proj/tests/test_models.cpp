#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "drivenet/gradcheck.hpp"
#include "drivenet/model.hpp"
#include "drivenet/training.hpp"

using namespace drivenet;

namespace {

// Desk-sized geometry for gradient checks; the pooling chain still has room.
ModelConfig small_config(ModelKind kind) {
  ModelConfig cfg;
  if (kind == ModelKind::baseline) {
    cfg.input_height = 62;
    cfg.input_width = 70;
  } else {
    cfg.input_height = 30;
    cfg.input_width = 44;
  }
  return cfg;
}

TensorF random_input(ModelKind kind, const ModelConfig& cfg, int n, Rng& rng) {
  TensorF x = kind == ModelKind::frfcn
                  ? TensorF({n, cfg.frames_in, cfg.channels_per_frame,
                             cfg.input_height, cfg.input_width})
                  : TensorF({n, cfg.stacked_channels(), cfg.input_height,
                             cfg.input_width});
  for (Index i = 0; i < x.size(); ++i) x[i] = static_cast<float>(rng.uniform());
  return x;
}

constexpr ModelKind kAllKinds[] = {ModelKind::fcn, ModelKind::squeezefcn,
                                   ModelKind::frfcn, ModelKind::baseline};

}  // namespace

TEST_CASE("parameter counts sit inside the published bands") {
  ModelConfig cfg;
  auto fcn = build_model<float>(ModelKind::fcn, cfg, 1);
  CHECK(fcn.count_params() >= 82000);
  CHECK(fcn.count_params() <= 100000);

  auto sq = build_model<float>(ModelKind::squeezefcn, cfg, 1);
  CHECK(sq.count_params() >= 85000);
  CHECK(sq.count_params() <= 115000);

  auto fr = build_model<float>(ModelKind::frfcn, cfg, 1);
  CHECK(fr.count_params() >= 102000);
  CHECK(fr.count_params() <= 138000);

  auto base = build_model<float>(ModelKind::baseline, cfg, 1);
  CHECK(base.count_params() >= 315000);
  CHECK(base.count_params() <= 425000);
}

TEST_CASE("a single 3->2 linear layer holds eight scalars") {
  Rng rng(1);
  Linear<float> lin(3, 2, rng);
  std::vector<NamedParam<float>> params;
  lin.collect_params("lin", params);
  Index total = 0;
  for (auto& p : params) total += p.param->value.size();
  CHECK(total == 8);
}

TEST_CASE("forward emits [N,12,2] for every kind and is deterministic in eval") {
  Rng rng(2);
  for (ModelKind kind : kAllKinds) {
    ModelConfig cfg;  // full-size geometry
    auto model = build_model<float>(kind, cfg, 3);
    TensorF x = random_input(kind, cfg, 2, rng);
    TensorF a = model.forward(x, Mode::eval);
    CHECK(a.shape() == std::vector<int>{2, 12, 2});
    TensorF b = model.forward(x, Mode::eval);
    for (Index i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
  }
}

TEST_CASE("model rejects wrong input shapes") {
  ModelConfig cfg;
  auto model = build_model<float>(ModelKind::fcn, cfg, 3);
  CHECK_THROWS_AS(model.forward(TensorF({1, 11, 94, 168}), Mode::eval),
                  std::invalid_argument);
  auto fr = build_model<float>(ModelKind::frfcn, cfg, 3);
  CHECK_THROWS_AS(fr.forward(TensorF({1, 12, 94, 168}), Mode::eval),
                  std::invalid_argument);
}

TEST_CASE("fcn eval forward on zero input is exactly zero") {
  ModelConfig cfg = small_config(ModelKind::fcn);
  auto model = build_model<float>(ModelKind::fcn, cfg, 5);
  TensorF x({2, cfg.stacked_channels(), cfg.input_height, cfg.input_width});
  TensorF y = model.forward(x, Mode::eval);
  for (Index i = 0; i < y.size(); ++i) CHECK(y[i] == 0.0f);
}

TEST_CASE("end-to-end backward matches finite differences on a parameter slice") {
  for (ModelKind kind : kAllKinds) {
    CAPTURE(to_string(kind));
    ModelConfig cfg = small_config(kind);
    auto model = build_model<double>(kind, cfg, 7);
    Rng rng(11);
    TensorD x = kind == ModelKind::frfcn
                    ? gradcheck_detail::random_tensor(
                          {2, cfg.frames_in, cfg.channels_per_frame,
                           cfg.input_height, cfg.input_width},
                          rng, 0, 1)
                    : gradcheck_detail::random_tensor(
                          {2, cfg.stacked_channels(), cfg.input_height,
                           cfg.input_width},
                          rng, 0, 1);
    TensorD target = gradcheck_detail::random_tensor({2, 12, 2}, rng, 0, 1);

    auto loss = [&] {
      model.reseed_dropout(99);
      TensorD pred = model.forward(x, Mode::train);
      return mse_loss(pred, target).first;
    };

    model.zero_grads();
    model.reseed_dropout(99);
    TensorD pred = model.forward(x, Mode::train);
    auto [l0, grad] = mse_loss(pred, target);
    (void)l0;
    model.backward(grad);

    std::vector<NamedParam<double>> params;
    model.collect_params(params);
    // a spread of eight scalars across all parameter tensors
    Rng pick(13);
    for (int probe = 0; probe < 8; ++probe) {
      auto& np = params[static_cast<size_t>(pick.uniform_int(
          static_cast<std::int64_t>(params.size())))];
      const Index i = np.param->value.size() == 1
                          ? 0
                          : pick.uniform_int(np.param->value.size());
      const double v = np.param->value[i];
      const double eps = 1e-5;
      np.param->value[i] = v + eps;
      const double fp = loss();
      np.param->value[i] = v - eps;
      const double fm = loss();
      np.param->value[i] = v;
      const double fd = (fp - fm) / (2 * eps);
      const double an = np.param->grad[i];
      const double scale = std::max({std::abs(fd), std::abs(an), 1e-8});
      INFO(np.name, "[", i, "] fd=", fd, " analytic=", an);
      CHECK(std::abs(fd - an) / scale < 1e-3);
    }
  }
}

TEST_CASE("frfcn output reacts to every input frame") {
  ModelConfig cfg = small_config(ModelKind::frfcn);
  auto model = build_model<float>(ModelKind::frfcn, cfg, 21);
  Rng rng(22);
  TensorF x({1, cfg.frames_in, cfg.channels_per_frame, cfg.input_height,
             cfg.input_width});
  for (Index i = 0; i < x.size(); ++i) x[i] = static_cast<float>(rng.uniform());
  TensorF base = model.forward(x, Mode::eval);
  const Index frame_size = static_cast<Index>(cfg.channels_per_frame) *
                           cfg.input_height * cfg.input_width;
  for (int f = 0; f < cfg.frames_in; ++f) {
    TensorF perturbed = x;
    for (Index i = 0; i < frame_size; ++i) {
      perturbed[static_cast<Index>(f) * frame_size + i] += 0.35f;
    }
    TensorF y = model.forward(perturbed, Mode::eval);
    double diff = 0;
    for (Index i = 0; i < y.size(); ++i) diff += std::abs(y[i] - base[i]);
    INFO("frame ", f);
    CHECK(diff > 1e-6);
  }
}

TEST_CASE("receptive fields of the stacked 3x3 stages") {
  Rng rng(31);
  // depth -> field: 3 convs 7x7, 2 convs 5x5, 4 convs 9x9
  const struct {
    int convs;
    int field;
  } cases[] = {{3, 7}, {2, 5}, {2, 5}, {4, 9}};
  for (const auto& c : cases) {
    auto stage = build_probe_stage(c.convs, 3, 4, ActKind::relu, rng);
    auto box = receptive_field_probe(stage, 3, 19, 19, 9, 9);
    CHECK(box.height() == c.field);
    CHECK(box.width() == c.field);
  }
  // SqueezeFCN entry/exit triplets use ELU
  auto entry = build_probe_stage(3, 2, 4, ActKind::elu, rng);
  auto box = receptive_field_probe(entry, 2, 19, 19, 9, 9);
  CHECK(box.height() == 7);
  CHECK(box.width() == 7);

  CHECK_THROWS_AS(receptive_field_probe(entry, 2, 19, 19, 30, 9),
                  std::invalid_argument);
}

TEST_CASE("fcn stage ladder matches the 7/5/5/9 receptive-field plan") {
  ModelConfig cfg;
  REQUIRE(cfg.fcn_stages.size() == 4);
  const int expected_fields[4] = {7, 5, 5, 9};
  int conv_total = 0;
  Rng rng(33);
  for (size_t s = 0; s < 4; ++s) {
    const int depth = static_cast<int>(cfg.fcn_stages[s].size());
    conv_total += depth;
    auto stage = build_probe_stage(depth, 3, 4, ActKind::relu, rng);
    auto box = receptive_field_probe(stage, 3, 21, 21, 10, 10);
    CHECK(box.height() == expected_fields[s]);
    CHECK(box.width() == expected_fields[s]);
  }
  CHECK(conv_total == 11);  // the eleven-layer plan
}

TEST_CASE("unknown kind string is rejected") {
  CHECK_THROWS_AS(model_kind_from_string("resnet"), std::invalid_argument);
  CHECK(model_kind_from_string("frfcn") == ModelKind::frfcn);
}
