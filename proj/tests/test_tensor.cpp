#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "drivenet/rng.hpp"
#include "drivenet/tensor.hpp"

using namespace drivenet;

TEST_CASE("make_tensor row-major layout") {
  auto t = make_tensor<float>({2, 2}, {1, 2, 3, 4});
  CHECK(t.at({1, 0}) == 3.0f);
  CHECK(t.at({0, 1}) == 2.0f);
}

TEST_CASE("make_tensor degenerate and error cases") {
  auto empty = make_tensor<float>({0}, {});
  CHECK(empty.size() == 0);
  CHECK_THROWS_AS(make_tensor<float>({3}, {1, 2}), std::invalid_argument);
  CHECK_THROWS_AS(make_tensor<float>({2}, {1.0f, NAN}), std::runtime_error);
  CHECK_THROWS_AS(make_tensor<float>({-1}, {}), std::invalid_argument);
}

TEST_CASE("reshape round trip is identity") {
  Rng rng(7);
  TensorF t({3, 4, 5});
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.uniform());
  TensorF back = t.reshaped({60}).reshaped({3, 4, 5});
  for (Index i = 0; i < t.size(); ++i) CHECK(back[i] == t[i]);
  CHECK_THROWS_AS(t.reshaped({7}), std::invalid_argument);
}

TEST_CASE("concat_channels stacks blocks in order") {
  auto a = make_tensor<float>({1, 2, 2}, {1, 2, 3, 4});
  auto b = make_tensor<float>({1, 2, 2}, {5, 6, 7, 8});
  auto c = concat_channels<float>({a, b});
  CHECK(c.shape() == std::vector<int>{2, 2, 2});
  CHECK(c.at({0, 1, 1}) == 4.0f);
  CHECK(c.at({1, 0, 0}) == 5.0f);

  // six stereo-gray frames stack to the full network input depth
  std::vector<TensorF> frames(6, TensorF({2, 94, 168}));
  auto stacked = concat_channels(frames);
  CHECK(stacked.shape() == std::vector<int>{12, 94, 168});

  auto bad = make_tensor<float>({1, 3, 2}, {0, 0, 0, 0, 0, 0});
  CHECK_THROWS_AS(concat_channels<float>({a, bad}), std::invalid_argument);
}

TEST_CASE("concat of split is identity") {
  Rng rng(3);
  TensorF t({7, 3, 4});
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.uniform());
  auto parts = split_channels(t, {2, 4, 1});
  auto joined = concat_channels(parts);
  REQUIRE(joined.same_shape(t));
  for (Index i = 0; i < t.size(); ++i) CHECK(joined[i] == t[i]);
}

TEST_CASE("flip_width reverses and is an involution") {
  auto t = make_tensor<float>({1, 1, 3}, {1, 2, 3});
  auto f = flip_width(t);
  CHECK(f.at({0, 0, 0}) == 3.0f);
  CHECK(f.at({0, 0, 1}) == 2.0f);
  CHECK(f.at({0, 0, 2}) == 1.0f);

  Rng rng(11);
  TensorF x({3, 5, 8});
  for (Index i = 0; i < x.size(); ++i) x[i] = static_cast<float>(rng.uniform());
  auto twice = flip_width(flip_width(x));
  for (Index i = 0; i < x.size(); ++i) CHECK(twice[i] == x[i]);

  auto sym = make_tensor<float>({1, 1, 3}, {5, 9, 5});
  auto symf = flip_width(sym);
  for (Index i = 0; i < sym.size(); ++i) CHECK(symf[i] == sym[i]);

  CHECK_THROWS_AS(flip_width(make_tensor<float>({2, 2}, {1, 2, 3, 4})),
                  std::invalid_argument);
}

TEST_CASE("finite_diff_grad recovers analytic gradients") {
  // f = sum -> all-ones gradient
  auto sum_f = [](const TensorD& t) {
    double s = 0;
    for (Index i = 0; i < t.size(); ++i) s += t[i];
    return s;
  };
  TensorD x({4});
  x.fill(0.3);
  auto g = finite_diff_grad(sum_f, x, 1e-5);
  for (Index i = 0; i < g.size(); ++i) CHECK(g[i] == doctest::Approx(1.0).epsilon(1e-9));

  // f = x*x at 3 -> 6
  auto sq = [](const TensorD& t) { return t[0] * t[0]; };
  TensorD x3({1});
  x3[0] = 3.0;
  auto g3 = finite_diff_grad(sq, x3, 1e-5);
  CHECK(std::abs(g3[0] - 6.0) < 1e-6);

  // quadratic form recovers its analytic gradient to 1e-6 relative error
  Rng rng(5);
  TensorD q({6});
  TensorD coef({6});
  for (Index i = 0; i < 6; ++i) {
    q[i] = rng.uniform(-1, 1);
    coef[i] = rng.uniform(0.5, 2);
  }
  auto quad = [&](const TensorD& t) {
    double s = 0;
    for (Index i = 0; i < t.size(); ++i) s += coef[i] * t[i] * t[i];
    return s;
  };
  auto gq = finite_diff_grad(quad, q, 1e-5);
  TensorD expected({6});
  for (Index i = 0; i < 6; ++i) expected[i] = 2 * coef[i] * q[i];
  CHECK(max_rel_error(gq, expected) < 1e-6);

  auto bad = [](const TensorD&) { return std::numeric_limits<double>::quiet_NaN(); };
  CHECK_THROWS_AS(finite_diff_grad(bad, x, 1e-5), std::runtime_error);
}

TEST_CASE("rng streams are deterministic and independent of draw order") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng c(42);
  c.uniform();
  c.uniform();
  // forks depend only on the seed and stream id
  CHECK(c.fork(3).next_u64() == Rng(42).fork(3).next_u64());
  Rng d(42);
  for (int i = 0; i < 1000; ++i) {
    const double u = d.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    const auto k = d.uniform_int(17);
    CHECK(k >= 0);
    CHECK(k < 17);
  }
}
