#include <cmath>
#include <random>
#include <string>

#include "congeal/adam.hpp"
#include "congeal/grad_check.hpp"
#include "congeal/ops.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace congeal;
using congeal::testing::random_tensor;

namespace {

// Direct nested-loop convolution with explicitly computed zero padding.
Tensor<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b, int stride,
                           bool same) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int o = w.dim(0), k = w.dim(2);
  int oh, ow, pt = 0, pl = 0;
  if (same) {
    oh = (h + stride - 1) / stride;
    ow = (wd + stride - 1) / stride;
    pt = std::max((oh - 1) * stride + k - h, 0) / 2;
    pl = std::max((ow - 1) * stride + k - wd, 0) / 2;
  } else {
    oh = (h - k) / stride + 1;
    ow = (wd - k) / stride + 1;
  }
  Tensor<double> out({n, o, oh, ow});
  for (int i = 0; i < n; ++i)
    for (int oc = 0; oc < o; ++oc)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx) {
          double acc = b[oc];
          for (int ic = 0; ic < c; ++ic)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int iy = y * stride + ky - pt, ix = xx * stride + kx - pl;
                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                acc += x.at(i, ic, iy, ix) * w.at(oc, ic, ky, kx);
              }
          out.at(i, oc, y, xx) = acc;
        }
  return out;
}

// Reduces an operator output to a scalar through a fixed random projection.
Var<double> project(Var<double> out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return ad::sum(ad::mul(out, out.tape->constant(random_tensor(out.shape(), rng))));
}

double check_op(const ScalarFn& f, std::vector<Tensor<double>*> leaves) {
  GradCheckOptions opt;
  opt.max_coords = 40;
  return grad_check(f, leaves, opt).worst();
}

}  // namespace

TEST_CASE("conv2d: all-ones 3x3 input and kernel, no padding, gives 9") {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>({1, 1, 3, 3}, 1.0));
  auto w = tape.constant(Tensor<double>({1, 1, 3, 3}, 1.0));
  auto b = tape.constant(Tensor<double>({1}, 0.0));
  auto y = ad::conv2d(x, w, b, 1, ad::Padding::Valid);
  CHECK(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y.value()[0] == 9.0);
}

TEST_CASE("conv2d: centred delta kernel with same padding is the identity") {
  std::mt19937_64 rng(1);
  for (int k : {1, 3, 5, 7}) {
    Tape<double> tape;
    Tensor<double> xin = random_tensor({2, 1, 6, 7}, rng);
    Tensor<double> kernel({1, 1, k, k}, 0.0);
    kernel.at(0, 0, k / 2, k / 2) = 1.0;
    auto y = ad::conv2d(tape.constant(xin), tape.constant(kernel), tape.constant(Tensor<double>({1}, 0.0)), 1,
                        ad::Padding::Same);
    CHECK(y.value().values() == xin.values());
  }
}

TEST_CASE("conv2d: stride-2 case matches the nested-loop oracle") {
  std::mt19937_64 rng(7);
  Tensor<double> x = random_tensor({1, 2, 5, 5}, rng);
  Tensor<double> w = random_tensor({3, 2, 3, 3}, rng);
  Tensor<double> b = random_tensor({3}, rng);
  for (bool same : {false, true}) {
    Tape<double> tape;
    auto y = ad::conv2d(tape.constant(x), tape.constant(w), tape.constant(b), 2,
                        same ? ad::Padding::Same : ad::Padding::Valid);
    const Tensor<double> expect = conv_oracle(x, w, b, 2, same);
    REQUIRE(y.shape() == expect.shape());
    for (std::size_t i = 0; i < expect.size(); ++i) CHECK(y.value()[i] == doctest::Approx(expect[i]).epsilon(1e-12));
  }
}

TEST_CASE("conv2d: agrees with the oracle over shapes up to 2x4x8x8, kernels up to 5x5") {
  std::mt19937_64 rng(11);
  int cases = 0;
  for (int n : {1, 2})
    for (int c : {1, 3, 4})
      for (int h : {5, 7, 8})
        for (int k : {1, 3, 5})
          for (int stride : {1, 2})
            for (bool same : {false, true}) {
              const int o = 1 + (cases % 3);
              Tensor<double> x = random_tensor({n, c, h, 8}, rng);
              Tensor<double> w = random_tensor({o, c, k, k}, rng);
              Tensor<double> b = random_tensor({o}, rng);
              Tape<double> tape;
              auto y = ad::conv2d(tape.constant(x), tape.constant(w), tape.constant(b), stride,
                                  same ? ad::Padding::Same : ad::Padding::Valid);
              const Tensor<double> expect = conv_oracle(x, w, b, stride, same);
              REQUIRE(y.shape() == expect.shape());
              double worst = 0.0;
              for (std::size_t i = 0; i < expect.size(); ++i) worst = std::max(worst, std::abs(y.value()[i] - expect[i]));
              CHECK(worst < 1e-12);
              ++cases;
            }
  CHECK(cases == 216);
}

TEST_CASE("backward: sum gives all-ones") {
  Tensor<double> x({2, 3}, std::vector<double>{1, -2, 3, 4, 5, -6});
  x.set_requires_grad(true);
  Tape<double> tape;
  tape.backward(ad::sum(tape.leaf(x)));
  CHECK(x.grad() == std::vector<double>(6, 1.0));
}

TEST_CASE("backward: l1 of a difference gives the sign") {
  Tensor<double> x({4}, std::vector<double>{0.5, -1.0, 2.0, 0.1});
  Tensor<double> y({4}, std::vector<double>{0.0, 1.0, -1.0, 0.2});
  x.set_requires_grad(true);
  Tape<double> tape;
  tape.backward(ad::l1_sum(ad::sub(tape.leaf(x), tape.constant(y))));
  CHECK(x.grad() == std::vector<double>{1, -1, 1, -1});
}

TEST_CASE("backward: l1 subgradient at zero is zero") {
  Tensor<double> x({3}, std::vector<double>{0.0, 2.0, -3.0});
  x.set_requires_grad(true);
  Tape<double> tape;
  tape.backward(ad::l1_sum(tape.leaf(x)));
  CHECK(x.grad() == std::vector<double>{0, 1, -1});
}

TEST_CASE("backward: l1(tanh(conv)) matches central differences") {
  std::mt19937_64 rng(3);
  Tensor<double> x = random_tensor({1, 1, 6, 6}, rng);
  Tensor<double> k = random_tensor({1, 1, 3, 3}, rng);
  Tensor<double> b({1}, 0.05);
  ScalarFn f = [&](Tape<double>& t, std::span<const Var<double>> v) {
    return ad::l1_sum(ad::tanh(ad::conv2d(v[0], v[1], t.constant(b), 1, ad::Padding::Same)));
  };
  std::vector<Tensor<double>*> leaves{&x, &k};
  GradCheckOptions opt;
  opt.max_coords = 0;
  const auto r = grad_check(f, leaves, opt);
  CHECK(r.max_rel_error[0] < 1e-4);
  CHECK(r.max_rel_error[1] < 1e-4);
}

TEST_CASE("every operator passes the finite-difference check") {
  std::mt19937_64 rng(5);
  SUBCASE("add / sub with broadcast") {
    Tensor<double> a = random_tensor({3, 2, 2, 2}, rng), b = random_tensor({1, 2, 2, 2}, rng);
    CHECK(check_op([](Tape<double>&, std::span<const Var<double>> v) { return project(ad::add(v[0], v[1]), 1); },
                   {&a, &b}) < 1e-4);
    CHECK(check_op([](Tape<double>&, std::span<const Var<double>> v) { return project(ad::sub(v[0], v[1]), 2); },
                   {&a, &b}) < 1e-4);
  }
  SUBCASE("mul / scale") {
    Tensor<double> a = random_tensor({2, 5}, rng), b = random_tensor({2, 5}, rng);
    CHECK(check_op([](Tape<double>&, std::span<const Var<double>> v) { return project(ad::mul(v[0], v[1]), 3); },
                   {&a, &b}) < 1e-4);
    CHECK(check_op([](Tape<double>&, std::span<const Var<double>> v) { return project(ad::scale(v[0], 2.5), 4); },
                   {&a}) < 1e-4);
  }
  SUBCASE("activations") {
    Tensor<double> a = random_tensor({2, 7}, rng, -3, 3);
    CHECK(check_op([](Tape<double>&, std::span<const Var<double>> v) { return project(ad::tanh(v[0]), 5); }, {&a}) <
          1e-4);
    CHECK(check_op([](Tape<double>&, std::span<const Var<double>> v) { return project(ad::sigmoid(v[0]), 6); },
                   {&a}) < 1e-4);
  }
  SUBCASE("clamp away from the bounds") {
    Tensor<double> a({6}, std::vector<double>{-2.0, -0.3, 0.2, 0.9, 1.7, -1.4});
    CHECK(check_op([](Tape<double>&, std::span<const Var<double>> v) { return project(ad::clamp(v[0], -1.0, 1.0), 7); },
                   {&a}) < 1e-4);
  }
  SUBCASE("reductions") {
    Tensor<double> a = random_tensor({3, 4}, rng);
    CHECK(check_op([](Tape<double>&, std::span<const Var<double>> v) { return ad::l1_sum(v[0]); }, {&a}) < 1e-4);
    const std::vector<double> w{0.1, 0.2, 0.3, 0.4};
    CHECK(check_op([&](Tape<double>&, std::span<const Var<double>> v) { return ad::weighted_dot<double>(v[0], w); },
                   {&a}) < 1e-4);
  }
  SUBCASE("conv2d, both strides and paddings") {
    Tensor<double> x = random_tensor({2, 2, 7, 6}, rng), w = random_tensor({3, 2, 3, 3}, rng),
                   b = random_tensor({3}, rng);
    for (int stride : {1, 2})
      for (auto pad : {ad::Padding::Same, ad::Padding::Valid}) {
        CHECK(check_op([&](Tape<double>&, std::span<const Var<double>> v) {
                return project(ad::conv2d(v[0], v[1], v[2], stride, pad), 8);
              },
                       {&x, &w, &b}) < 1e-4);
      }
    Tensor<double> w1 = random_tensor({4, 2, 1, 1}, rng), b1 = random_tensor({4}, rng);
    CHECK(check_op([&](Tape<double>&, std::span<const Var<double>> v) {
            return project(ad::conv2d(v[0], v[1], v[2], 1, ad::Padding::Same), 9);
          },
                   {&x, &w1, &b1}) < 1e-4);
  }
  SUBCASE("upsample, reshape, linear, concat") {
    Tensor<double> x = random_tensor({2, 2, 3, 3}, rng);
    CHECK(check_op([](Tape<double>&, std::span<const Var<double>> v) { return project(ad::upsample2x(v[0]), 10); },
                   {&x}) < 1e-4);
    CHECK(check_op([](Tape<double>&, std::span<const Var<double>> v) { return project(ad::reshape(v[0], {2, 18}), 11); },
                   {&x}) < 1e-4);
    Tensor<double> w = random_tensor({5, 18}, rng), b = random_tensor({5}, rng);
    CHECK(check_op([](Tape<double>&, std::span<const Var<double>> v) { return project(ad::linear(v[0], v[1], v[2]), 12); },
                   {&x, &w, &b}) < 1e-4);
    Tensor<double> r = random_tensor({1, 1, 3, 3}, rng);
    CHECK(check_op([](Tape<double>&, std::span<const Var<double>> v) {
            return project(ad::concat_channels(v[0], v[1]), 13);
          },
                   {&x, &r}) < 1e-4);
  }
}

TEST_CASE("backward accumulates gradients over two uses of one tensor") {
  std::mt19937_64 rng(9);
  Tensor<double> x = random_tensor({5}, rng);
  x.set_requires_grad(true);
  Tape<double> tape;
  auto v = tape.leaf(x);
  tape.backward(ad::add(ad::sum(ad::mul(v, v)), ad::sum(ad::tanh(v))));
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double th = std::tanh(x[i]);
    CHECK(x.grad()[i] == doctest::Approx(2 * x[i] + 1 - th * th).epsilon(1e-14));
  }
  // Same graph, but through the finite-difference oracle.
  ScalarFn f = [](Tape<double>&, std::span<const Var<double>> l) {
    return ad::add(ad::sum(ad::mul(l[0], l[0])), ad::sum(ad::tanh(l[0])));
  };
  std::vector<Tensor<double>*> leaves{&x};
  CHECK(grad_check(f, leaves).worst() < 1e-8);
}

TEST_CASE("leaves unreachable from the loss get a zero gradient") {
  Tensor<double> a({2}, 1.0), b({2}, 3.0);
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  Tape<double> tape;
  auto va = tape.leaf(a);
  tape.leaf(b);
  tape.backward(ad::sum(va));
  CHECK(b.grad() == std::vector<double>{0, 0});
}

TEST_CASE("backward errors") {
  Tensor<double> x({3}, 1.0);
  x.set_requires_grad(true);
  SUBCASE("non-scalar loss") {
    Tape<double> tape;
    CHECK_THROWS_AS(tape.backward(ad::tanh(tape.leaf(x))), TapeError);
  }
  SUBCASE("second backward on the same tape") {
    Tape<double> tape;
    auto loss = ad::sum(tape.leaf(x));
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), TapeError);
  }
}

TEST_CASE("forward errors name both shapes") {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>({2, 3}));
  auto b = tape.constant(Tensor<double>({3, 2}));
  try {
    ad::add(a, b);
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[3x2]") != std::string::npos);
  }
}

TEST_CASE("non-finite inputs are rejected") {
  Tape<double> tape;
  Tensor<double> bad({2}, std::vector<double>{1.0, std::nan("")});
  CHECK_THROWS_AS(tape.constant(bad), NonFiniteError);
  CHECK_THROWS_AS(tape.leaf(bad), NonFiniteError);
}

TEST_CASE("replay is deterministic bitwise") {
  std::mt19937_64 rng(21);
  Tensor<double> x = random_tensor({2, 3, 8, 8}, rng), w = random_tensor({4, 3, 3, 3}, rng), b = random_tensor({4}, rng);
  auto run = [&] {
    Tape<double> tape;
    return ad::l1_sum(ad::tanh(ad::conv2d(tape.leaf(x), tape.leaf(w), tape.leaf(b), 2, ad::Padding::Same))).value()[0];
  };
  const double first = run();
  CHECK(run() == first);
}

TEST_CASE("adam: zero gradient leaves parameters unchanged and counts the step") {
  Tensor<double> p({3}, std::vector<double>{1, 2, 3});
  p.zero_grad();
  AdamState<double> st;
  st.hyper.lr = 0.1;
  std::vector<Tensor<double>*> params{&p};
  adam_step<double>(params, st);
  CHECK(p.values() == std::vector<double>{1, 2, 3});
  CHECK(st.step == 1);
}

TEST_CASE("adam: first step moves by lr in the direction opposite the gradient") {
  Tensor<double> p({1}, std::vector<double>{0.5});
  p.grad() = {2.0};
  AdamState<double> st;
  st.hyper.lr = 0.01;
  st.hyper.eps = 1e-8;
  std::vector<Tensor<double>*> params{&p};
  adam_step<double>(params, st);
  CHECK(std::abs((p[0] - 0.5) - (-0.01)) < 1e-6);
}

TEST_CASE("adam: three constant-gradient steps follow the recurrence") {
  const double g = -0.7, lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  double m = 0, v = 0, ref = 1.25;
  for (int t = 1; t <= 3; ++t) {
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t)), vh = v / (1 - std::pow(b2, t));
    ref -= lr * mh / (std::sqrt(vh) + eps);
  }
  Tensor<double> p({1}, std::vector<double>{1.25});
  AdamState<double> st;
  st.hyper = {lr, b1, b2, eps};
  std::vector<Tensor<double>*> params{&p};
  for (int t = 0; t < 3; ++t) {
    p.grad() = {g};
    adam_step<double>(params, st);
  }
  CHECK(std::abs(p[0] - ref) < 1e-12);
  CHECK(st.step == 3);
  CHECK(st.v[0][0] >= 0.0);
}

TEST_CASE("adam: non-finite gradient fails before any mutation") {
  Tensor<double> a({1}, std::vector<double>{1.0}), b({1}, std::vector<double>{2.0});
  a.grad() = {0.5};
  b.grad() = {std::numeric_limits<double>::infinity()};
  AdamState<double> st;
  std::vector<Tensor<double>*> params{&a, &b};
  CHECK_THROWS_AS(adam_step<double>(params, st), NonFiniteError);
  CHECK(a[0] == 1.0);
  CHECK(st.step == 0);
}

TEST_CASE("grad_check: half sum of squares is exact to 1e-8") {
  std::mt19937_64 rng(2);
  Tensor<double> x = random_tensor({10}, rng);
  ScalarFn f = [](Tape<double>&, std::span<const Var<double>> v) { return ad::scale(ad::sum(ad::mul(v[0], v[0])), 0.5); };
  std::vector<Tensor<double>*> leaves{&x};
  const auto r = grad_check(f, leaves, {.step = 1e-5, .tolerance = 1e-8});
  CHECK(r.worst() < 1e-8);
  CHECK(r.passed());
}
