#include "doctest.h"

#include <cmath>
#include <random>

#include "cardiovae/numerics.hpp"
#include "test_util.hpp"

using namespace cardiovae;
using testutil::random_tensor;

namespace {

LayerSpec make(LayerKind kind, std::size_t cin, std::size_t cout, std::size_t k, std::size_t s, std::size_t p,
               Activation act = Activation::none, std::size_t op = 0) {
  LayerSpec l;
  l.kind = kind;
  l.in_channels = cin;
  l.out_channels = cout;
  l.kernel = k;
  l.stride = s;
  l.padding = p;
  l.output_padding = op;
  l.activation = act;
  return l;
}

// Direct-summation convolution over (H,W,C) (1-D layers use H=1), written
// independently of the im2col path.
TensorD direct_conv2d(const TensorD& x, const TensorD& w, const TensorD& b, std::size_t k, std::size_t s, std::size_t p) {
  const std::size_t H = x.dim(0), W = x.dim(1), C = x.dim(2), Co = b.dim(0);
  const std::size_t OH = (H + 2 * p - k) / s + 1, OW = (W + 2 * p - k) / s + 1;
  TensorD y({OH, OW, Co});
  for (std::size_t oy = 0; oy < OH; ++oy)
    for (std::size_t ox = 0; ox < OW; ++ox)
      for (std::size_t co = 0; co < Co; ++co) {
        double acc = b[co];
        for (std::size_t ky = 0; ky < k; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx)
            for (std::size_t ci = 0; ci < C; ++ci) {
              const long iy = long(oy * s + ky) - long(p), ix = long(ox * s + kx) - long(p);
              if (iy < 0 || ix < 0 || iy >= long(H) || ix >= long(W)) continue;
              acc += x[(iy * W + ix) * C + ci] * w[((ky * k + kx) * C + ci) * Co + co];
            }
        y[(oy * OW + ox) * Co + co] = acc;
      }
  return y;
}

// Transposed convolution by its scatter definition: each input element
// spreads kernel-weighted copies onto the output grid.
TensorD direct_tconv1d(const TensorD& x, const TensorD& w, const TensorD& b, std::size_t k, std::size_t s,
                       std::size_t p, std::size_t op) {
  const std::size_t L = x.dim(0), Ci = x.dim(1), Co = b.dim(0);
  const std::size_t OL = (L - 1) * s - 2 * p + k + op;
  TensorD y({OL, Co});
  for (std::size_t i = 0; i < OL; ++i)
    for (std::size_t co = 0; co < Co; ++co) y[i * Co + co] = b[co];
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t kk = 0; kk < k; ++kk) {
      const long o = long(i * s + kk) - long(p);
      if (o < 0 || o >= long(OL)) continue;
      for (std::size_t co = 0; co < Co; ++co)
        for (std::size_t ci = 0; ci < Ci; ++ci) y[o * Co + co] += x[i * Ci + ci] * w[(kk * Co + co) * Ci + ci];
    }
  return y;
}

double max_abs_diff(const TensorD& a, const TensorD& b) {
  REQUIRE(a.dims() == b.dims());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("conv_out_len shape arithmetic") {
  CHECK(conv_out_len(224, 3, 2, 1) == 112);
  CHECK(conv_out_len(conv_out_len(conv_out_len(224, 3, 2, 1), 3, 2, 1), 3, 2, 1) == 28);
  for (std::size_t n : {1u, 7u, 64u, 4096u}) CHECK(conv_out_len(n, 1, 1, 0) == n);
  CHECK(conv_out_len(60000, 3, 2, 1) == 30000);
  CHECK_THROWS_AS(conv_out_len(2, 5, 1, 0), ShapeError);
  CHECK(tconv_out_len(7500, 3, 2, 1, 1) == 15000);
}

TEST_CASE("every stride-2 encoder layer has a restoring transposed layer") {
  for (std::size_t n = 1; n <= 600; ++n) {
    const std::size_t m = conv_out_len(n, 3, 2, 1);
    const std::size_t base = tconv_out_len(m, 3, 2, 1, 0);
    REQUIRE(n >= base);
    const std::size_t op = n - base;
    REQUIRE(op < 2);
    CHECK(tconv_out_len(m, 3, 2, 1, op) == n);
  }
}

TEST_CASE("forward shape contracts") {
  std::mt19937_64 rng(1);
  SUBCASE("conv2d 1->16 on 224x224") {
    const auto spec = make(LayerKind::conv2d, 1, 16, 3, 2, 1, Activation::relu);
    TensorD x({224, 224, 1});
    auto y = forward(spec, random_tensor(weight_dims(spec), rng), TensorD(bias_dims(spec)), x);
    CHECK(y.dims() == Dims{112, 112, 16});
  }
  SUBCASE("fc identity") {
    const auto spec = make(LayerKind::fc, 5, 5, 1, 1, 0);
    TensorD w({5, 5});
    for (int i = 0; i < 5; ++i) w[i * 5 + i] = 1.0;
    auto x = random_tensor({5}, rng);
    auto y = forward(spec, w, TensorD({5}), x);
    CHECK(testutil::bitwise_equal(y, x));
  }
  SUBCASE("tconv1d inverts conv1d lengths") {
    const auto spec = make(LayerKind::tconv1d, 1, 1, 3, 2, 1, Activation::none, 1);
    auto y = forward(spec, random_tensor(weight_dims(spec), rng), TensorD({1}), TensorD({7500}));
    CHECK(y.dims() == Dims{15000, 1});
  }
  SUBCASE("mismatched channels names the axis") {
    const auto spec = make(LayerKind::conv2d, 3, 4, 3, 1, 1);
    try {
      forward(spec, TensorD(weight_dims(spec)), TensorD({4}), TensorD({5, 5, 2}));
      FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
      CHECK(e.axis() == "channels");
    }
  }
  SUBCASE("wrong weight dims") {
    const auto spec = make(LayerKind::conv1d, 2, 4, 3, 1, 1);
    CHECK_THROWS_AS(forward(spec, TensorD({3, 4, 2}), TensorD({4}), TensorD({6, 2})), ShapeError);
  }
}

TEST_CASE("im2col convolution matches direct summation") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    std::uniform_int_distribution<std::size_t> dim(1, 8), ch(1, 4), kk(1, 3), st(1, 3), pd(0, 2);
    const std::size_t H = dim(rng) + 2, W = dim(rng) + 2, C = ch(rng), Co = ch(rng), k = kk(rng), s = st(rng), p = pd(rng);
    const auto spec = make(LayerKind::conv2d, C, Co, k, s, p);
    auto x = random_tensor({H, W, C}, rng);
    auto w = random_tensor(weight_dims(spec), rng);
    auto b = random_tensor(bias_dims(spec), rng);
    CHECK(max_abs_diff(forward(spec, w, b, x), direct_conv2d(x, w, b, k, s, p)) < 1e-12);

    // conv1d is the H = 1 case of the same definition.
    const auto spec1 = make(LayerKind::conv1d, C, Co, k, s, p);
    auto x1 = random_tensor({W, C}, rng);
    auto w1 = random_tensor(weight_dims(spec1), rng);
    TensorD expect({(W + 2 * p - k) / s + 1, Co});
    for (std::size_t o = 0; o < expect.dim(0); ++o)
      for (std::size_t co = 0; co < Co; ++co) {
        double acc = b[co];
        for (std::size_t t = 0; t < k; ++t) {
          const long i = long(o * s + t) - long(p);
          if (i < 0 || i >= long(W)) continue;
          for (std::size_t ci = 0; ci < C; ++ci) acc += x1[i * C + ci] * w1[(t * C + ci) * Co + co];
        }
        expect[o * Co + co] = acc;
      }
    CHECK(max_abs_diff(forward(spec1, w1, b, x1), expect) < 1e-12);
  }
}

TEST_CASE("transposed convolution matches the scatter definition") {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    std::uniform_int_distribution<std::size_t> dim(1, 8), ch(1, 4), st(1, 3);
    const std::size_t L = dim(rng), C = ch(rng), Co = ch(rng), s = st(rng);
    const std::size_t k = 3, p = 1, op = s > 1 ? 1 : 0;
    const auto spec = make(LayerKind::tconv1d, C, Co, k, s, p, Activation::none, op);
    if ((L - 1) * s + k + op <= 2 * p) continue;
    auto x = random_tensor({L, C}, rng);
    auto w = random_tensor(weight_dims(spec), rng);
    auto b = random_tensor(bias_dims(spec), rng);
    CHECK(max_abs_diff(forward(spec, w, b, x), direct_tconv1d(x, w, b, k, s, p, op)) < 1e-12);
  }
}

TEST_CASE("gradient_check closed forms") {
  std::mt19937_64 rng(3);
  auto x = random_tensor({4, 3}, rng);
  GradFunction sumsq = [](const TensorD& v, TensorD* g) {
    double f = 0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      f += v[i] * v[i];
      if (g) (*g)[i] = 2 * v[i];
    }
    return f;
  };
  CHECK(gradient_check(sumsq, x, 1e-5) < 1e-6);

  GradFunction constant = [](const TensorD&, TensorD* g) {
    if (g) g->fill(0.0);
    return 3.5;
  };
  CHECK(gradient_check(constant, x, 1e-4) == 0.0);

  GradFunction nan_fn = [](const TensorD&, TensorD*) { return std::nan(""); };
  CHECK_THROWS_AS(gradient_check(nan_fn, x, 1e-4), NumericError);
}

namespace {

// Gradient of sum(r * layer(x)) w.r.t. x, weights or bias for random r.
double layer_grad_error(const LayerSpec& spec, const Dims& in_dims, int target, std::mt19937_64& rng) {
  auto x = random_tensor(in_dims, rng);
  auto w = random_tensor(weight_dims(spec), rng);
  auto b = random_tensor(bias_dims(spec), rng, -0.1, 0.1);
  const auto r = random_tensor(output_dims(spec, in_dims), rng);
  auto loss = [&](const TensorD& xx, const TensorD& ww, const TensorD& bb) {
    auto y = forward(spec, ww, bb, xx);
    double f = 0;
    for (std::size_t i = 0; i < y.size(); ++i) f += r[i] * y[i];
    return f;
  };
  GradFunction fn = [&](const TensorD& v, TensorD* g) {
    const TensorD& xx = target == 0 ? v : x;
    const TensorD& ww = target == 1 ? v : w;
    const TensorD& bb = target == 2 ? v : b;
    if (g) {
      auto y = forward(spec, ww, bb, xx);
      TensorD gw(ww.dims()), gb(bb.dims());
      auto gx = backward(spec, ww, xx, y, r, &gw, &gb);
      *g = target == 0 ? gx : target == 1 ? gw : gb;
    }
    return loss(xx, ww, bb);
  };
  const TensorD& at = target == 0 ? x : target == 1 ? w : b;
  return gradient_check(fn, at, 1e-6);
}

}  // namespace

TEST_CASE("gradient soundness for every layer kind") {
  std::mt19937_64 rng(11);
  for (auto act : {Activation::none, Activation::relu, Activation::sigmoid}) {
    for (int target = 0; target < 3; ++target) {
      CAPTURE(target);
      CHECK(layer_grad_error(make(LayerKind::conv2d, 2, 3, 3, 2, 1, act), {7, 6, 2}, target, rng) < 1e-4);
      CHECK(layer_grad_error(make(LayerKind::conv1d, 2, 3, 3, 2, 1, act), {8, 2}, target, rng) < 1e-4);
      CHECK(layer_grad_error(make(LayerKind::tconv2d, 3, 2, 3, 2, 1, act, 1), {4, 3, 3}, target, rng) < 1e-4);
      CHECK(layer_grad_error(make(LayerKind::tconv1d, 3, 2, 3, 2, 1, act, 1), {5, 3}, target, rng) < 1e-4);
      CHECK(layer_grad_error(make(LayerKind::fc, 6, 4, 1, 1, 0, act), {6}, target, rng) < 1e-4);
    }
  }
}

TEST_CASE("conv2d + relu + fc composite gradient") {
  std::mt19937_64 rng(5);
  const auto c = make(LayerKind::conv2d, 1, 4, 3, 2, 1, Activation::relu);
  const auto f = make(LayerKind::fc, 4 * 4 * 4, 1, 1, 1, 0);
  auto wc = random_tensor(weight_dims(c), rng);
  auto bc = random_tensor(bias_dims(c), rng, -0.1, 0.1);
  auto wf = random_tensor(weight_dims(f), rng);
  auto bf = random_tensor(bias_dims(f), rng);
  GradFunction fn = [&](const TensorD& x, TensorD* g) {
    auto h = forward(c, wc, bc, x);
    auto y = forward(f, wf, bf, h);
    if (g) {
      auto gh = backward(f, wf, h, y, TensorD({1}, {1.0}), nullptr, nullptr);
      *g = backward(c, wc, x, h, gh.reshaped(h.dims()), nullptr, nullptr);
    }
    return y[0];
  };
  CHECK(gradient_check(fn, random_tensor({8, 8, 1}, rng), 1e-4) < 1e-4);
}

TEST_CASE("forward is deterministic and activations respect their ranges") {
  std::mt19937_64 rng(2);
  const auto spec = make(LayerKind::conv2d, 2, 5, 3, 2, 1, Activation::relu);
  auto x = random_tensor<float>({9, 9, 2}, rng);
  auto w = random_tensor<float>(weight_dims(spec), rng);
  auto b = random_tensor<float>(bias_dims(spec), rng);
  auto y1 = forward(spec, w, b, x), y2 = forward(spec, w, b, x);
  CHECK(testutil::bitwise_equal(y1, y2));
  for (float v : y1.values()) CHECK(v >= 0.0f);

  auto s = spec;
  s.activation = Activation::sigmoid;
  const auto ys = forward(s, w, b, x);
  for (float v : ys.values()) {
    CHECK(v > 0.0f);
    CHECK(v < 1.0f);
  }
}
