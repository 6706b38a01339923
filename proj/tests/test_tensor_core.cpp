#include <doctest.h>

#include <random>

#include "hdt/autodiff.hpp"
#include "hdt/gradcheck.hpp"
#include "hdt/kernels.hpp"
#include "hdt/parallel.hpp"
#include "oracles.hpp"

using namespace hdt;
namespace k = hdt::kernels;

TEST_CASE("conv2d matches the direct loop") {
  std::mt19937_64 rng(11);
  for (std::size_t dil : {1u, 2u}) {
    for (std::size_t ks : {1u, 3u, 5u}) {
      auto x = oracle::random_tensor<double>(Shape{2, 7, 6, 3}, rng);
      auto w = oracle::random_tensor<double>(Shape{ks, ks, 3, 4}, rng);
      auto b = oracle::random_tensor<double>(Shape{4}, rng);
      k::Conv2dOptions opt;
      opt.dilation = dil;
      CHECK(oracle::max_abs_diff(k::conv2d(x, w, b, opt), oracle::conv2d(x, w, b, dil)) < 1e-12);
    }
  }
}

TEST_CASE("conv2d rejects a channel mismatch") {
  Tensor<double> x(Shape{1, 4, 4, 3}), w(Shape{3, 3, 2, 4}), b(Shape{4});
  CHECK_THROWS_AS(k::conv2d(x, w, b), ShapeError);
}

TEST_CASE("bilinear_sample matches the zero-extended oracle") {
  std::mt19937_64 rng(12);
  auto x = oracle::random_tensor<double>(Shape{1, 5, 6, 2}, rng);
  std::uniform_real_distribution<double> pos(-1.5, 6.5);
  for (int i = 0; i < 500; ++i) {
    const double py = pos(rng), px = pos(rng);
    const std::size_t c = i % 2;
    CHECK(std::abs(k::bilinear_sample(x, 0, py, px, c) - oracle::bilinear(x, 0, py, px, c)) < 1e-12);
  }
}

TEST_CASE("deformable conv with zero offsets equals conv2d") {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    std::uniform_int_distribution<std::size_t> side(3, 9), ch(1, 4);
    const std::size_t h = side(rng), w = side(rng), ci = ch(rng), co = ch(rng);
    auto x = oracle::random_tensor<double>(Shape{1, h, w, ci}, rng);
    auto wt = oracle::random_tensor<double>(Shape{3, 3, ci, co}, rng);
    auto b = oracle::random_tensor<double>(Shape{co}, rng);
    Tensor<double> off(Shape{1, h, w, 18}, 0.0);
    CHECK(oracle::max_abs_diff(k::deformable_conv2d(x, wt, b, off), k::conv2d(x, wt, b)) <= 1e-6);
  }
}

TEST_CASE("deformable conv with integer offsets equals conv of the shifted input") {
  std::mt19937_64 rng(14);
  for (int dy = -2; dy <= 2; ++dy) {
    for (int dx = -2; dx <= 2; ++dx) {
      const std::size_t h = 10, w = 11;
      auto x = oracle::random_tensor<double>(Shape{1, h, w, 2}, rng);
      auto wt = oracle::random_tensor<double>(Shape{3, 3, 2, 3}, rng);
      auto b = oracle::random_tensor<double>(Shape{3}, rng);
      Tensor<double> off(Shape{1, h, w, 18});
      for (std::size_t p = 0; p < h * w; ++p)
        for (std::size_t t = 0; t < 9; ++t) {
          off[p * 18 + 2 * t] = dy;
          off[p * 18 + 2 * t + 1] = dx;
        }
      Tensor<double> shifted(x.shape(), 0.0);
      for (long i = 0; i < static_cast<long>(h); ++i)
        for (long j = 0; j < static_cast<long>(w); ++j)
          for (std::size_t c = 0; c < 2; ++c) {
            const long si = i + dy, sj = j + dx;
            if (si >= 0 && si < static_cast<long>(h) && sj >= 0 && sj < static_cast<long>(w))
              shifted.at(0, i, j, c) = x.at(0, si, sj, c);
          }
      const auto a = k::deformable_conv2d(x, wt, b, off);
      const auto ref = k::conv2d(shifted, wt, b);
      double err = 0;
      for (std::size_t i = 3; i + 3 < h; ++i)
        for (std::size_t j = 3; j + 3 < w; ++j)
          for (std::size_t o = 0; o < 3; ++o) err = std::max(err, std::abs(a.at(0, i, j, o) - ref.at(0, i, j, o)));
      CHECK(err <= 1e-6);
    }
  }
}

TEST_CASE("deformable conv with fractional offsets matches the oracle") {
  std::mt19937_64 rng(15);
  auto x = oracle::random_tensor<double>(Shape{2, 6, 7, 3}, rng);
  auto wt = oracle::random_tensor<double>(Shape{3, 3, 3, 2}, rng);
  auto b = oracle::random_tensor<double>(Shape{2}, rng);
  auto off = oracle::random_tensor<double>(Shape{2, 6, 7, 18}, rng, -0.9, 0.9);
  CHECK(oracle::max_abs_diff(k::deformable_conv2d(x, wt, b, off), oracle::deformable_conv2d(x, wt, b, off)) < 1e-12);
}

TEST_CASE("softmax rows sum to one and survive large logits") {
  Tensor<double> x(Shape{2, 3}, std::vector<double>{1000, 1001, 1002, -5, 0, 5});
  const auto y = k::softmax(x);
  CHECK(y.all_finite());
  CHECK(std::abs(y[0] + y[1] + y[2] - 1.0) < 1e-15);
  CHECK(std::abs(y[2] - 1.0 / (1.0 + std::exp(-1.0) + std::exp(-2.0))) < 1e-15);
}

TEST_CASE("layer_norm output has zero mean and unit variance per row") {
  std::mt19937_64 rng(16);
  auto x = oracle::random_tensor<double>(Shape{5, 8}, rng, -3, 3);
  Tensor<double> g(Shape{8}, 1.0), be(Shape{8}, 0.0), mean, rstd;
  const auto y = k::layer_norm(x, g, be, 1e-12, &mean, &rstd);
  for (std::size_t r = 0; r < 5; ++r) {
    double m = 0, v = 0;
    for (std::size_t c = 0; c < 8; ++c) m += y[r * 8 + c];
    m /= 8;
    for (std::size_t c = 0; c < 8; ++c) v += (y[r * 8 + c] - m) * (y[r * 8 + c] - m);
    CHECK(std::abs(m) < 1e-12);
    CHECK(std::abs(v / 8 - 1.0) < 1e-9);
  }
}

TEST_CASE("window partition round trip on 200 random shapes") {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<std::size_t> wins(1, 6), mult(1, 4), bat(1, 3), ch(1, 5);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t win = wins(rng), h = win * mult(rng), w = win * mult(rng);
    const auto x = oracle::random_tensor<double>(Shape{bat(rng), h, w, ch(rng)}, rng);
    for (std::size_t shift : {std::size_t{0}, win / 2}) {
      Tape<double> tape;
      auto v = tape.constant(x);
      auto back = ad::window_reverse(ad::window_partition(v, win, shift), win, x.dim(0), h, w, shift);
      CHECK(back.value() == x);
    }
  }
}

TEST_CASE("window partition orders tokens row-major inside each window") {
  Tensor<double> x(Shape{1, 4, 4, 1});
  for (std::size_t i = 0; i < 16; ++i) x[i] = static_cast<double>(i);
  const auto p = k::window_partition(x, 2);
  CHECK(p.shape() == Shape{4, 4, 1});
  const std::vector<double> expect = {0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15};
  CHECK(p.vec() == expect);
}

TEST_CASE("roll is cyclic and invertible") {
  std::mt19937_64 rng(18);
  auto x = oracle::random_tensor<double>(Shape{1, 5, 4, 2}, rng);
  const auto r = k::roll(x, 2, -1);
  CHECK(r.at(0, 2, 0, 1) == x.at(0, 0, 1, 1));
  CHECK(k::roll(r, -2, 1) == x);
}

TEST_CASE("pad_reflect mirrors without repeating the edge") {
  Tensor<double> x(Shape{1, 3, 1, 1}, std::vector<double>{1, 2, 3});
  const auto p = k::pad_reflect(x, 2, 0);
  CHECK(p.vec() == std::vector<double>{1, 2, 3, 2, 1});
}

TEST_CASE("split_heads and merge_heads are inverse") {
  std::mt19937_64 rng(19);
  auto x = oracle::random_tensor<double>(Shape{3, 5, 12}, rng);
  CHECK(k::merge_heads(k::split_heads(x, 4), 4) == x);
}

TEST_CASE("kernels give identical bits for 1 and 4 threads") {
  std::mt19937_64 rng(20);
  auto x = oracle::random_tensor<float>(Shape{2, 16, 16, 8}, rng);
  auto w = oracle::random_tensor<float>(Shape{3, 3, 8, 8}, rng);
  auto b = oracle::random_tensor<float>(Shape{8}, rng);
  auto off = oracle::random_tensor<float>(Shape{2, 16, 16, 18}, rng);
  set_thread_count(1);
  const auto c1 = k::conv2d(x, w, b);
  const auto d1 = k::deformable_conv2d(x, w, b, off);
  set_thread_count(4);
  const auto c4 = k::conv2d(x, w, b);
  const auto d4 = k::deformable_conv2d(x, w, b, off);
  set_thread_count(1);
  CHECK(c1 == c4);
  CHECK(d1 == d4);
}

TEST_CASE("tape accumulates gradients from shared inputs") {
  Tape<double> tape;
  auto x = tape.variable(Tensor<double>(Shape{3}, std::vector<double>{1, 2, 3}));
  auto y = ad::sum(ad::add(ad::mul(x, x), x));
  tape.backward(y);
  const auto* g = tape.grad(x);
  REQUIRE(g);
  CHECK(g->vec() == std::vector<double>{3, 5, 7});
}

TEST_CASE("finite_difference_grad recovers a known gradient") {
  Tensor<double> x(Shape{2}, std::vector<double>{0.3, -1.2});
  auto f = [](const Tensor<double>& t) { return std::sin(t[0]) * t[1] * t[1]; };
  const auto g = finite_difference_grad(f, x);
  CHECK(relative_error(g[0], std::cos(0.3) * 1.44) < 1e-7);
  CHECK(relative_error(g[1], std::sin(0.3) * 2 * -1.2) < 1e-7);
}

TEST_CASE("shape errors name the dimension") {
  CHECK_THROWS_AS(Shape({2, 0, 3}), ShapeError);
  Tensor<double> a(Shape{2, 3});
  CHECK_THROWS_WITH_AS(a.reshaped(Shape{4, 2}), doctest::Contains("[2x3]"), ShapeError);
}

TEST_CASE("conv2d closed forms") {
  Tensor<double> x(Shape{1, 4, 4, 1}, 5.0), ones(Shape{3, 3, 1, 1}, 1.0), zero(Shape{1}, 0.0);
  CHECK(k::conv2d(x, ones, zero).at(0, 1, 2, 0) == 45.0);
  std::mt19937_64 rng(21);
  auto img = oracle::random_tensor<double>(Shape{2, 5, 3, 1}, rng);
  CHECK(k::conv2d(img, Tensor<double>(Shape{1, 1, 1, 1}, 1.0), zero) == img);
}

TEST_CASE("conv2d is linear") {
  std::mt19937_64 rng(22);
  auto a = oracle::random_tensor<double>(Shape{1, 6, 6, 2}, rng), b = oracle::random_tensor<double>(a.shape(), rng);
  auto w = oracle::random_tensor<double>(Shape{3, 3, 2, 3}, rng);
  Tensor<double> zero(Shape{3}, 0.0), mix(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) mix[i] = 2.0 * a[i] - 0.5 * b[i];
  const auto ya = k::conv2d(a, w, zero), yb = k::conv2d(b, w, zero), ym = k::conv2d(mix, w, zero);
  double err = 0;
  for (std::size_t i = 0; i < ym.size(); ++i) err = std::max(err, std::abs(ym[i] - (2.0 * ya[i] - 0.5 * yb[i])));
  CHECK(err <= 1e-5);
}

TEST_CASE("deformable conv samples midpoints at half-pixel offsets") {
  const std::size_t h = 5, w = 6;
  Tensor<double> ramp(Shape{1, h, w, 1});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) ramp.at(0, i, j, 0) = double(j) + 10.0 * double(i);
  // Centre tap only, so each output is the sample at (y + dy, x + dx).
  Tensor<double> wt(Shape{3, 3, 1, 1}, 0.0), b(Shape{1}, 0.0), off(Shape{1, h, w, 18}, 0.0);
  wt[4] = 1.0;
  for (std::size_t p = 0; p < h * w; ++p) off[p * 18 + 8] = 0.5;
  const auto y = k::deformable_conv2d(ramp, wt, b, off);
  for (std::size_t i = 0; i + 1 < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      CHECK(y.at(0, i, j, 0) == doctest::Approx((ramp.at(0, i, j, 0) + ramp.at(0, i + 1, j, 0)) / 2).epsilon(1e-15));
}

TEST_CASE("layer_norm closed forms") {
  Tensor<double> g(Shape{2}, 1.0), be(Shape{2}, 0.0), mean, rstd;
  const auto y = k::layer_norm(Tensor<double>(Shape{1, 2}, std::vector<double>{1, 3}), g, be, 1e-12, &mean, &rstd);
  CHECK(y[0] == doctest::Approx(-1.0).epsilon(1e-9));
  CHECK(y[1] == doctest::Approx(1.0).epsilon(1e-9));
  Tensor<double> g4(Shape{4}, 1.0), b4(Shape{4}, 0.0);
  const auto c = k::layer_norm(Tensor<double>(Shape{1, 4}, 7.0), g4, b4, 1e-5, &mean, &rstd);
  for (double v : c.data()) CHECK(v == 0.0);
}

TEST_CASE("softmax closed forms") {
  const auto y = k::softmax(Tensor<double>(Shape{1, 2}, std::vector<double>{0, 0}));
  CHECK(y.vec() == std::vector<double>{0.5, 0.5});
  const auto z = k::softmax(Tensor<double>(Shape{1, 2}, std::vector<double>{3, 1003}));
  CHECK(z[0] < 1e-300);
  CHECK(z[1] == 1.0);
}

TEST_CASE("linear closed forms and loop oracle") {
  const auto y = k::linear(Tensor<double>(Shape{1, 2}, std::vector<double>{1, 2}),
                           Tensor<double>(Shape{2, 1}, std::vector<double>{1, 1}), Tensor<double>(Shape{1}, 0.5));
  CHECK(y.vec() == std::vector<double>{3.5});
  std::mt19937_64 rng(23);
  auto x = oracle::random_tensor<double>(Shape{3, 4, 5}, rng), w = oracle::random_tensor<double>(Shape{5, 2}, rng);
  auto b = oracle::random_tensor<double>(Shape{2}, rng);
  Tensor<double> eye(Shape{5, 5}, 0.0), zero(Shape{5}, 0.0);
  for (std::size_t i = 0; i < 5; ++i) eye[i * 6] = 1.0;
  CHECK(k::linear(x, eye, zero) == x);
  const auto out = k::linear(x, w, b);
  double err = 0;
  for (std::size_t r = 0; r < 12; ++r)
    for (std::size_t o = 0; o < 2; ++o) {
      double acc = b[o];
      for (std::size_t c = 0; c < 5; ++c) acc += x[r * 5 + c] * w[c * 2 + o];
      err = std::max(err, std::abs(acc - out[r * 2 + o]));
    }
  CHECK(err <= 1e-12);
}

TEST_CASE("activation values") {
  const auto l = k::leaky_relu(Tensor<double>(Shape{2}, std::vector<double>{-1, 2}));
  CHECK(l[0] == doctest::Approx(-0.01).epsilon(1e-15));
  CHECK(l[1] == 2.0);
  const auto s = k::sigmoid(Tensor<double>(Shape{3}, std::vector<double>{0, 40, -40}));
  CHECK(s[0] == 0.5);
  CHECK(std::abs(s[1] - 1) <= 1e-6);
  CHECK(std::abs(s[2]) <= 1e-6);
  CHECK(s.all_finite());
  const auto sf = k::sigmoid(Tensor<float>(Shape{2}, std::vector<float>{-100.0f, 100.0f}));
  CHECK(sf.all_finite());
}

TEST_CASE("global average pooling") {
  CHECK(k::global_avg_pool(Tensor<double>(Shape{1, 2, 2, 1}, std::vector<double>{1, 2, 3, 4})).vec() ==
        std::vector<double>{2.5});
  const auto c = k::global_avg_pool(Tensor<double>(Shape{2, 3, 3, 2}, 1.25));
  CHECK(c.shape() == Shape{2, 2});
  for (double v : c.data()) CHECK(v == 1.25);
  std::mt19937_64 rng(24);
  auto x = oracle::random_tensor<double>(Shape{2, 4, 3, 5}, rng);
  const auto g = k::global_avg_pool(x);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t ch = 0; ch < 5; ++ch) {
      double s = 0;
      for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 3; ++j) s += x.at(n, i, j, ch);
      CHECK(std::abs(g[n * 5 + ch] - s / 12) <= 1e-12);
    }
}

TEST_CASE("elementwise identities and concat shapes") {
  std::mt19937_64 rng(25);
  Tape<double> tape;
  auto x = tape.constant(oracle::random_tensor<double>(Shape{1, 3, 3, 4}, rng));
  CHECK(ad::mul(x, tape.constant(Tensor<double>(x.shape(), 1.0))).value() == x.value());
  CHECK(ad::add(x, tape.constant(Tensor<double>(x.shape(), 0.0))).value() == x.value());
  auto wide = tape.constant(Tensor<double>(Shape{1, 3, 3, 12}));
  CHECK(ad::concat<double>({x, wide}).shape() == Shape{1, 3, 3, 16});
  CHECK(ad::mul_channel(x, tape.constant(Tensor<double>(Shape{1, 4}, 1.0))).value() == x.value());
}

TEST_CASE("backward on simple sums") {
  Tape<double> tape;
  auto x = tape.variable(Tensor<double>(Shape{4}, std::vector<double>{1, -2, 3, 0.5}));
  auto y = tape.variable(Tensor<double>(Shape{4}, std::vector<double>{1, -2, 3, 0.5}));
  tape.backward(ad::add(ad::sum(x), ad::sum(ad::mul(y, y))));
  CHECK(tape.grad(x)->vec() == std::vector<double>{1, 1, 1, 1});
  CHECK(tape.grad(y)->vec() == std::vector<double>{2, -4, 6, 1});
}

TEST_CASE("finite differences agree with backward") {
  Tensor<double> x(Shape{1}, 3.0);
  const auto id = finite_difference_grad([](const Tensor<double>& t) { return t[0]; }, x);
  CHECK(id[0] == doctest::Approx(1.0).epsilon(1e-10));
  const auto sq = finite_difference_grad([](const Tensor<double>& t) { return t[0] * t[0]; }, x);
  CHECK(std::abs(sq[0] - 6.0) <= 1e-7);

  std::mt19937_64 rng(26);
  const auto w = oracle::random_tensor<double>(Shape{3, 2}, rng), b = oracle::random_tensor<double>(Shape{2}, rng);
  const auto in = oracle::random_tensor<double>(Shape{2, 3}, rng);
  Tape<double> tape;
  auto xv = tape.variable(in);
  tape.backward(ad::sum(ad::sigmoid(ad::linear(xv, tape.constant(w), tape.constant(b)))));
  const auto fd = finite_difference_grad(
      [&](const Tensor<double>& t) {
        Tape<double> tp;
        return ad::sum(ad::sigmoid(ad::linear(tp.constant(t), tp.constant(w), tp.constant(b)))).value().item();
      },
      in);
  CHECK(max_relative_error(tape.grad(xv)->data(), fd.data()) <= 1e-8);
}

TEST_CASE("window partition counts") {
  const auto p = k::window_partition(Tensor<double>(Shape{1, 8, 8, 3}), 4);
  CHECK(p.shape() == Shape{4, 16, 3});
}
