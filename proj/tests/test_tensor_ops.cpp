#include <cmath>

#include "core/ops.hpp"
#include "core/rng.hpp"
#include "doctest.h"

using namespace colidr;

namespace {

// Direct-summation convolution oracle, independent of the im2col path.
double conv_window_sum(const Tensor& x, int n, int c, int oh, int ow, int stride, int pad) {
  const int H = x.dim(2), W = x.dim(3);
  double acc = 0.0;
  for (int ki = 0; ki < 3; ++ki) {
    for (int kj = 0; kj < 3; ++kj) {
      int ih = oh * stride - pad + ki;
      int iw = ow * stride - pad + kj;
      if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
      acc += x.data[((static_cast<std::size_t>(n) * x.dim(1) + c) * H + ih) * W + iw];
    }
  }
  return acc;
}

}  // namespace

TEST_CASE("tensor shape validation") {
  CHECK_THROWS_AS(Tensor({2, 0}), Error);
  CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0, 3.0}), Error);
  Tensor t({2, 3});
  CHECK(t.numel() == 6);
  CHECK_THROWS_AS(t.reshaped({4, 2}), Error);
  CHECK(t.reshaped({3, 2}).dim(0) == 3);
}

TEST_CASE("linear identity passthrough") {
  Tape t;
  Value x = t.leaf(Tensor({1, 2}, {3.0, 4.0}));
  Value w = t.leaf(Tensor({2, 2}, {1.0, 0.0, 0.0, 1.0}));
  Value b = t.leaf(Tensor({2}, {0.0, 0.0}));
  Value y = linear(x, w, b);
  CHECK(y.tensor().data[0] == doctest::Approx(3.0));
  CHECK(y.tensor().data[1] == doctest::Approx(4.0));
}

TEST_CASE("leaky_relu definition") {
  Tape t;
  Value x = t.leaf(Tensor({2}, {-1.0, 2.0}));
  Value y = leaky_relu(x, 0.01);
  CHECK(y.tensor().data[0] == doctest::Approx(-0.01));
  CHECK(y.tensor().data[1] == doctest::Approx(2.0));
}

TEST_CASE("conv2d all-ones kernel equals local window sums") {
  Rng rng(7);
  Tensor x = Tensor::randn({1, 1, 8, 8}, rng);
  Tape t;
  Value xv = t.leaf(x);
  Value w = t.leaf(Tensor::full({1, 1, 3, 3}, 1.0));
  Value b = t.leaf(Tensor::zeros({1}));
  Value y = conv2d(xv, w, b, 2, 1);
  REQUIRE(y.tensor().shape == Shape{1, 1, 4, 4});
  for (int oh = 0; oh < 4; ++oh)
    for (int ow = 0; ow < 4; ++ow)
      CHECK(y.tensor().data[static_cast<std::size_t>(oh) * 4 + ow] ==
            doctest::Approx(conv_window_sum(x, 0, 0, oh, ow, 2, 1)).epsilon(1e-12));
}

TEST_CASE("conv2d shape errors name the op") {
  Tape t;
  Value x = t.leaf(Tensor::zeros({1, 2, 8, 8}));
  Value w = t.leaf(Tensor::zeros({4, 3, 3, 3}));  // wrong channel count
  Value b = t.leaf(Tensor::zeros({4}));
  CHECK_THROWS_WITH_AS(conv2d(x, w, b, 2, 1),
                       doctest::Contains("conv2d"), Error);
}

TEST_CASE("conv_transpose2d doubles spatial dims and inverts conv geometry") {
  Rng rng(3);
  Tensor x = Tensor::randn({2, 3, 4, 4}, rng);
  Tape t;
  Value xv = t.leaf(x);
  Value w = t.leaf(Tensor::randn({3, 5, 3, 3}, rng, 0.2));
  Value b = t.leaf(Tensor::zeros({5}));
  Value y = conv_transpose2d(xv, w, b, 2, 1, 1);
  CHECK(y.tensor().shape == Shape{2, 5, 8, 8});

  // adjoint identity: <conv(u), x> == <u, convT(x)> with the shared kernel;
  // the convT weight [ic=3, oc=5, k, k] is exactly the conv weight that maps
  // 5 channels down to 3.
  Tensor u = Tensor::randn({2, 5, 8, 8}, rng);
  Tape t2;
  Value wc = t2.leaf(w.tensor());
  Value yc = conv2d(t2.leaf(u), wc, t2.leaf(Tensor::zeros({3})), 2, 1);
  double lhs = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) lhs += yc.tensor().data[i] * x.data[i];
  double rhs = 0.0;
  for (std::size_t i = 0; i < u.numel(); ++i) rhs += y.tensor().data[i] * u.data[i];
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-10));
}

TEST_CASE("softmax rows sum to one and stay in (0,1)") {
  Rng rng(11);
  Tape t;
  Value x = t.leaf(Tensor::uniform({5, 7}, rng, -30.0, 30.0));
  Value y = softmax_rows(x);
  for (int r = 0; r < 5; ++r) {
    double s = 0.0;
    for (int j = 0; j < 7; ++j) {
      double p = y.tensor().data[static_cast<std::size_t>(r) * 7 + j];
      CHECK(p > 0.0);
      CHECK(p < 1.0);
      s += p;
    }
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("batchnorm inference is a deterministic affine map") {
  Rng rng(5);
  Tensor x = Tensor::randn({2, 3, 4, 4}, rng);
  Tensor rm = Tensor::randn({3}, rng, 0.3);
  Tensor rv = Tensor::uniform({3}, rng, 0.5, 2.0);
  auto run = [&]() {
    Tape t;
    Value xv = t.leaf(x);
    Value g = t.leaf(Tensor::full({3}, 1.3));
    Value bt = t.leaf(Tensor::full({3}, -0.2));
    return batchnorm2d(xv, g, bt, rm, rv, false, 1e-5).y.tensor();
  };
  Tensor y1 = run();
  Tensor y2 = run();
  for (std::size_t i = 0; i < y1.numel(); ++i) CHECK(y1.data[i] == y2.data[i]);
  // affine in x: y(ax) - y(0) == a*(y(x) - y(0)) per element
  Tensor x2 = x;
  for (auto& v : x2.data) v *= 2.0;
  Tape t;
  Value y0 = batchnorm2d(t.leaf(Tensor::zeros(x.shape)), t.leaf(Tensor::full({3}, 1.3)),
                         t.leaf(Tensor::full({3}, -0.2)), rm, rv, false, 1e-5)
                 .y;
  Value yx2 = batchnorm2d(t.leaf(x2), t.leaf(Tensor::full({3}, 1.3)),
                          t.leaf(Tensor::full({3}, -0.2)), rm, rv, false, 1e-5)
                  .y;
  for (std::size_t i = 0; i < y1.numel(); ++i) {
    double lin = 2.0 * (y1.data[i] - y0.tensor().data[i]) + y0.tensor().data[i];
    CHECK(yx2.tensor().data[i] == doctest::Approx(lin).epsilon(1e-10));
  }
}

TEST_CASE("non-finite op output is rejected") {
  Tape t;
  Value x = t.leaf(Tensor({2}, {-1.0, 0.5}));
  CHECK_THROWS_AS(log(x), Error);  // log of a negative value
}

TEST_CASE("forward pass is bitwise deterministic for a fixed seed") {
  auto run = [] {
    Rng rng(123);
    Tape t;
    Value x = t.leaf(Tensor::randn({2, 1, 8, 8}, rng));
    Value w = t.leaf(Tensor::randn({4, 1, 3, 3}, rng, 0.5));
    Value b = t.leaf(Tensor::randn({4}, rng, 0.1));
    Value y = sigmoid(conv2d(x, w, b, 2, 1));
    return y.tensor();
  };
  Tensor a = run();
  Tensor b = run();
  REQUIRE(a.numel() == b.numel());
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.data[i] == b.data[i]);
}
