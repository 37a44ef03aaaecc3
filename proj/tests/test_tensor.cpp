#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "agcgan/conv.hpp"
#include "agcgan/ops.hpp"
#include "agcgan/optim.hpp"
#include "agcgan/random.hpp"
#include "oracles/gradcheck.hpp"

using namespace agc;
using agc::testing::gradcheck;
using agc::testing::random_projection;
using agc::testing::random_tensor;
using TensorD = Tensor<double>;
using TensorF = Tensor<float>;

constexpr double kGradTol = 1e-4;
constexpr int kInstances = 20;

TEST(Tensor, ConstructionChecksShape) {
  EXPECT_THROW(TensorF(Shape{2, 3}, std::vector<float>(5)), ShapeError);
  TensorF t(Shape{2, 3}, std::vector<float>(6, 1.f));
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_THROW(t.item(), ShapeError);
}

TEST(Tensor, NonFiniteValuesAreSurfaced) {
  TensorF big(Shape{1}, {1e30f});
  EXPECT_THROW(square(big), NumericError);
  TensorF zero(Shape{1}, {0.f});
  TensorF x(Shape{1}, {1.f});
  EXPECT_NO_THROW(mul(x, zero));
}

TEST(Backward, BilinearForm) {
  TensorD a(Shape{3}, {1.0, -2.0, 0.5}, true);
  TensorD b(Shape{3}, {4.0, 3.0, -1.0}, true);
  backward(sum(mul(a, b)));
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_DOUBLE_EQ(a.grad()[i], b.data()[i]);
    EXPECT_DOUBLE_EQ(b.grad()[i], a.data()[i]);
  }
}

TEST(Backward, ConstantRootGivesZeroGradient) {
  TensorD leaf(Shape{4}, {1, 2, 3, 4}, true);
  TensorD c = sum(TensorD(Shape{2}, {5.0, 6.0}));
  backward(c);
  for (double g : leaf.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, NonScalarRootIsAnError) {
  TensorD a(Shape{2}, {1.0, 2.0}, true);
  EXPECT_THROW(backward(square(a)), ShapeError);
}

TEST(Backward, RepeatedCallsAccumulate) {
  TensorD a(Shape{2}, {1.0, 2.0}, true);
  TensorD y = sum(square(a));
  backward(y);
  backward(y);
  EXPECT_DOUBLE_EQ(a.grad()[0], 4.0);
  EXPECT_DOUBLE_EQ(a.grad()[1], 8.0);
  a.zero_grad();
  backward(y);
  EXPECT_DOUBLE_EQ(a.grad()[1], 4.0);
}

TEST(Backward, SharedSubexpression) {
  TensorD a(Shape{1}, {3.0}, true);
  TensorD s = square(a);
  backward(sum(add(s, s)));  // d/da 2a^2 = 4a
  EXPECT_DOUBLE_EQ(a.grad()[0], 12.0);
}

TEST(Activation, FixedPoints) {
  TensorF x(Shape{3}, {-1.f, 0.f, 2.f});
  auto lr = activation(x, Activation::leaky(0.2));
  EXPECT_FLOAT_EQ(lr[0], -0.2f);
  EXPECT_FLOAT_EQ(relu(x)[1], 0.f);
  EXPECT_FLOAT_EQ(sigmoid(x)[1], 0.5f);
  EXPECT_FLOAT_EQ(tanh(x)[1], 0.f);
}

TEST(Activation, SigmoidStaysInOpenInterval) {
  TensorD x(Shape{4}, {-30.0, -5.0, 5.0, 30.0});
  auto s = sigmoid(x);
  for (double v : s.data()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(Activation, GradientCheck) {
  std::mt19937_64 rng(11);
  for (auto act : {Activation::relu(), Activation::leaky(0.2), Activation::sigmoid(), Activation::tanh()}) {
    for (int s = 0; s < kInstances; ++s) {
      auto x = random_tensor(Shape{2, 3, 2 + std::size_t(s % 3)}, rng, -2.0, 2.0);
      auto r = gradcheck({x}, [&](const auto& in) { return random_projection(activation(in[0], act), s); });
      EXPECT_LT(r.max_rel_error, kGradTol) << "activation kind " << int(act.kind) << " seed " << s;
    }
  }
}

TEST(Ops, ElementwiseAndReductionGradients) {
  std::mt19937_64 rng(12);
  for (int s = 0; s < kInstances; ++s) {
    const std::size_t n = 1 + s % 4, d = 2 + s % 5;
    auto a = random_tensor(Shape{n, d}, rng);
    auto b = random_tensor(Shape{n, d}, rng);
    auto bias = random_tensor(Shape{d}, rng);
    auto w = random_tensor(Shape{d, 3}, rng);
    auto r = gradcheck({a, b, bias, w}, [&](const auto& in) {
      auto h = add(mul(in[0], in[1]), sub(in[0], scale(in[1], 0.3)));
      h = bias_add(softplus(h), in[2]);
      auto m = matmul(abs(h), in[3]);
      auto rows = sum_rows(square(m));
      return add(mean(rows), mean_order_invariant(add_scalar(m, 0.5)));
    });
    EXPECT_LT(r.max_rel_error, kGradTol) << "seed " << s;
  }
}

TEST(Ops, StructuralGradients) {
  std::mt19937_64 rng(13);
  for (int s = 0; s < kInstances; ++s) {
    const std::size_t n = 1 + s % 3, h = 2 + s % 4;
    auto a = random_tensor(Shape{n, 2, h, h}, rng);
    auto b = random_tensor(Shape{n, 3, h, h}, rng);
    auto r = gradcheck({a, b}, [&](const auto& in) {
      auto c = concat_channels(in[0], in[1]);
      auto norm = instance_norm(c);
      auto pooled = global_avg_pool(mul(norm, c));
      return add(random_projection(norm, s), random_projection(reshape(pooled, Shape{pooled.numel()}), s + 1));
    });
    EXPECT_LT(r.max_rel_error, kGradTol) << "seed " << s;
  }
}

TEST(Ops, ShapeErrorsAreDescriptive) {
  TensorF a = TensorF::zeros(Shape{2, 3});
  TensorF b = TensorF::zeros(Shape{3, 2});
  EXPECT_THROW(add(a, b), ShapeError);
  EXPECT_THROW(matmul(a, a), ShapeError);
  EXPECT_THROW(bias_add(a, TensorF::zeros(Shape{2})), ShapeError);
  EXPECT_THROW(concat_channels(TensorF::zeros(Shape{1, 2, 4, 4}), TensorF::zeros(Shape{1, 2, 4, 3})), ShapeError);
  try {
    sub(a, b);
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos);
  }
}

TEST(Ops, DropoutScalesKeptElements) {
  Rng rng(5);
  TensorF x = TensorF::full(Shape{1000}, 1.f);
  auto y = dropout(x, 0.5, rng);
  std::size_t kept = 0;
  for (float v : y.data()) {
    EXPECT_TRUE(v == 0.f || v == 2.f);
    kept += v != 0.f;
  }
  EXPECT_GT(kept, 400u);
  EXPECT_LT(kept, 600u);
  EXPECT_EQ(dropout(x, 0.0, rng).node_ptr(), x.node_ptr());
}

TEST(Conv2d, IdentityKernel) {
  std::vector<float> v(25);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = float(i) * 0.5f - 3.f;
  TensorF x(Shape{1, 1, 5, 5}, v);
  auto y = conv2d(x, TensorF::full(Shape{1, 1, 1, 1}, 1.f), 1, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 5, 5}));
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_EQ(y[i], v[i]);
}

TEST(Conv2d, ConstantInputAllOnesKernel) {
  const float c = 1.75f;
  auto y = conv2d(TensorF::full(Shape{1, 1, 6, 6}, c), TensorF::full(Shape{1, 1, 3, 3}, 1.f), 1, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 4, 4}));
  for (float v : y.data()) EXPECT_FLOAT_EQ(v, 9 * c);
}

TEST(Conv2d, OutputSizeFormula) {
  for (std::size_t h : {5u, 8u, 9u, 64u})
    for (std::size_t k : {1u, 3u, 4u})
      for (std::size_t s : {1u, 2u, 3u})
        for (std::size_t p : {0u, 1u, 2u}) {
          if (h + 2 * p < k) continue;
          auto y = conv2d(TensorF::zeros(Shape{1, 2, h, h}), TensorF::zeros(Shape{3, 2, k, k}), s, p);
          EXPECT_EQ(y.dim(2), (h + 2 * p - k) / s + 1);
        }
}

TEST(Conv2d, ChannelMismatch) {
  EXPECT_THROW(conv2d(TensorF::zeros(Shape{1, 2, 8, 8}), TensorF::zeros(Shape{4, 3, 3, 3}), 1, 0), ShapeError);
  EXPECT_THROW(conv2d(TensorF::zeros(Shape{2, 8, 8}), TensorF::zeros(Shape{4, 2, 3, 3}), 1, 0), ShapeError);
  EXPECT_THROW(conv2d(TensorF::zeros(Shape{1, 2, 8, 8}), TensorF::zeros(Shape{4, 2, 3, 3}), 0, 0), ShapeError);
}

TEST(Conv2d, GradientCheck) {
  std::mt19937_64 rng(21);
  for (int s = 0; s < kInstances; ++s) {
    const std::size_t stride = 1 + s % 2, pad = s % 3 == 0 ? 0 : 1;
    const std::size_t n = s == 0 ? 2 : 1 + s % 2, cin = s == 0 ? 3 : 1 + s % 3, cout = s == 0 ? 4 : 2;
    const std::size_t hw = s == 0 ? 8 : 4 + s % 5, k = s == 0 ? 3 : 2 + s % 3;
    auto x = random_tensor(Shape{n, cin, hw, hw}, rng);
    auto w = random_tensor(Shape{cout, cin, k, k}, rng);
    auto r = gradcheck({x, w}, [&](const auto& in) { return random_projection(conv2d(in[0], in[1], stride, pad), s); });
    EXPECT_LT(r.max_rel_error, kGradTol) << "seed " << s;
  }
}

TEST(TransposedConv2d, DoublesSpatialDims) {
  auto y = transposed_conv2d(TensorF::zeros(Shape{1, 1, 4, 4}), TensorF::zeros(Shape{1, 1, 4, 4}), 2, 1);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 8, 8}));
}

TEST(TransposedConv2d, InvertsConvShape) {
  for (std::size_t h : {8u, 16u, 64u}) {
    auto x = TensorF::zeros(Shape{2, 3, h, h});
    auto down = conv2d(x, TensorF::zeros(Shape{5, 3, 4, 4}), 2, 1);
    auto up = transposed_conv2d(down, TensorF::zeros(Shape{5, 3, 4, 4}), 2, 1);
    EXPECT_EQ(up.shape(), x.shape());
  }
}

// <conv(x, k), y> == <x, tconv(y, k)> for the same kernel tensor.
TEST(TransposedConv2d, IsAdjointOfConv) {
  std::mt19937_64 rng(3);
  auto x = random_tensor(Shape{2, 3, 8, 8}, rng, -1, 1, false);
  auto k = random_tensor(Shape{5, 3, 4, 4}, rng, -1, 1, false);
  auto y = random_tensor(Shape{2, 5, 4, 4}, rng, -1, 1, false);
  // conv kernel OIHW with O=5, I=3 is a tconv kernel IOHW with I=5, O=3.
  const double lhs = sum(mul(conv2d(x, k, 2, 1), y)).item();
  const double rhs = sum(mul(x, transposed_conv2d(y, k, 2, 1))).item();
  EXPECT_NEAR(lhs, rhs, 1e-10);
}

TEST(TransposedConv2d, GradientCheck) {
  std::mt19937_64 rng(22);
  for (int s = 0; s < kInstances; ++s) {
    const std::size_t stride = 1 + s % 2, k = 2 + s % 3, pad = std::min<std::size_t>(s % 2, k / 2);
    const std::size_t n = 1 + s % 2, cin = 1 + s % 3, cout = 2, hw = 3 + s % 4;
    auto x = random_tensor(Shape{n, cin, hw, hw}, rng);
    auto w = random_tensor(Shape{cin, cout, k, k}, rng);
    auto r = gradcheck({x, w}, [&](const auto& in) {
      return random_projection(transposed_conv2d(in[0], in[1], stride, pad), s);
    });
    EXPECT_LT(r.max_rel_error, kGradTol) << "seed " << s;
  }
}

TEST(Backward, CompositeGraphMatchesFiniteDifferences) {
  std::mt19937_64 rng(31);
  for (int s = 0; s < kInstances; ++s) {
    auto x = random_tensor(Shape{2, 2, 8, 8}, rng);
    auto w1 = random_tensor(Shape{3, 2, 4, 4}, rng, -0.5, 0.5);
    auto b1 = random_tensor(Shape{3}, rng);
    auto w2 = random_tensor(Shape{3, 1, 4, 4}, rng, -0.5, 0.5);
    auto target = random_tensor(Shape{2, 1, 8, 8}, rng, -1, 1, false);
    auto r = gradcheck({x, w1, b1, w2}, [&](const auto& in) {
      auto h = leaky_relu(instance_norm(bias_add(conv2d(in[0], in[1], 2, 1), in[2])), 0.2);
      auto y = tanh(transposed_conv2d(h, in[3], 2, 1));
      return mean(square(sub(y, target)));
    });
    EXPECT_LT(r.max_rel_error, kGradTol) << "seed " << s;
  }
}

TEST(Determinism, RepeatedForwardBackwardIsBitwiseIdentical) {
  auto run = [] {
    std::mt19937_64 rng(77);
    auto x = random_tensor(Shape{2, 3, 16, 16}, rng);
    auto w = random_tensor(Shape{8, 3, 4, 4}, rng);
    std::vector<float> xf(x.data().begin(), x.data().end()), wf(w.data().begin(), w.data().end());
    TensorF xt(x.shape(), xf, true), wt(w.shape(), wf, true);
    auto y = mean(square(conv2d(xt, wt, 2, 1)));
    backward(y);
    std::vector<float> out{y.item()};
    out.insert(out.end(), wt.grad().begin(), wt.grad().end());
    out.insert(out.end(), xt.grad().begin(), xt.grad().end());
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  TensorF p(Shape{3}, {1.f, -2.f, 3.f}, true);
  std::vector<TensorF> params{p};
  auto state = make_adam_state<float>(params);
  p.zero_grad();
  for (int i = 0; i < 3; ++i) adam_step<float>(params, state);
  EXPECT_EQ(p[0], 1.f);
  EXPECT_EQ(p[1], -2.f);
  EXPECT_EQ(p[2], 3.f);
  EXPECT_EQ(state.t, 3u);
}

TEST(Adam, FirstStepMovesByLearningRateTimesSign) {
  TensorD p(Shape{4}, {0.0, 1.0, -1.0, 5.0}, true);
  std::vector<TensorD> params{p};
  auto state = make_adam_state<double>(params);
  const std::vector<double> g{0.3, -2.0, 0.05, -7.5};
  backward(sum(mul(p, TensorD(Shape{4}, g))));
  const std::vector<double> before(p.data().begin(), p.data().end());
  adam_step<double>(params, state);
  for (std::size_t i = 0; i < 4; ++i) {
    const double delta = p[i] - before[i];
    const double expected = -0.0002 * (g[i] > 0 ? 1.0 : -1.0);
    EXPECT_LE(std::abs(delta - expected) / std::abs(expected), 1e-6) << i;
  }
}

TEST(Adam, Defaults) {
  AdamOptions o;
  EXPECT_DOUBLE_EQ(o.lr, 0.0002);
  EXPECT_DOUBLE_EQ(o.beta1, 0.5);
  EXPECT_DOUBLE_EQ(o.beta2, 0.999);
  EXPECT_DOUBLE_EQ(o.eps, 1e-8);
}

TEST(Adam, ShapeMismatchIsRejected) {
  TensorF p(Shape{3}, {1.f, 2.f, 3.f}, true);
  std::vector<TensorF> params{p};
  auto state = make_adam_state<float>(params);
  std::vector<TensorF> other{TensorF::zeros(Shape{4}, true)};
  EXPECT_THROW(adam_step<float>(other, state), ShapeError);
}
