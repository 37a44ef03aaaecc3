#include <gtest/gtest.h>

#include <cstring>

#include "agcgan/networks.hpp"
#include "oracles/gradcheck.hpp"

using namespace agc;
using namespace agc::nn;
using TF = Tensor<float>;

namespace {

// k4 conv/tconv: 16 * cin * cout weights + cout biases.
std::size_t k4(std::size_t cin, std::size_t cout) { return 16 * cin * cout + cout; }

std::size_t generator_count(const GeneratorConfig& c) {
  std::vector<std::size_t> w;
  for (std::size_t l = 0; l < c.depth; ++l) w.push_back(c.base_width << l);
  std::size_t n = 0, prev = c.in_channels;
  for (auto cw : w) {
    n += k4(prev, cw);
    prev = cw;
  }
  for (std::size_t l = 0; l + 1 < c.depth; ++l) {
    const std::size_t level = c.depth - 2 - l;
    n += k4(l == 0 ? w.back() : 2 * w[level + 1], w[level]);
  }
  n += k4(2 * w[0], 1);
  n += w.back() * c.embed_dim + c.embed_dim;
  n += c.attributes * (c.embed_dim * c.head_width + c.head_width + c.head_width + 1);
  return n;
}

TF random_image(Shape s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1, 1);
  std::vector<float> v(numel_of(s));
  for (auto& x : v) x = u(rng);
  return TF(std::move(s), std::move(v));
}

bool bitwise_equal(const TF& a, const TF& b) {
  return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)) == 0;
}

}  // namespace

TEST(Generator, ShapesAtDefaultGeometry) {
  Rng rng(1);
  GeneratorConfig cfg;
  cfg.in_channels = 3;
  Generator<float> g(cfg, rng);
  const auto out = g.forward(random_image({2, 3, 64, 64}, 1), Mode::kEval, 0);
  EXPECT_EQ(out.synth.shape(), (Shape{2, 1, 64, 64}));
  EXPECT_EQ(out.embedding.shape(), (Shape{2, 128}));
  EXPECT_EQ(out.attr_logits.shape(), (Shape{2, 10}));
  for (float v : out.synth.data()) EXPECT_TRUE(v >= -1.f && v <= 1.f);
}

TEST(Generator, ChannelTable) {
  Rng rng(1);
  Generator<float> g(GeneratorConfig{}, rng);
  auto shape_of = [&](const std::string& n) { return g.parameter(n).shape(); };
  EXPECT_EQ(shape_of("enc0.weight"), (Shape{32, 1, 4, 4}));
  EXPECT_EQ(shape_of("enc1.weight"), (Shape{64, 32, 4, 4}));
  EXPECT_EQ(shape_of("enc2.weight"), (Shape{128, 64, 4, 4}));
  EXPECT_EQ(shape_of("enc3.weight"), (Shape{256, 128, 4, 4}));
  EXPECT_EQ(shape_of("dec0.weight"), (Shape{256, 128, 4, 4}));
  EXPECT_EQ(shape_of("dec1.weight"), (Shape{256, 64, 4, 4}));
  EXPECT_EQ(shape_of("dec2.weight"), (Shape{128, 32, 4, 4}));
  EXPECT_EQ(shape_of("out.weight"), (Shape{64, 1, 4, 4}));
  EXPECT_EQ(shape_of("embed.weight"), (Shape{256, 128}));
}

TEST(Generator, ParameterCountMatchesClosedForm) {
  for (std::size_t cin : {1u, 3u})
    for (std::size_t base : {8u, 16u, 32u})
      for (std::size_t depth : {2u, 3u, 4u}) {
        GeneratorConfig cfg;
        cfg.in_channels = cin;
        cfg.base_width = base;
        cfg.depth = depth;
        Rng rng(0);
        Generator<float> g(cfg, rng);
        EXPECT_EQ(g.parameter_count(), generator_count(cfg)) << cin << " " << base << " " << depth;
      }
  GeneratorConfig pol;
  pol.in_channels = 3;
  EXPECT_EQ(generator_count(pol), 1597067u);
}

TEST(Generator, EvalIsDeterministicTrainDependsOnSeed) {
  Rng rng(2);
  Generator<float> g(GeneratorConfig{}, rng);
  const auto x = random_image({1, 1, 64, 64}, 3);
  EXPECT_TRUE(bitwise_equal(g.forward(x, Mode::kEval, 5).synth, g.forward(x, Mode::kEval, 5).synth));
  EXPECT_TRUE(bitwise_equal(g.forward(x, Mode::kEval, 5).synth, g.forward(x, Mode::kEval, 6).synth));
  EXPECT_TRUE(bitwise_equal(g.forward(x, Mode::kTrain, 5).synth, g.forward(x, Mode::kTrain, 5).synth));
  EXPECT_FALSE(bitwise_equal(g.forward(x, Mode::kTrain, 5).synth, g.forward(x, Mode::kTrain, 6).synth));
}

TEST(Generator, RejectsNonConformingInput) {
  Rng rng(2);
  Generator<float> g(GeneratorConfig{}, rng);
  EXPECT_THROW(g.forward(random_image({1, 1, 40, 40}, 1), Mode::kEval, 0), ShapeError);
  EXPECT_THROW(g.forward(random_image({1, 3, 64, 64}, 1), Mode::kEval, 0), ShapeError);
  GeneratorConfig bad;
  bad.depth = 1;
  EXPECT_THROW(Generator<float>(bad, rng), std::invalid_argument);
}

TEST(Generator, EmbeddingIsTranslationTolerant) {
  // Pooling the bottleneck makes z depend on content, not absolute position:
  // a circular shift by one bottleneck cell changes z far less than new content.
  Rng rng(3);
  GeneratorConfig cfg;
  cfg.instance_norm = false;
  Generator<double> g(cfg, rng);
  std::mt19937_64 r(4);
  auto base = agc::testing::random_tensor({1, 1, 64, 64}, r, -1, 1, false);
  auto other = agc::testing::random_tensor({1, 1, 64, 64}, r, -1, 1, false);
  std::vector<double> shifted(64 * 64);
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 64; ++x) shifted[y * 64 + (x + 16) % 64] = base.data()[y * 64 + x];
  auto dist = [](const Tensor<double>& a, const Tensor<double>& b) {
    double d = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
    return d;
  };
  const auto z0 = g.forward(base, Mode::kEval, 0).embedding;
  const auto zs = g.forward(Tensor<double>({1, 1, 64, 64}, shifted), Mode::kEval, 0).embedding;
  const auto zo = g.forward(other, Mode::kEval, 0).embedding;
  EXPECT_LT(dist(z0, zs), dist(z0, zo));
}

TEST(Discriminator, PatchShapeAndReceptiveField) {
  Rng rng(1);
  Discriminator<float> d(DiscriminatorConfig{}, rng);
  const auto out = d.forward(random_image({2, 1, 64, 64}, 1), random_image({2, 1, 64, 64}, 2));
  EXPECT_EQ(out.shape(), (Shape{2, 1, 6, 6}));
  EXPECT_EQ(d.output_size(64), 6u);
  // k3 output on k4 s2 blocks: 3 -> 8 -> 18 -> 38.
  EXPECT_EQ(d.receptive_field(), 38u);
}

TEST(Discriminator, ParameterCountMatchesClosedForm) {
  for (std::size_t cc : {1u, 3u}) {
    DiscriminatorConfig cfg;
    cfg.condition_channels = cc;
    Rng rng(0);
    Discriminator<float> d(cfg, rng);
    const std::size_t expect = k4(cc + 1, 32) + k4(32, 64) + k4(64, 128) + 9 * 128 + 1;
    EXPECT_EQ(d.parameter_count(), expect);
  }
}

TEST(Discriminator, ReceptiveFieldIsLocal) {
  // Perturbing a pixel outside a logit's receptive field leaves that logit unchanged.
  Rng rng(5);
  DiscriminatorConfig cfg;
  cfg.instance_norm = false;
  Discriminator<double> d(cfg, rng);
  std::mt19937_64 r(1);
  auto cond = agc::testing::random_tensor({1, 1, 64, 64}, r, -1, 1, false);
  auto cand = agc::testing::random_tensor({1, 1, 64, 64}, r, -1, 1, false);
  const auto before = d.forward(cond, cand);
  cand.mutable_data()[63 * 64 + 63] += 5.0;
  const auto after = d.forward(cond, cand);
  EXPECT_EQ(before[0], after[0]);
  EXPECT_NE(before[35], after[35]);
}

TEST(Discriminator, IdenticalCopyChangesNothingAndShapesChecked) {
  Rng rng(1);
  Discriminator<float> d(DiscriminatorConfig{}, rng);
  const auto c = random_image({1, 1, 64, 64}, 1), x = random_image({1, 1, 64, 64}, 2);
  const TF copy(x.shape(), std::vector<float>(x.data().begin(), x.data().end()));
  EXPECT_TRUE(bitwise_equal(d.forward(c, x), d.forward(c, copy)));
  EXPECT_THROW(d.forward(c, random_image({1, 1, 32, 32}, 2)), ShapeError);
  EXPECT_THROW(d.forward(random_image({1, 3, 64, 64}, 1), x), ShapeError);
}

TEST(Discriminator, CandidateGradientMatchesFiniteDifferences) {
  for (std::size_t i = 0; i < 20; ++i) {
    Rng rng(i);
    DiscriminatorConfig cfg;
    cfg.base_width = 4;
    cfg.init_std = 0.3;
    Discriminator<double> d(cfg, rng);
    std::mt19937_64 r(i + 50);
    auto cond = agc::testing::random_tensor({1, 1, 24, 24}, r, -1, 1, false);
    auto cand = agc::testing::random_tensor({1, 1, 24, 24}, r);
    const auto res = agc::testing::gradcheck({cand}, [&](const std::vector<Tensor<double>>& x) {
      return agc::testing::random_projection(d.forward(cond, x[0]), i);
    });
    EXPECT_LT(res.max_rel_error, 1e-4) << i;
  }
}

TEST(AttributePredictor, ZeroHeadGivesHalf) {
  Rng rng(1);
  AttributePredictor<float> a(AttributePredictorConfig{}, rng);
  a.zero_head();
  const auto probs = a.forward(random_image({3, 1, 64, 64}, 4));
  for (float p : probs.data()) EXPECT_EQ(p, 0.5f);
}

TEST(AttributePredictor, OutputsInOpenUnitInterval) {
  Rng rng(1);
  AttributePredictor<double> a(AttributePredictorConfig{}, rng);
  std::mt19937_64 r(2);
  auto x = agc::testing::random_tensor({2, 1, 64, 64}, r, -50, 50, false);
  const auto p = a.forward(x);
  EXPECT_EQ(p.shape(), (Shape{2, 10}));
  for (double v : p.data()) EXPECT_TRUE(v > 0.0 && v < 1.0);
  EXPECT_THROW(a.forward(agc::testing::random_tensor({2, 1, 32, 32}, r, -1, 1, false)), ShapeError);
  AttributePredictor<double> uninit;
  EXPECT_THROW(uninit.forward(x), std::logic_error);
}

TEST(AttributePredictor, ExpandInputChannelsPreservesVisibleResponse) {
  Rng rng(1);
  AttributePredictor<float> a(AttributePredictorConfig{}, rng);
  const auto wide = a.expand_input_channels(3);
  EXPECT_EQ(wide.config().in_channels, 3u);
  const auto x = random_image({1, 1, 64, 64}, 9);
  std::vector<float> x3(3 * 64 * 64, 0.7f);
  std::copy(x.data().begin(), x.data().end(), x3.begin());
  const auto p1 = a.forward(x), p3 = wide.forward(TF({1, 3, 64, 64}, x3));
  for (std::size_t t = 0; t < 10; ++t) EXPECT_NEAR(p1[t], p3[t], 1e-6);
  EXPECT_THROW(wide.expand_input_channels(1), std::invalid_argument);
}

TEST(FeatureNet, FrozenDeterministicAndCopiesTrunk) {
  Rng rng(1);
  FeatureNet<float> v(FeatureNetConfig{}, rng);
  EXPECT_TRUE(v.frozen());
  for (const auto& p : v.named_parameters()) EXPECT_FALSE(p.tensor.requires_grad());
  const auto x = random_image({1, 1, 64, 64}, 3);
  const auto f = v.forward(x);
  EXPECT_EQ(f.shape(), (Shape{1, 64, 16, 16}));
  EXPECT_TRUE(bitwise_equal(f, v.forward(x)));

  AttributePredictor<float> a(AttributePredictorConfig{}, rng);
  v.copy_trunk_from(a);
  EXPECT_TRUE(bitwise_equal(v.forward(x), a.trunk(x, 3)));
  EXPECT_TRUE(v.frozen());
}

TEST(Module, FrozenParametersGetNoGradient) {
  Rng rng(1);
  AttributePredictor<double> a(AttributePredictorConfig{1, 16, {4, 8}, 10}, rng);
  a.set_frozen(true);
  std::mt19937_64 r(2);
  auto x = agc::testing::random_tensor({1, 1, 16, 16}, r);
  backward(sum(a.forward(x)));
  for (const auto& p : a.named_parameters()) EXPECT_FALSE(p.tensor.has_grad());
  EXPECT_TRUE(x.has_grad());
}
