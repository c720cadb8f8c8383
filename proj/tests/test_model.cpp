#include <gtest/gtest.h>

#include <fstream>

#include "support.hpp"

using namespace sdream;
using namespace sdream::testing;

TEST(Architecture, Validation) {
  Architecture a = tiny_arch();
  EXPECT_NO_THROW(a.validate());
  a.kernel = 4;
  EXPECT_THROW(a.validate(), ConfigError);
  a = tiny_arch();
  a.input_size = 6;
  EXPECT_THROW(a.validate(), ConfigError);
  a = tiny_arch();
  a.widths = {};
  EXPECT_THROW(a.validate(), ConfigError);
  a = tiny_arch();
  a.classes = 1;
  EXPECT_THROW(a.validate(), ConfigError);
}

TEST(Model, InitIsSeededAndBounded) {
  const Architecture arch = tiny_arch();
  Model a = Model::init(4, arch), b = Model::init(4, arch), c = Model::init(5, arch);
  EXPECT_TRUE(a.same_parameters(b));
  EXPECT_FALSE(a.same_parameters(c));
  const auto params = a.named_parameters();
  ASSERT_EQ(params.size(), 6u);
  EXPECT_EQ(params[0].first, "block0.kernel");
  EXPECT_EQ(params[3].first, "block1.bias");
  EXPECT_EQ(params[4].first, "classifier.weight");
  const double bound0 = std::sqrt(6.0 / 27.0);
  for (double v : params[0].second.data()) EXPECT_LE(std::abs(v), bound0);
  for (double v : params[1].second.data()) EXPECT_EQ(v, 0.0);
  const double bound_fc = 1.0 / std::sqrt(6.0);
  for (double v : params[4].second.data()) EXPECT_LE(std::abs(v), bound_fc);
}

TEST(Model, KernelInitVarianceMatchesUniformBound) {
  Architecture arch;
  arch.widths = {64};
  arch.input_size = 8;
  const Model m = Model::init(0, arch);
  const auto k = m.named_parameters()[0].second.data();
  double sq = 0.0;
  for (double v : k) sq += v * v;
  // Var of U(-b, b) is b²/3 = 2/fan_in.
  const double var = sq / static_cast<double>(k.size());
  const double want = 2.0 / 27.0;
  // Sample variance std for a uniform: b²·sqrt(4/45)/sqrt(n).
  const double tol = 4.0 * (6.0 / 27.0) * std::sqrt(4.0 / 45.0) / std::sqrt(static_cast<double>(k.size()));
  EXPECT_NEAR(var, want, tol);
}

TEST(Model, ForwardShapes) {
  const Model m = Model::init(0, tiny_arch(3));
  Rng rng(1);
  Tensor x = random_tensor({2, 3, 8, 8}, rng);
  EXPECT_EQ(m.extract_features(x).shape(), (Shape{2, 6, 2, 2}));
  EXPECT_EQ(m.predict_logits(x).shape(), (Shape{2, 3}));
  EXPECT_THROW(m.predict_logits(random_tensor({2, 3, 16, 16}, rng)), DimensionError);
  EXPECT_THROW(m.predict_logits(random_tensor({2, 1, 8, 8}, rng)), DimensionError);
}

TEST(Model, FrozenForwardLeavesParameterGradsAlone) {
  Model m = Model::init(0, tiny_arch());
  Rng rng(2);
  Tensor x = random_tensor({1, 3, 8, 8}, rng, -1, 1, true);
  ops::sum(m.predict_logits(x, ParamGrad::frozen)).backward();
  EXPECT_TRUE(x.has_grad());
  for (const auto& p : m.parameters()) EXPECT_FALSE(p.has_grad());
}

TEST(Model, ParameterGradientsMatchFiniteDifferences) {
  Model m = Model::init(3, tiny_arch());
  Rng rng(3);
  Tensor x = random_tensor({2, 3, 8, 8}, rng);
  const std::vector<int> y{0, 2};
  const double err = gradcheck([&] { return ops::softmax_ce(m.predict_logits(x), y); }, m.parameters());
  EXPECT_LT(err, 1e-4);
}

TEST(Model, CloneIsIndependent) {
  Model a = Model::init(0, tiny_arch());
  Model b = a.clone();
  EXPECT_TRUE(a.same_parameters(b));
  b.parameters()[0].mutable_data()[0] += 1.0;
  EXPECT_FALSE(a.same_parameters(b));
}

TEST(Checkpoint, RoundTripIsBitExact) {
  TempDir dir("ckpt");
  Model m = Model::init(7, tiny_arch(4));
  Normalization norm;
  norm.mean = {0.1, 0.2, 0.3};
  norm.std = {0.4, 0.5, 0.6};
  m.set_normalization(norm);
  save_checkpoint(m, dir / "m.bin");
  const Model back = load_checkpoint(dir / "m.bin");
  EXPECT_TRUE(m.same_parameters(back));
  EXPECT_EQ(back.arch(), m.arch());
  EXPECT_EQ(back.normalization(), norm);
  EXPECT_EQ(serialize_checkpoint(back), serialize_checkpoint(m));
}

TEST(Checkpoint, TruncationNamesMissingTensor) {
  TempDir dir("ckpt_trunc");
  const std::string bytes = serialize_checkpoint(Model::init(0, tiny_arch()));
  {
    std::ofstream out(dir / "t.bin", std::ios::binary);
    out << bytes.substr(0, bytes.size() - 8);
  }
  try {
    load_checkpoint(dir / "t.bin");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("classifier.bias"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, BadMagicAndHeader) {
  TempDir dir("ckpt_bad");
  {
    std::ofstream out(dir / "a.bin", std::ios::binary);
    out << "NOTACKPT\n{}";
  }
  EXPECT_THROW(load_checkpoint(dir / "a.bin"), ParseError);
  {
    std::ofstream out(dir / "b.bin", std::ios::binary);
    out << "DREAMGEN1\n{broken";
  }
  EXPECT_THROW(load_checkpoint(dir / "b.bin"), ParseError);
  EXPECT_THROW(load_checkpoint(dir / "missing.bin"), IoError);
}
