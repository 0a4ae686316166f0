#include <gtest/gtest.h>

#include <cmath>

#include "weckd/backbone.hpp"
#include "weckd/errors.hpp"
#include "weckd/rng.hpp"

using namespace weckd;

namespace {

Tensor random_batch(std::uint64_t seed, std::size_t B, const BackboneConfig& c) {
  Rng rng(seed);
  Tensor x({B, c.input.channels, c.input.height, c.input.width});
  for (auto& v : x.data()) v = rng.uniform();
  return x;
}

BackboneConfig attended(std::uint64_t seed = 0) {
  BackboneConfig c = BackboneConfig::desk_default();
  c.attention_enabled = true;
  c.init_seed = seed;
  return c;
}

}  // namespace

TEST(BuildModel, SeededDeterminism) {
  BackboneConfig c = BackboneConfig::desk_default();
  c.init_seed = 7;
  const Model a = build_model(c), b = build_model(c);
  for (const auto& [name, t] : a.params) EXPECT_EQ(t, b.param(name)) << name;
  c.init_seed = 8;
  EXPECT_FALSE(build_model(c).param("fc.weight") == a.param("fc.weight"));
}

TEST(BuildModel, DeskDefaultShapes) {
  const BackboneConfig c = BackboneConfig::desk_default();
  EXPECT_EQ(c.input, (InputSize{32, 32, 3}));
  EXPECT_EQ(c.fc_width, 128u);
  EXPECT_EQ(c.num_classes, 4u);
  const auto shapes = parameter_shapes(c);
  EXPECT_EQ(shapes.at(param_names::head_weight), (Dims{128, 4}));
  EXPECT_EQ(shapes.at(param_names::fc_weight), (Dims{64, 128}));
  EXPECT_EQ(shapes.at(param_names::att_weight), (Dims{64, 1}));
  EXPECT_EQ(shapes.at(param_names::att_bias), (Dims{1}));
  EXPECT_EQ(c.feature_dims(), (Dims{64, 4, 4}));
  const Model m = build_model(c);
  for (const auto& [name, dims] : shapes) EXPECT_EQ(m.param(name).dims(), dims) << name;
}

TEST(BuildModel, BiasesZeroAndHeVariance) {
  const Model m = build_model(BackboneConfig::desk_default());
  for (const auto& [name, t] : m.params) {
    if (name.find("bias") == std::string::npos) continue;
    for (const double v : t.data()) EXPECT_EQ(v, 0.0) << name;
  }
  // conv2 kernel: 64 x 32 x 3 x 3, fan_in 288.
  const Tensor& k = m.param(param_names::conv_kernel(2));
  double sq = 0.0;
  for (const double v : k.data()) sq += v * v;
  EXPECT_NEAR(sq / static_cast<double>(k.numel()), 2.0 / 288.0, 0.1 * 2.0 / 288.0);
}

TEST(BuildModel, SpatialCollapseNamesBlock) {
  BackboneConfig c;
  c.input = {4, 4, 1};
  c.conv_blocks = {{4, 3, true}, {4, 3, true}, {4, 3, true}};
  try {
    build_model(c);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(e.path().find("conv_blocks[2]"), std::string::npos) << e.what();
  }
  c.conv_blocks.pop_back();
  EXPECT_NO_THROW(build_model(c));
  c.num_classes = 1;
  EXPECT_THROW(build_model(c), ConfigError);
}

TEST(BuildModel, PaperFidelityPresetBuilds) {
  const BackboneConfig c = BackboneConfig::paper_fidelity();
  EXPECT_EQ(c.input, (InputSize{224, 224, 3}));
  EXPECT_EQ(c.fc_width, 1024u);
  EXPECT_NO_THROW(c.validate());
}

TEST(ForwardBase, ProbabilitiesNormalisedAndShapes) {
  const BackboneConfig c = BackboneConfig::desk_default();
  const Model m = build_model(c);
  const auto out = forward_base(m, random_batch(0, 5, c));
  EXPECT_EQ(out.features.dims(), (Dims{5, 64, 4, 4}));
  EXPECT_TRUE(out.logits.all_finite());
  for (std::size_t b = 0; b < 5; ++b) {
    double s = 0.0;
    for (std::size_t k = 0; k < 4; ++k) s += out.probs.at(b, k);
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(ForwardBase, ZeroParametersGiveUniform) {
  const BackboneConfig c = BackboneConfig::desk_default();
  Model m = build_model(c);
  for (auto& [name, t] : m.params) t.fill(0.0);
  const auto out = forward_base(m, random_batch(1, 3, c));
  for (const double p : out.probs.data()) EXPECT_EQ(p, 0.25);
}

TEST(ForwardBase, WrongInputSizeIsShapeError) {
  const Model m = build_model(BackboneConfig::desk_default());
  EXPECT_THROW(forward_base(m, Tensor({1, 3, 16, 16})), ShapeError);
  EXPECT_THROW(forward_base(m, Tensor({1, 1, 32, 32})), ShapeError);
}

TEST(AttentionScores, Examples) {
  Tensor f({1, 3, 2, 2});
  Rng rng(2);
  for (auto& v : f.data()) v = rng.normal();
  const Tensor half = attention_scores(f, Tensor({3, 1}), Tensor({1}));
  for (const double a : half.data()) EXPECT_EQ(a, 0.5);
  const Tensor sat = attention_scores(f, Tensor({3, 1}), Tensor({1}, 50.0));
  for (const double a : sat.data()) EXPECT_GT(a, 1.0 - 1e-9);
  const Tensor one = attention_scores(Tensor({1, 1, 1, 1}, 2.0), Tensor({1, 1}, 1.0), Tensor({1}));
  EXPECT_NEAR(one[0], 0.880797, 1e-6);
}

TEST(AttentionScores, StrictlyInsideUnitInterval) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor f({2, 4, 3, 3}), w({4, 1}), b({1}, rng.normal());
    for (auto& v : f.data()) v = rng.normal(0.0, 3.0);
    for (auto& v : w.data()) v = rng.normal();
    const Tensor scores = attention_scores(f, w, b);
    for (const double a : scores.data()) {
      EXPECT_GT(a, 0.0);
      EXPECT_LT(a, 1.0);
    }
  }
}

TEST(ForwardAttended, OnesMapEqualsBaseBitForBit) {
  const BackboneConfig c = attended(4);
  const Model m = build_model(c);
  const Tensor x = random_batch(4, 3, c);
  const auto att = forward_attended(m, x, Tensor({3, 4, 4}, 1.0));
  const auto base = forward_base(m, x);
  EXPECT_EQ(att.logits, base.logits);
  EXPECT_EQ(att.probs, base.probs);
}

TEST(ForwardAttended, ConstantMapScalesPooledFeatures) {
  const BackboneConfig c = attended(5);
  Model m = build_model(c);
  const Tensor x = random_batch(5, 2, c);
  const auto base = forward_base(m, x);
  const auto scaled = forward_attended(m, x, Tensor({2, 4, 4}, 0.3));
  for (std::size_t i = 0; i < base.pooled.numel(); ++i) EXPECT_NEAR(scaled.pooled[i], 0.3 * base.pooled[i], 1e-12);
  m.param(param_names::att_weight).fill(0.0);
  m.param(param_names::att_bias).fill(0.0);
  const auto half = forward_attended(m, x);
  for (const double a : half.attention.data()) EXPECT_EQ(a, 0.5);
  for (std::size_t i = 0; i < base.pooled.numel(); ++i) EXPECT_NEAR(half.pooled[i], 0.5 * base.pooled[i], 1e-12);
}

TEST(ForwardAttended, RequiresAttentionEnabled) {
  const Model m = build_model(BackboneConfig::desk_default());
  EXPECT_THROW(forward_attended(m, random_batch(0, 1, m.config)), ContractError);
}

TEST(ForwardAttended, TapedForwardMatchesForward) {
  for (bool attention : {false, true}) {
    BackboneConfig c = attended(6);
    c.attention_enabled = attention;
    const Model m = build_model(c);
    const Tensor x = random_batch(6, 2, c);
    auto taped = record_forward(m.params, c, x);
    EXPECT_EQ(taped.tape.value(taped.logits), forward(m, x).logits) << attention;
  }
}

TEST(CopyAttention, ReplacesOnlyAttentionTensors) {
  Model teacher = build_model(attended(1));
  Rng rng(9);
  for (auto& v : teacher.param(param_names::att_weight).data()) v = rng.normal();
  teacher.param(param_names::att_bias)[0] = 0.75;
  Model student = build_model(attended(2));
  const Model before = student;
  copy_attention_weights(teacher, student);
  EXPECT_EQ(student.param(param_names::att_weight), teacher.param(param_names::att_weight));
  EXPECT_EQ(student.param(param_names::att_bias), teacher.param(param_names::att_bias));
  for (const auto& [name, t] : student.params) {
    if (name == param_names::att_weight || name == param_names::att_bias) continue;
    EXPECT_EQ(t, before.param(name)) << name;
  }
  Model self = teacher;
  copy_attention_weights(teacher, self);
  for (const auto& [name, t] : self.params) EXPECT_EQ(t, teacher.param(name));
}

TEST(CopyAttention, ChannelMismatchIsShapeError) {
  const Model teacher = build_model(attended());
  BackboneConfig c = attended();
  c.conv_blocks.back().filters = 32;
  Model student = build_model(c);
  EXPECT_THROW(copy_attention_weights(teacher, student), ShapeError);
}
