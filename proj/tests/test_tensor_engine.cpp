#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "weckd/backbone.hpp"
#include "weckd/errors.hpp"
#include "weckd/gradcheck.hpp"
#include "weckd/layers.hpp"
#include "weckd/optim.hpp"
#include "weckd/rng.hpp"
#include "weckd/tape.hpp"

using namespace weckd;
namespace ly = weckd::layers;

namespace {

Tensor random_tensor(Dims dims, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(dims));
  for (auto& v : t.data()) v = rng.normal(0.0, scale);
  return t;
}

// Direct seven-loop cross-correlation, independent of the im2col path.
Tensor conv_oracle(const Tensor& x, const Tensor& k, const Tensor& bias, std::size_t stride,
                   std::size_t pad) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t F = k.dim(0), K = k.dim(2);
  const std::size_t OH = (H + 2 * pad - K) / stride + 1, OW = (W + 2 * pad - K) / stride + 1;
  Tensor out({B, F, OH, OW});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t oh = 0; oh < OH; ++oh)
        for (std::size_t ow = 0; ow < OW; ++ow) {
          double s = bias[f];
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < K; ++i)
              for (std::size_t j = 0; j < K; ++j) {
                const long ih = static_cast<long>(oh * stride + i) - static_cast<long>(pad);
                const long iw = static_cast<long>(ow * stride + j) - static_cast<long>(pad);
                if (ih < 0 || iw < 0 || ih >= static_cast<long>(H) || iw >= static_cast<long>(W)) continue;
                s += x.at(b, c, static_cast<std::size_t>(ih), static_cast<std::size_t>(iw)) *
                     k.at(f, c, i, j);
              }
          out.at(b, f, oh, ow) = s;
        }
  return out;
}

BackboneConfig tiny_backbone(bool attention, std::uint64_t seed) {
  BackboneConfig c;
  c.input = {8, 8, 2};
  c.conv_blocks = {{3, 3, true}, {4, 3, true}};
  c.fc_width = 5;
  c.num_classes = 3;
  c.attention_enabled = attention;
  c.init_seed = seed;
  return c;
}

TapedLoss backbone_loss(const BackboneConfig& config, const Tensor& batch, const Tensor& targets,
                        const Tensor& teacher) {
  return [=](const ParameterSet& params) {
    auto fwd = record_forward(params, config, batch);
    HybridObjectiveSpec spec{targets, teacher, 0.6, 2.0, false};
    fwd.tape.hybrid_objective(fwd.logits, spec);
    return std::move(fwd.tape);
  };
}

}  // namespace

TEST(Tensor, DataLengthMatchesDims) {
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor({1, 1, 1, 1, 1}), ShapeError);
  Tensor t({2, 3, 4});
  EXPECT_EQ(t.numel(), 24u);
}

TEST(Conv2d, ScalarProduct) {
  Tensor x({1, 1, 1, 1}, 2.0), k({1, 1, 1, 1}, 3.0), b({1}, 0.0);
  EXPECT_EQ(ly::conv2d_forward(x, k, b, 1, 0)[0], 6.0);
}

TEST(Conv2d, IdentityKernel) {
  Tensor x({1, 1, 2, 2}, {1, 2, 3, 4}), k({1, 1, 1, 1}, 1.0), b({1}, 0.0);
  EXPECT_EQ(ly::conv2d_forward(x, k, b, 1, 0), x);
}

TEST(Conv2d, AllOnesThreeByThree) {
  Tensor x({1, 1, 3, 3}, 1.0), k({1, 1, 3, 3}, 1.0), b({1}, 0.0);
  const Tensor expected = conv_oracle(x, k, b, 1, 0);
  ASSERT_EQ(expected[0], 9.0);
  EXPECT_EQ(ly::conv2d_forward(x, k, b, 1, 0), expected);
}

TEST(Conv2d, ChannelMismatchNamesBothShapes) {
  Tensor x({1, 2, 4, 4}), k({1, 3, 3, 3}), b({1});
  try {
    ly::conv2d_forward(x, k, b, 1, 0);
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[1,2,4,4]"), std::string::npos);
    EXPECT_NE(msg.find("[1,3,3,3]"), std::string::npos);
  }
}

TEST(Conv2d, MatchesOracleOverRandomShapes) {
  Rng rng(11);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t B = 1 + rng.index(2), C = 1 + rng.index(3), F = 1 + rng.index(3);
    const std::size_t K = 1 + rng.index(3), pad = rng.index(2), stride = 1 + rng.index(2);
    const std::size_t H = K + rng.index(5), W = K + rng.index(5);
    const Tensor x = random_tensor({B, C, H, W}, rng), k = random_tensor({F, C, K, K}, rng),
                 b = random_tensor({F}, rng);
    const Tensor got = ly::conv2d_forward(x, k, b, stride, pad);
    const Tensor want = conv_oracle(x, k, b, stride, pad);
    ASSERT_EQ(got.dims(), (Dims{B, F, (H + 2 * pad - K) / stride + 1, (W + 2 * pad - K) / stride + 1}));
    EXPECT_LT(max_abs_diff(got, want), 1e-12);
  }
}

TEST(Layers, Examples) {
  EXPECT_EQ(ly::layer_forward(ly::LayerKind::relu, Tensor::vector({-1, 0, 2})), Tensor::vector({0, 0, 2}));
  const Tensor gap = ly::layer_forward(ly::LayerKind::gap, Tensor({1, 1, 2, 2}, 0.37));
  EXPECT_EQ(gap.dims(), (Dims{1, 1}));
  EXPECT_DOUBLE_EQ(gap[0], 0.37);
  const Tensor pooled = ly::layer_forward(ly::LayerKind::maxpool2, Tensor({1, 1, 2, 2}, {1, 2, 3, 4}));
  EXPECT_EQ(pooled, Tensor({1, 1, 1, 1}, 4.0));
  const Tensor p = ly::layer_forward(ly::LayerKind::softmax, Tensor({1, 2}, 0.0));
  EXPECT_EQ(p[0], 0.5);
  EXPECT_EQ(p[1], 0.5);
  const Tensor s = ly::layer_forward(ly::LayerKind::sigmoid, Tensor::vector({-30, 0, 30}));
  for (double v : s.data()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(Layers, DenseMismatchIsShapeError) {
  Tensor x({2, 3}), w({4, 2}), b({2});
  const Tensor params[] = {w, b};
  EXPECT_THROW(ly::layer_forward(ly::LayerKind::dense, x, params), ShapeError);
}

TEST(Layers, MaxPoolTiesRouteToFirstIndex) {
  auto result = ly::maxpool2_forward(Tensor({1, 1, 2, 2}, 5.0));
  ASSERT_EQ(result.argmax.size(), 1u);
  EXPECT_EQ(result.argmax[0], 0u);
  const Tensor g = ly::maxpool2_backward({1, 1, 2, 2}, result.argmax, Tensor({1, 1, 1, 1}, 1.0));
  EXPECT_EQ(g, Tensor({1, 1, 2, 2}, {1, 0, 0, 0}));
}

TEST(Layers, ShapeAlgebraProperty) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t B = 1 + rng.index(3), C = 1 + rng.index(4), H = 2 + rng.index(9), W = 2 + rng.index(9);
    const Tensor x = random_tensor({B, C, H, W}, rng);
    EXPECT_EQ(ly::maxpool2_forward(x).output.dims(), (Dims{B, C, H / 2, W / 2}));
    EXPECT_EQ(ly::gap_forward(x).dims(), (Dims{B, C}));
    EXPECT_EQ(ly::relu_forward(x).dims(), x.dims());
    const Tensor proj = ly::channel_projection_forward(x, random_tensor({C, 1}, rng), Tensor({1}));
    EXPECT_EQ(proj.dims(), (Dims{B, H, W}));
    EXPECT_EQ(ly::spatial_gate_forward(x, proj).dims(), x.dims());
    const std::size_t out = 1 + rng.index(5);
    EXPECT_EQ(ly::dense_forward(ly::gap_forward(x), random_tensor({C, out}, rng), Tensor({out})).dims(),
              (Dims{B, out}));
  }
}

TEST(Backward, DotProduct) {
  Tape t;
  const ValueId w = t.parameter("w", Tensor({1, 1}, 0.25));
  const ValueId x = t.constant(Tensor({1, 1}, 3.0));
  t.dense(x, w, t.constant(Tensor({1})));
  const GradientMap g = backward(t);
  EXPECT_EQ(g.at("w")[0], 3.0);
}

TEST(Backward, DeadRelu) {
  Tape t;
  t.relu(t.parameter("w", Tensor::scalar(-1.0)));
  EXPECT_EQ(backward(t).at("w")[0], 0.0);
}

TEST(Backward, UnusedParameterGetsZeros) {
  Tape t;
  t.parameter("unused", Tensor({2, 3}, 1.0));
  t.sum(t.parameter("w", Tensor({2}, 1.0)));
  const GradientMap g = backward(t);
  EXPECT_EQ(g.at("unused"), Tensor({2, 3}));
  EXPECT_EQ(g.at("w"), Tensor({2}, 1.0));
}

TEST(Backward, RequiresScalarTerminal) {
  Tape t;
  t.relu(t.parameter("w", Tensor({3}, 1.0)));
  EXPECT_THROW(backward(t), ContractError);
  Tape s;
  s.sum(s.parameter("w", Tensor({3}, 1.0)));
  EXPECT_THROW(backward(s, Tensor({2}, 1.0)), ContractError);
}

TEST(Backward, TapeIsTopologicalAndReplaysBitExact) {
  Rng rng(3);
  const BackboneConfig config = tiny_backbone(true, 9);
  const Model model = build_model(config);
  const Tensor batch = random_tensor({2, 2, 8, 8}, rng);
  const Tensor targets({2, 3}, {1, 0, 0, 0, 0, 1});
  auto fn = backbone_loss(config, batch, targets, random_tensor({2, 3}, rng));
  const Tape tape = fn(model.params);
  const Tape again = tape.replay();
  ASSERT_EQ(again.size(), tape.size());
  for (std::size_t i = 0; i < tape.size(); ++i) EXPECT_EQ(again.value({i}), tape.value({i}));
  const GradientMap g1 = backward(tape), g2 = backward(again);
  for (const auto& [name, g] : g1) EXPECT_EQ(g, g2.at(name)) << name;
}

TEST(Backward, LinearityOfSummedLosses) {
  Rng rng(21);
  Tape base;
  const ValueId w = base.parameter("w", random_tensor({3, 4}, rng));
  const ValueId x = base.constant(random_tensor({2, 3}, rng));
  const ValueId b = base.parameter("b", random_tensor({4}, rng));
  const ValueId y = base.dense(x, w, b);
  // L1 = sum(relu(y)), L2 = sum(sigmoid(y))
  Tape t1 = base, t2 = base, t12 = base;
  t1.sum(t1.relu(y));
  t2.sum(t2.sigmoid(y));
  t12.add(t12.sum(t12.relu(y)), t12.sum(t12.sigmoid(y)));
  const GradientMap g1 = backward(t1), g2 = backward(t2), g12 = backward(t12);
  for (const auto& [name, g] : g12) {
    Tensor expected = g1.at(name);
    expected += g2.at(name);
    EXPECT_LT(max_abs_diff(g, expected), 1e-14) << name;
  }
}

// Each primitive in isolation, reduced by sum(sigmoid(.)) so the upstream
// gradient is non-uniform.
TEST(GradCheck, EachPrimitiveInIsolation) {
  using Builder = std::function<ValueId(Tape&, std::map<std::string, ValueId>&)>;
  const std::vector<std::pair<std::string, Builder>> primitives = {
      {"conv2d", [](Tape& t, auto& id) { return t.conv2d(id["x"], id["k"], id["kb"], 1, 1); }},
      {"conv2d_stride2", [](Tape& t, auto& id) { return t.conv2d(id["x"], id["k"], id["kb"], 2, 0); }},
      {"relu", [](Tape& t, auto& id) { return t.relu(id["x"]); }},
      {"maxpool2", [](Tape& t, auto& id) { return t.maxpool2(id["x"]); }},
      {"gap", [](Tape& t, auto& id) { return t.gap(id["x"]); }},
      {"dense", [](Tape& t, auto& id) { return t.dense(t.gap(id["x"]), id["dw"], id["db"]); }},
      {"softmax", [](Tape& t, auto& id) { return t.softmax(t.dense(t.gap(id["x"]), id["dw"], id["db"])); }},
      {"channel_projection", [](Tape& t, auto& id) { return t.channel_projection(id["x"], id["aw"], id["ab"]); }},
      {"spatial_gate",
       [](Tape& t, auto& id) { return t.spatial_gate(id["x"], t.channel_projection(id["x"], id["aw"], id["ab"])); }},
      {"add", [](Tape& t, auto& id) { return t.add(id["x"], t.relu(id["x"])); }},
  };
  for (const auto& [label, build] : primitives) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(seed + 100);
      const ParameterSet params{{"x", random_tensor({2, 3, 4, 4}, rng)},
                                {"k", random_tensor({2, 3, 3, 3}, rng)},
                                {"kb", random_tensor({2}, rng)},
                                {"aw", random_tensor({3, 1}, rng)},
                                {"ab", random_tensor({1}, rng)},
                                {"dw", random_tensor({3, 4}, rng)},
                                {"db", random_tensor({4}, rng)}};
      const TapedLoss fn = [&](const ParameterSet& p) {
        Tape t;
        std::map<std::string, ValueId> id;
        for (const auto& [n, v] : p) id[n] = t.parameter(n, v);
        t.sum(t.sigmoid(build(t, id)));
        return t;
      };
      const auto report = finite_diff_check(fn, params, {1e-5, 0, seed});
      EXPECT_LT(report.max_relative_error, 1e-4)
          << label << " seed " << seed << " worst " << report.worst_parameter << "["
          << report.worst_index << "]";
    }
  }
}

TEST(GradCheck, HybridObjectiveTerminal) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed + 300);
    const Tensor targets({2, 4}, {0, 1, 0, 0, 0, 0, 0, 1});
    const Tensor teacher = random_tensor({2, 4}, rng, 2.0);
    const TapedLoss fn = [&](const ParameterSet& p) {
      Tape t;
      t.hybrid_objective(t.parameter("z", p.at("z")), {targets, teacher, 0.4, 3.0, false});
      return t;
    };
    const auto report = finite_diff_check(fn, {{"z", random_tensor({2, 4}, rng, 2.0)}}, {1e-5, 0, seed});
    EXPECT_LT(report.max_relative_error, 1e-4) << seed;
  }
}

TEST(GradCheck, TinyBackboneAllCoordinatesTwentySeeds) {
  std::size_t checked = 0, skipped = 0;
  for (bool attention : {false, true}) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(seed);
      const BackboneConfig config = tiny_backbone(attention, seed);
      const Model model = build_model(config);
      const Tensor batch = random_tensor({2, 2, 8, 8}, rng);
      const Tensor targets({2, 3}, {1, 0, 0, 0, 1, 0});
      const auto report =
          finite_diff_check(backbone_loss(config, batch, targets, random_tensor({2, 3}, rng)),
                            model.params, {1e-5, 0, seed});
      EXPECT_LT(report.max_relative_error, 1e-4)
          << "attention " << attention << " seed " << seed << " worst " << report.worst_parameter
          << "[" << report.worst_index << "] analytic " << report.worst_analytic << " numeric "
          << report.worst_numeric;
      checked += report.coordinates_checked;
      skipped += report.kinks_skipped;
    }
  }
  // Kinks within eps of a probe are rare.
  EXPECT_LE(skipped * 50, checked + skipped);
}

TEST(FiniteDiff, Quadratic) {
  // 0.5 w^2 as dense(dense(w, w), 0.5); w feeds both dense inputs.
  const TapedLoss half_square = [](const ParameterSet& p) {
    Tape t;
    const ValueId w = t.parameter("w", p.at("w"));
    const ValueId zero = t.constant(Tensor({1}));
    t.dense(t.dense(w, w, zero), t.constant(Tensor({1, 1}, 0.5)), zero);
    return t;
  };
  const ParameterSet params{{"w", Tensor({1, 1}, 2.0)}};
  EXPECT_EQ(backward(half_square(params)).at("w")[0], 2.0);
  for (double eps : {1e-3, 1e-5, 1e-7}) {
    const auto report = finite_diff_check(half_square, params, {eps, 0, 0});
    EXPECT_LT(report.max_relative_error, 1e-8) << eps;
  }
}

TEST(FiniteDiff, ConstantLossIsZeroError) {
  const TapedLoss constant = [](const ParameterSet& p) {
    Tape t;
    t.parameter("w", p.at("w"));
    t.sum(t.constant(Tensor({3}, 1.0)));
    return t;
  };
  const auto report = finite_diff_check(constant, {{"w", Tensor({2}, 1.0)}}, {1e-5, 0, 0});
  EXPECT_EQ(report.max_relative_error, 0.0);
  EXPECT_EQ(report.coordinates_checked, 2u);
}

TEST(FiniteDiff, RejectsEpsilonOutsideRange) {
  const TapedLoss fn = [](const ParameterSet& p) {
    Tape t;
    t.sum(t.parameter("w", p.at("w")));
    return t;
  };
  EXPECT_THROW(finite_diff_check(fn, {{"w", Tensor({1})}}, {1e-2, 0, 0}), ContractError);
  EXPECT_THROW(finite_diff_check(fn, {{"w", Tensor({1})}}, {1e-9, 0, 0}), ContractError);
}

TEST(FiniteDiff, NonFiniteLossReportsCoordinate) {
  // 1e308 * w is finite at w but overflows at w + eps.
  const TapedLoss fn = [](const ParameterSet& p) {
    Tape t;
    const ValueId w = t.parameter("w", p.at("w"));
    t.sum(t.dense(t.constant(Tensor({1, 1}, 1e308)), w, t.constant(Tensor({1}))));
    return t;
  };
  try {
    finite_diff_check(fn, {{"w", Tensor({1, 1}, 1.7969)}}, {1e-3, 0, 0});
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("w"), std::string::npos);
  }
}

TEST(Sgd, PlainStep) {
  ParameterSet p{{"w", Tensor::scalar(1.0)}};
  SgdState state;
  sgd_step(p, {{"w", Tensor::scalar(0.5)}}, {0.1, 0.0}, state);
  EXPECT_DOUBLE_EQ(p.at("w")[0], 0.95);
}

TEST(Sgd, ZeroGradientLeavesParamsUnchanged) {
  ParameterSet p{{"w", Tensor::vector({1.5, -2.0})}};
  const ParameterSet before = p;
  SgdState state;
  sgd_step(p, {{"w", Tensor({2})}}, {0.1, 0.9}, state);
  EXPECT_EQ(p.at("w"), before.at("w"));
}

TEST(Sgd, MomentumTwoSteps) {
  // v1 = 1, w1 = -0.1; v2 = 0.9 + 1 = 1.9, w2 = -0.1 - 0.19 = -0.29
  ParameterSet p{{"w", Tensor::scalar(0.0)}};
  SgdState state;
  sgd_step(p, {{"w", Tensor::scalar(1.0)}}, {0.1, 0.9}, state);
  sgd_step(p, {{"w", Tensor::scalar(1.0)}}, {0.1, 0.9}, state);
  EXPECT_NEAR(p.at("w")[0], -0.29, 1e-15);
}

TEST(Sgd, NonFiniteGradientAbortsWithoutMutation) {
  ParameterSet p{{"a", Tensor::scalar(1.0)}, {"b", Tensor::scalar(2.0)}};
  SgdState state;
  EXPECT_THROW(sgd_step(p, {{"a", Tensor::scalar(1.0)}, {"b", Tensor::scalar(NAN)}}, {0.1, 0.0}, state),
               NumericError);
  EXPECT_EQ(p.at("a")[0], 1.0);
  EXPECT_TRUE(state.velocity.empty());
}

TEST(Determinism, IdenticalOutputsAndGradients) {
  const BackboneConfig config = BackboneConfig::desk_default();
  Rng r1(4), r2(4);
  const Tensor b1 = random_tensor({2, 3, 32, 32}, r1), b2 = random_tensor({2, 3, 32, 32}, r2);
  const Model m1 = build_model(config), m2 = build_model(config);
  auto f1 = record_forward(m1.params, config, b1);
  auto f2 = record_forward(m2.params, config, b2);
  const Tensor targets({2, 4}, {1, 0, 0, 0, 0, 0, 1, 0});
  f1.tape.hybrid_objective(f1.logits, {targets, std::nullopt, 1.0, 1.0, false});
  f2.tape.hybrid_objective(f2.logits, {targets, std::nullopt, 1.0, 1.0, false});
  EXPECT_EQ(f1.tape.value(f1.logits), f2.tape.value(f2.logits));
  const auto g1 = backward(f1.tape), g2 = backward(f2.tape);
  for (const auto& [name, g] : g1) EXPECT_EQ(g, g2.at(name));
}
