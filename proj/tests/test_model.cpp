#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "rcalign/error.hpp"
#include "rcalign/model.hpp"
#include "rcalign/ops.hpp"
#include "rcalign/train.hpp"
#include "support/test_util.hpp"

namespace rcalign {
namespace {

using attention::Mechanism;
using testing::random_tensor;
using testing::values;

ModelConfig tiny_config(Mechanism m) {
  ModelConfig c;
  c.vocab_size = 7;
  c.d_embed = 4;
  c.d_enc = 6;
  c.d_a = 5;
  c.d_dur = 3;
  c.d_style = 3;
  c.n_style_tokens = 4;
  c.d_prenet = 4;
  c.d_dec = 6;
  c.feature_dim = 3;
  c.max_decoder_steps = 40;
  c.location_filters = 2;
  c.location_kernel = 3;
  c.mechanism = m;
  return c;
}

const std::vector<std::size_t> kIds = {1, 4, 2, 6};
const std::vector<std::size_t> kDurs = {2, 3, 1, 5};

bool rows_normalized(const Tensor& a, double tol) {
  for (std::size_t t = 0; t < a.rows(); ++t) {
    double s = 0;
    for (std::size_t j = 0; j < a.cols(); ++j) {
      if (a.at(t, j) < 0) return false;
      s += a.at(t, j);
    }
    if (std::abs(s - 1.0) > tol) return false;
  }
  return true;
}

TEST(QuantizeDuration, BoundaryTable) {
  const std::vector<std::pair<std::size_t, std::size_t>> table = {
      {1, 0}, {4, 0}, {5, 1}, {8, 1}, {9, 2}, {10, 2}, {16, 2}, {17, 3}, {32, 3}, {33, 4}, {1000, 4}};
  for (auto [frames, bucket] : table) EXPECT_EQ(quantize_duration(frames), bucket) << frames;
  EXPECT_THROW(quantize_duration(0), ValueError);
}

TEST(QuantizeDuration, MonotoneProperty) {
  for (std::size_t buckets : {1u, 3u, 5u, 8u}) {
    std::size_t prev = 0;
    for (std::size_t f = 1; f < 2000; ++f) {
      const std::size_t b = quantize_duration(f, buckets);
      ASSERT_GE(b, prev);
      ASSERT_LT(b, buckets);
      prev = b;
    }
  }
}

TEST(ModelConfig, JsonRoundTripAndStrictKeys) {
  ModelConfig c = tiny_config(Mechanism::kGmm);
  const ModelConfig back = model_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  nlohmann::json j = to_json(c);
  j["d_typo"] = 3;
  EXPECT_THROW(model_config_from_json(j), ConfigError);
  j = to_json(c);
  j["d_enc"] = 0;
  EXPECT_THROW(model_config_from_json(j), ConfigError);
  j = to_json(c);
  j["mechanism"] = "tacotron";
  EXPECT_THROW(model_config_from_json(j), ConfigError);
}

TEST(ModelInit, DeterministicAndSeedSensitive) {
  const Model a(tiny_config(Mechanism::kRc), 3), b(tiny_config(Mechanism::kRc), 3), c(tiny_config(Mechanism::kRc), 4);
  EXPECT_EQ(a.params(), b.params());
  EXPECT_FALSE(a.params() == c.params());
}

TEST(TextEncode, ShapeDeterminismAndSensitivity) {
  const Model model(tiny_config(Mechanism::kRc), 1);
  Tape tape;
  const ModelVars v = bind(model, tape, false);
  const auto m1 = text_encode(model, v, kIds);
  const auto m2 = text_encode(model, v, kIds);
  EXPECT_EQ(m1.length, 4u);
  EXPECT_EQ(m1.hidden.shape(), (Shape{4, 6}));
  EXPECT_EQ(values(m1.hidden.value()), values(m2.hidden.value()));
  std::vector<std::size_t> swapped = kIds;
  std::swap(swapped[0], swapped[1]);
  EXPECT_NE(values(text_encode(model, v, swapped).hidden.value()), values(m1.hidden.value()));
  EXPECT_THROW(text_encode(model, v, std::vector<std::size_t>{}), UsageError);
  EXPECT_THROW(text_encode(model, v, std::vector<std::size_t>{1, 7}), IndexError);
}

TEST(DurationEncode, BucketRowsAndErrors) {
  const Model model(tiny_config(Mechanism::kRc), 1);
  Tape tape;
  const ModelVars v = bind(model, tape, false);
  const Tensor e = duration_encode(model, v, std::vector<std::size_t>{5, 5, 5}).value();
  for (std::size_t d = 0; d < 3; ++d) {
    EXPECT_EQ(e.at(0, d), e.at(1, d));
    EXPECT_EQ(e.at(1, d), e.at(2, d));
  }
  const Tensor& table = model.params().at("duration.embedding");
  const Tensor f = duration_encode(model, v, std::vector<std::size_t>{10, 500}).value();
  for (std::size_t d = 0; d < 3; ++d) {
    EXPECT_EQ(f.at(0, d), table.at(2, d));
    EXPECT_EQ(f.at(1, d), table.at(4, d));
  }
  EXPECT_THROW(duration_encode(model, v, std::vector<std::size_t>{3, 0}), ValueError);
}

TEST(StyleEncode, ClassAndReferenceModes) {
  const Model model(tiny_config(Mechanism::kRc), 2);
  Tape tape;
  const ModelVars v = bind(model, tape, false);
  EXPECT_EQ(values(style_encode_class(model, v, 1).embedding.value()),
            values(style_encode_class(model, v, 1).embedding.value()));
  EXPECT_THROW(style_encode_class(model, v, 3), IndexError);

  Rng rng = Rng::stream(2, 0);
  const Tensor& tokens = model.params().at("style.tokens");
  double max_norm = 0;
  for (std::size_t k = 0; k < tokens.rows(); ++k) {
    double n2 = 0;
    for (double x : tokens.row(k)) n2 += x * x;
    max_norm = std::max(max_norm, std::sqrt(n2));
  }
  for (int trial = 0; trial < 20; ++trial) {
    const StyleEncoding s = style_encode_reference(model, v, random_tensor({5 + static_cast<std::size_t>(trial), 3}, rng, -4, 4));
    ASSERT_TRUE(s.token_weights.has_value());
    double total = 0;
    for (double w : s.token_weights->value().data()) total += w;
    EXPECT_NEAR(total, 1.0, 1e-12);
    double n2 = 0;
    for (double x : s.embedding.value().data()) n2 += x * x;
    EXPECT_LE(std::sqrt(n2), max_norm * 1.0001);
  }
  EXPECT_THROW(style_encode_reference(model, v, Tensor({0, 3})), UsageError);
}

TEST(DecoderStep, DeterministicNormalizedAndContextSensitive) {
  const Model model(tiny_config(Mechanism::kRc), 3);
  Tape tape;
  const ModelVars v = bind(model, tape, false);
  const auto memory = text_encode(model, v, kIds);
  Var dur = duration_encode(model, v, kDurs);
  Var style = style_encode_class(model, v, 0).embedding;
  const auto cfg = model.config().attention_config();
  DecoderState s = init_decoder_state(model, tape, 4);
  Rng rng = Rng::stream(3, 1);
  s.context = tape.constant(random_tensor({6}, rng));
  s.prev_frame = tape.constant(random_tensor({3}, rng));
  const auto a = decoder_step(model, v, cfg, s, memory, dur, style, std::nullopt, nullptr);
  const auto b = decoder_step(model, v, cfg, s, memory, dur, style, std::nullopt, nullptr);
  EXPECT_EQ(values(a.frame.value()), values(b.frame.value()));
  EXPECT_EQ(a.stop_logit.value()[0], b.stop_logit.value()[0]);
  double total = 0;
  for (double x : a.state.attention.prev_alignment.value().data()) total += x;
  EXPECT_NEAR(total, 1.0, 1e-6);
  EXPECT_EQ(a.state.step_index, 1u);

  DecoderState zeroed = s;
  zeroed.context = tape.constant(Tensor({6}));
  const auto c = decoder_step(model, v, cfg, zeroed, memory, dur, style, std::nullopt, nullptr);
  EXPECT_NE(values(c.frame.value()), values(a.frame.value()));

  // Teacher frame becomes the next step's input.
  Var teacher = tape.constant(random_tensor({3}, rng));
  const auto t = decoder_step(model, v, cfg, s, memory, dur, style, teacher, nullptr);
  EXPECT_EQ(values(t.state.prev_frame.value()), values(teacher.value()));
  EXPECT_EQ(values(a.state.prev_frame.value()), values(a.frame.value()));
}

class EachMechanism : public ::testing::TestWithParam<Mechanism> {};

TEST_P(EachMechanism, TeacherForcedShapesAndRows) {
  const Model model(tiny_config(GetParam()), 4);
  Rng rng = Rng::stream(4, 0);
  const Tensor targets = random_tensor({11, 3}, rng);
  const SynthesisOutput out = synthesize_teacher_forced(model, kIds, kDurs, std::size_t{1}, targets);
  EXPECT_EQ(out.frames.shape(), (Shape{11, 3}));
  EXPECT_EQ(out.stop_logits.shape(), (Shape{11}));
  EXPECT_EQ(out.alignment.shape(), (Shape{11, 4}));
  EXPECT_EQ(out.omegas.has_value(), GetParam() == Mechanism::kRc);
  if (out.omegas) EXPECT_EQ(out.omegas->shape(), (Shape{11, 4}));
  EXPECT_TRUE(rows_normalized(out.alignment, 1e-9));
  EXPECT_FALSE(out.truncated);
}

TEST_P(EachMechanism, FreeRunShapesAndSingleSymbol) {
  const Model model(tiny_config(GetParam()), 5);
  const SynthesisOutput out = synthesize_free_run(model, kIds, kDurs, std::size_t{2}, FreeRunOptions{15, std::nullopt});
  const std::size_t T = out.frames.rows();
  EXPECT_GE(T, 1u);
  EXPECT_LE(T, 15u);
  EXPECT_EQ(out.alignment.shape(), (Shape{T, 4}));
  EXPECT_EQ(out.stop_logits.size(), T);
  EXPECT_EQ(out.truncated, T == 15 && out.stop_logits[T - 1] <= 0.0);
  EXPECT_TRUE(rows_normalized(out.alignment, 1e-9));

  const SynthesisOutput one = synthesize_free_run(model, std::vector<std::size_t>{3}, std::vector<std::size_t>{4},
                                                  std::size_t{0}, FreeRunOptions{10, std::nullopt});
  for (std::size_t t = 0; t < one.alignment.rows(); ++t) EXPECT_DOUBLE_EQ(one.alignment.at(t, 0), 1.0);
}

TEST_P(EachMechanism, GradientsOfLossMatchFiniteDifferences) {
  const Model base(tiny_config(GetParam()), 6);
  Rng rng = Rng::stream(6, 1);
  const Tensor targets = random_tensor({6, 3}, rng);
  const Tensor stops = stop_targets(6);
  const std::vector<std::size_t> ids = {2, 5, 1}, durs = {2, 3, 1};

  auto loss_of = [&](const Model& m, std::vector<std::vector<double>>* grads) {
    Tape tape;
    const ModelVars v = bind(m, tape, grads != nullptr);
    Var l = loss(teacher_forced(m, v, ids, durs, std::size_t{1}, targets, nullptr), targets, stops);
    if (grads) {
      tape.backward(l);
      for (const Var& p : v.all) {
        auto g = tape.grad(p);
        grads->emplace_back(g.begin(), g.end());
        if (grads->back().empty()) grads->back().assign(p.size(), 0.0);
      }
    }
    return l.value()[0];
  };

  std::vector<std::vector<double>> analytic;
  loss_of(base, &analytic);
  Model probe = base;
  const double eps = 1e-5;
  double worst = 0;
  for (std::size_t i = 0; i < probe.params().size(); ++i) {
    Tensor& p = probe.params().at(i);
    for (int k = 0; k < 5; ++k) {
      const std::size_t idx = rng.below(p.size());
      const double orig = p[idx];
      p[idx] = orig + eps;
      const double up = loss_of(probe, nullptr);
      p[idx] = orig - eps;
      const double down = loss_of(probe, nullptr);
      p[idx] = orig;
      const double numeric = (up - down) / (2 * eps);
      const double a = analytic[i][idx];
      // Entries with gradients below 1e-6 are dominated by cancellation noise.
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
      EXPECT_LE(rel, 1e-4) << probe.params().name(i) << "[" << idx << "] analytic " << a << " numeric " << numeric;
      worst = std::max(worst, rel);
    }
  }
  RecordProperty("worst_rel_error", std::to_string(worst));
}

INSTANTIATE_TEST_SUITE_P(Mechanisms, EachMechanism,
                         ::testing::Values(Mechanism::kLocationSensitive, Mechanism::kGmm, Mechanism::kForward,
                                           Mechanism::kRc),
                         [](const auto& info) { return std::string(attention::mechanism_name(info.param)); });

TEST(FreeRun, FrozenGateTruncatesAtFirstPosition) {
  Model model(tiny_config(Mechanism::kRc), 7);
  for (double& w : model.params().at("attention.gate.w").data()) w = 0.0;
  model.params().at("attention.gate.b")[0] = 20.0;
  for (double& w : model.params().at("stop.w").data()) w = 0.0;
  model.params().at("stop.b")[0] = -20.0;
  const SynthesisOutput out = synthesize_free_run(model, kIds, kDurs, std::size_t{0}, FreeRunOptions{25, std::nullopt});
  EXPECT_TRUE(out.truncated);
  EXPECT_EQ(out.frames.rows(), 25u);
  for (std::size_t t = 0; t < 25; ++t) EXPECT_GT(out.alignment.at(t, 0), 0.9999);
}

TEST(FreeRun, StopsWhenStopFires) {
  Model model(tiny_config(Mechanism::kRc), 8);
  for (double& w : model.params().at("stop.w").data()) w = 0.0;
  model.params().at("stop.b")[0] = 5.0;
  const SynthesisOutput out = synthesize_free_run(model, kIds, kDurs, std::size_t{0});
  EXPECT_FALSE(out.truncated);
  EXPECT_EQ(out.frames.rows(), 1u);
}

TEST(FreeRun, RcExpectedPositionIncrementsInUnitInterval) {
  const Model model(tiny_config(Mechanism::kRc), 9);
  const SynthesisOutput out = synthesize_free_run(model, std::vector<std::size_t>{0, 1, 2, 3, 4, 5},
                                                  std::vector<std::size_t>{2, 2, 2, 2, 2, 2}, std::size_t{0},
                                                  FreeRunOptions{30, std::nullopt});
  double prev = 0;
  for (std::size_t t = 0; t < out.alignment.rows(); ++t) {
    double m = 0;
    for (std::size_t j = 0; j < 6; ++j) m += static_cast<double>(j) * out.alignment.at(t, j);
    EXPECT_GE(m - prev, -1e-9);
    EXPECT_LE(m - prev, 1 + 1e-9);
    prev = m;
  }
}

TEST(FreeRun, DurationPathwayChangesGatesAtThatPosition) {
  const Model model(tiny_config(Mechanism::kRc), 10);
  Rng rng = Rng::stream(10, 0);
  const Tensor targets = random_tensor({1, 3}, rng);
  const auto a = synthesize_teacher_forced(model, kIds, std::vector<std::size_t>{2, 3, 1, 5}, std::size_t{0}, targets);
  const auto b = synthesize_teacher_forced(model, kIds, std::vector<std::size_t>{2, 20, 1, 5}, std::size_t{0}, targets);
  EXPECT_NE(a.omegas->at(0, 1), b.omegas->at(0, 1));
  EXPECT_EQ(a.omegas->at(0, 0), b.omegas->at(0, 0));
  EXPECT_EQ(a.omegas->at(0, 2), b.omegas->at(0, 2));
}

TEST(Synthesis, InputValidation) {
  const Model model(tiny_config(Mechanism::kRc), 11);
  EXPECT_THROW(synthesize_free_run(model, kIds, std::vector<std::size_t>{1, 2}, std::size_t{0}), Error);
  EXPECT_THROW(synthesize_teacher_forced(model, kIds, kDurs, std::size_t{0}, Tensor({3, 5})), DimensionError);
  EXPECT_THROW(synthesize_free_run(model, kIds, kDurs, std::size_t{0}, FreeRunOptions{0, std::nullopt}), ConfigError);
}

TEST(Synthesis, ForwardTransitionOverrideIsValidated) {
  const Model model(tiny_config(Mechanism::kForward), 12);
  EXPECT_THROW(synthesize_free_run(model, kIds, kDurs, std::size_t{0}, FreeRunOptions{5, 1.5}), ConfigError);
  const auto slow = synthesize_free_run(model, kIds, kDurs, std::size_t{0}, FreeRunOptions{5, 0.01});
  const auto fast = synthesize_free_run(model, kIds, kDurs, std::size_t{0}, FreeRunOptions{5, 0.99});
  EXPECT_NE(values(slow.alignment), values(fast.alignment));
}

}  // namespace
}  // namespace rcalign
