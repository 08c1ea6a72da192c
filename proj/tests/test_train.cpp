#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <set>

#include "rcalign/checkpoint.hpp"
#include "rcalign/error.hpp"
#include "rcalign/ops.hpp"
#include "rcalign/train.hpp"
#include "support/test_util.hpp"

namespace rcalign {
namespace {

using attention::Mechanism;
using testing::random_tensor;
using testing::values;

CorpusConfig tiny_corpus_config() {
  CorpusConfig c;
  c.n_utterances = 10;
  c.vocab_size = 6;
  c.feature_dim = 3;
  c.min_length = 2;
  c.max_length = 3;
  c.seed = 5;
  return c;
}

const Corpus& tiny_corpus() {
  static const Corpus corpus = gen_corpus(tiny_corpus_config());
  return corpus;
}

ModelConfig tiny_model(Mechanism m = Mechanism::kRc) {
  ModelConfig c;
  c.vocab_size = 6;
  c.d_embed = 4;
  c.d_enc = 6;
  c.d_a = 5;
  c.d_dur = 3;
  c.d_style = 3;
  c.n_style_tokens = 4;
  c.d_prenet = 4;
  c.d_dec = 6;
  c.feature_dim = 3;
  c.location_filters = 2;
  c.location_kernel = 3;
  c.mechanism = m;
  return c;
}

TrainConfig short_run(std::size_t steps) {
  TrainConfig t;
  t.steps = steps;
  t.batch_size = 3;
  t.seed = 11;
  return t;
}

double softplus(double x) { return std::log1p(std::exp(x)); }

TEST(StopTargets, OneOnFinalFrame) {
  EXPECT_EQ(values(stop_targets(3)), (std::vector<double>{0, 0, 1}));
  EXPECT_EQ(values(stop_targets(1)), (std::vector<double>{1}));
}

TEST(Loss, PerfectPredictionIsNearZero) {
  Rng rng = Rng::stream(1, 0);
  SynthesisOutput out;
  out.frames = random_tensor({4, 3}, rng);
  out.stop_logits = Tensor::vector({-20, -20, -20, 20});
  out.alignment = Tensor({4, 2});
  EXPECT_LT(loss(out, out.frames, stop_targets(4)), 1e-6);
}

TEST(Loss, HandComputedTwoFrameExample) {
  SynthesisOutput out;
  out.frames = Tensor::matrix(2, 2, {1.0, 2.0, 0.0, 1.5});
  out.stop_logits = Tensor::vector({0.5, -1.0});
  const Tensor target = Tensor::matrix(2, 2, {0.0, 2.0, 1.0, 1.0});
  // MSE: (1 + 0 + 1 + 0.25) / 4. BCE with labels [0, 1]:
  // (softplus(0.5) + softplus(1.0)) / 2.
  const double expected = 2.25 / 4.0 + (softplus(0.5) + softplus(1.0)) / 2.0;
  EXPECT_NEAR(loss(out, target, stop_targets(2)), expected, 1e-12);
  // Positive weight 4 scales only the final-frame term.
  const double weighted = 2.25 / 4.0 + (softplus(0.5) + 4.0 * softplus(1.0)) / 2.0;
  EXPECT_NEAR(loss(out, target, stop_targets(2), 4.0), weighted, 1e-12);
}

TEST(Loss, NonNegativeProperty) {
  Rng rng = Rng::stream(2, 0);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t T = 1 + rng.below(6);
    SynthesisOutput out;
    out.frames = random_tensor({T, 3}, rng, -5, 5);
    out.stop_logits = random_tensor({T}, rng, -30, 30);
    ASSERT_GE(loss(out, random_tensor({T, 3}, rng, -5, 5), stop_targets(T)), 0.0);
  }
}

TEST(Loss, LengthMismatchIsUsageError) {
  SynthesisOutput out;
  out.frames = Tensor({3, 2});
  out.stop_logits = Tensor({3});
  EXPECT_THROW(loss(out, Tensor({4, 2}), stop_targets(4)), UsageError);
}

TEST(Loss, GraphAndValueFormsAgree) {
  const Model model(tiny_model(), 3);
  const Utterance& u = tiny_corpus().utterances[0];
  Tape tape;
  const ModelVars v = bind(model, tape, false);
  const TeacherForcedGraph g = teacher_forced(model, v, u.symbol_ids, u.durations, u.style_class, u.frames, nullptr);
  const double a = loss(g, u.frames, stop_targets(u.num_frames()), 3.0).value()[0];
  const double b = loss(to_output(g), u.frames, stop_targets(u.num_frames()), 3.0);
  EXPECT_NEAR(a, b, 1e-12);
}

TEST(TrainConfig, ValidationAndJson) {
  TrainConfig t;
  t.learning_rate = 0.0;
  EXPECT_NO_THROW(t.validate());
  t.learning_rate = -1e-3;
  EXPECT_THROW(t.validate(), ConfigError);
  t = TrainConfig{};
  t.teacher_forcing = false;
  EXPECT_THROW(t.validate(), ConfigError);
  t = TrainConfig{};
  t.batch_size = 0;
  t.steps = 0;
  try {
    t.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("batch_size"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("steps"), std::string::npos);
  }
  const TrainConfig d = short_run(7);
  EXPECT_EQ(to_json(train_config_from_json(to_json(d))), to_json(d));
  EXPECT_THROW(train_config_from_json(nlohmann::json{{"stepz", 3}}), ConfigError);
}

TEST(BatchIndices, PureFunctionCoveringTrainSplitPerEpoch) {
  const Corpus& c = tiny_corpus();
  const std::set<std::size_t> train(c.train_indices.begin(), c.train_indices.end());
  const std::size_t n = c.train_indices.size();
  ASSERT_EQ(n, 9u);
  for (std::size_t step = 0; step < 6; ++step) {
    EXPECT_EQ(batch_indices(c, 4, step, 3), batch_indices(c, 4, step, 3));
  }
  // Three batches of 3 make one epoch over the 9 training utterances.
  std::multiset<std::size_t> epoch;
  for (std::size_t step = 0; step < 3; ++step) {
    for (std::size_t i : batch_indices(c, 4, step, 3)) {
      EXPECT_TRUE(train.count(i)) << i;
      epoch.insert(i);
    }
  }
  EXPECT_EQ(std::set<std::size_t>(epoch.begin(), epoch.end()), train);
  EXPECT_EQ(epoch.size(), n);
  EXPECT_NE(batch_indices(c, 4, 0, 3), batch_indices(c, 5, 0, 3));
}

TEST(BatchIndices, EmptyTrainSplitFallsBackToAllUtterances) {
  Corpus c = tiny_corpus();
  c.train_indices.clear();
  for (std::size_t i : batch_indices(c, 1, 0, 10)) EXPECT_LT(i, c.utterances.size());
}

TEST(Train, SameSeedIsBitIdentical) {
  const TrainResult a = train(tiny_model(), tiny_corpus(), short_run(4));
  const TrainResult b = train(tiny_model(), tiny_corpus(), short_run(4));
  EXPECT_EQ(a.model.params(), b.model.params());
  EXPECT_EQ(a.losses, b.losses);
  EXPECT_EQ(serialize_checkpoint({a.model, TrainingState{short_run(4), a.optimizer, a.losses}, {}}),
            serialize_checkpoint({b.model, TrainingState{short_run(4), b.optimizer, b.losses}, {}}));
}

TEST(Train, ZeroLearningRateLeavesParametersAndLossFlat) {
  ModelConfig mc = tiny_model();
  mc.prenet_dropout = 0.0;
  TrainConfig tc = short_run(4);
  tc.learning_rate = 0.0;
  tc.batch_size = 9;  // whole training split every step
  const TrainResult r = train(mc, tiny_corpus(), tc);
  EXPECT_EQ(r.model.params(), Model(mc, tc.seed).params());
  ASSERT_EQ(r.losses.size(), 4u);
  for (double l : r.losses) EXPECT_NEAR(l, r.losses[0], 1e-12);
}

TEST(Train, FirstAdamStepMatchesHandUpdate) {
  const ModelConfig mc = tiny_model();
  TrainConfig tc = short_run(1);
  tc.grad_clip_norm = 0.5;
  const Model init(mc, tc.seed);
  const auto idx = batch_indices(tiny_corpus(), tc.seed, 0, tc.batch_size);
  const BatchGradient g = batch_gradient(init, tiny_corpus(), idx, tc.seed, 0, tc.stop_pos_weight);
  double norm2 = 0;
  for (const auto& gi : g.grads)
    for (double x : gi) norm2 += x * x;
  const double scale = std::min(1.0, tc.grad_clip_norm / std::sqrt(norm2));
  ASSERT_LT(scale, 1.0) << "clipping should be active for this check";

  const TrainResult r = train(mc, tiny_corpus(), tc);
  EXPECT_DOUBLE_EQ(r.losses[0], g.loss);
  for (std::size_t i = 0; i < init.params().size(); ++i) {
    for (std::size_t k = 0; k < init.params().at(i).size(); ++k) {
      const double gc = g.grads[i][k] * scale;
      // Bias-corrected first step: m_hat = g, v_hat = g^2.
      const double expect = init.params().at(i)[k] - tc.learning_rate * gc / (std::abs(gc) + tc.eps);
      ASSERT_NEAR(r.model.params().at(i)[k], expect, 1e-12) << init.params().name(i);
      ASSERT_NEAR(r.optimizer.m[i][k], (1 - tc.beta1) * gc, 1e-15);
      ASSERT_NEAR(r.optimizer.v[i][k], (1 - tc.beta2) * gc * gc, 1e-15);
    }
  }
}

TEST(Train, ResumeContinuesBitIdentically) {
  const TrainResult full = train(tiny_model(), tiny_corpus(), short_run(6));
  std::optional<Checkpoint> mid;
  TrainOptions opts;
  TrainConfig tc = short_run(6);
  tc.checkpoint_every = 3;
  opts.on_checkpoint = [&](const Model& m, const AdamState& a, const std::vector<double>& l) {
    if (a.step == 3) mid = Checkpoint{m, TrainingState{tc, a, l}, {}};
  };
  train(tiny_model(), tiny_corpus(), tc, opts);
  ASSERT_TRUE(mid.has_value());
  const Checkpoint loaded = deserialize_checkpoint(serialize_checkpoint(*mid));
  const TrainResult resumed = resume_training(loaded.model, loaded.training->optimizer, loaded.training->losses,
                                              tiny_corpus(), tc);
  EXPECT_EQ(resumed.model.params(), full.model.params());
  EXPECT_EQ(resumed.losses, full.losses);
}

TEST(Train, CheckpointCallbackCadence) {
  TrainConfig tc = short_run(5);
  tc.checkpoint_every = 2;
  std::vector<std::size_t> seen;
  std::vector<std::size_t> steps;
  TrainOptions opts;
  opts.on_checkpoint = [&](const Model&, const AdamState& a, const std::vector<double>&) { seen.push_back(a.step); };
  opts.on_step = [&](std::size_t s, double) { steps.push_back(s); };
  train(tiny_model(), tiny_corpus(), tc, opts);
  EXPECT_EQ(seen, (std::vector<std::size_t>{2, 4, 5}));
  EXPECT_EQ(steps, (std::vector<std::size_t>{1, 2, 3, 4, 5}));
}

TEST(Train, NonFiniteParameterIsNamed) {
  Model model(tiny_model(), 1);
  model.params().at("frame.b")[0] = std::numeric_limits<double>::quiet_NaN();
  AdamState adam;
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    adam.m.push_back(Tensor(model.params().at(i).shape()));
    adam.v.push_back(Tensor(model.params().at(i).shape()));
  }
  try {
    resume_training(model, adam, {}, tiny_corpus(), short_run(2));
    FAIL();
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("step 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("frame.b"), std::string::npos) << msg;
  }
}

TEST(Train, IncompatibleCorpusIsConfigError) {
  ModelConfig mc = tiny_model();
  mc.feature_dim = 4;
  EXPECT_THROW(train(mc, tiny_corpus(), short_run(1)), ConfigError);
  mc = tiny_model();
  mc.vocab_size = 3;
  EXPECT_THROW(train(mc, tiny_corpus(), short_run(1)), ConfigError);
}

TEST(EvaluateLoss, IsMeanOfTeacherForcedLosses) {
  const Model model(tiny_model(Mechanism::kGmm), 2);
  const Corpus& c = tiny_corpus();
  const std::vector<std::size_t> idx = {0, 3, 7};
  double total = 0;
  for (std::size_t i : idx) {
    const Utterance& u = c.utterances[i];
    total += loss(synthesize_teacher_forced(model, u.symbol_ids, u.durations, u.style_class, u.frames), u.frames,
                  stop_targets(u.num_frames()));
  }
  EXPECT_NEAR(evaluate_loss(model, c, idx), total / 3.0, 1e-12);
}

class CheckpointFormat : public ::testing::Test {
 protected:
  void SetUp() override {
    const TrainResult r = train(tiny_model(Mechanism::kLocationSensitive), tiny_corpus(), short_run(2));
    ckpt = Checkpoint{r.model, TrainingState{short_run(2), r.optimizer, r.losses}, {{"corpus_hash", "abc"}}};
    bytes = serialize_checkpoint(ckpt);
  }
  Checkpoint ckpt{Model::empty(tiny_model())};
  std::string bytes;
};

TEST_F(CheckpointFormat, RoundTripIsBitIdentical) {
  const Checkpoint back = deserialize_checkpoint(bytes);
  EXPECT_EQ(back.model.params(), ckpt.model.params());
  EXPECT_EQ(to_json(back.model.config()), to_json(ckpt.model.config()));
  ASSERT_TRUE(back.training.has_value());
  EXPECT_EQ(back.training->losses, ckpt.training->losses);
  EXPECT_EQ(back.training->optimizer.step, 2u);
  EXPECT_EQ(back.training->optimizer.m, ckpt.training->optimizer.m);
  EXPECT_EQ(back.metadata, ckpt.metadata);
  EXPECT_EQ(serialize_checkpoint(back), bytes);
}

TEST_F(CheckpointFormat, FileRoundTrip) {
  const std::string path = ::testing::TempDir() + "/train_ckpt_rt.rcat";
  save_checkpoint(ckpt, path);
  EXPECT_EQ(load_checkpoint(path).model.params(), ckpt.model.params());
}

TEST_F(CheckpointFormat, ModelOnlyCheckpoint) {
  const Checkpoint bare{ckpt.model, std::nullopt, {}};
  const Checkpoint back = deserialize_checkpoint(serialize_checkpoint(bare));
  EXPECT_FALSE(back.training.has_value());
  EXPECT_EQ(back.model.params(), ckpt.model.params());
}

TEST_F(CheckpointFormat, BadMagicAndVersion) {
  std::string b = bytes;
  b[1] = 'Z';
  EXPECT_THROW(deserialize_checkpoint(b), MagicError);
  b = bytes;
  b[4] = 7;
  EXPECT_THROW(deserialize_checkpoint(b), VersionError);
  EXPECT_THROW(deserialize_checkpoint("RC"), FormatError);
}

TEST_F(CheckpointFormat, TruncationIsReported) {
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 8)), TruncatedFileError);
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, 20)), FormatError);
}

TEST_F(CheckpointFormat, ShapeMismatchNamesTensor) {
  ModelConfig other = tiny_model(Mechanism::kLocationSensitive);
  other.d_enc = 8;
  try {
    deserialize_checkpoint(bytes, other);
    FAIL();
  } catch (const ShapeMismatchError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("tensor '"), std::string::npos) << msg;
    EXPECT_NE(msg.find("text.lstm"), std::string::npos) << msg;
  }
  // A different mechanism needs tensors the checkpoint does not have.
  EXPECT_THROW(deserialize_checkpoint(bytes, tiny_model(Mechanism::kRc)), ShapeMismatchError);
}

}  // namespace
}  // namespace rcalign
