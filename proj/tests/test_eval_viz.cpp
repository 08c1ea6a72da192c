#include <gtest/gtest.h>

#include <cmath>

#include "rcalign/error.hpp"
#include "rcalign/eval.hpp"
#include "rcalign/viz.hpp"
#include "support/test_util.hpp"

namespace rcalign {
namespace {

using attention::Mechanism;
using testing::random_tensor;
using testing::values;

// Builds a [T x N] alignment that is one-hot along `path`.
Tensor one_hot_path(const std::vector<std::size_t>& path, std::size_t n) {
  Tensor a({path.size(), n});
  for (std::size_t t = 0; t < path.size(); ++t) a.at(t, path[t]) = 1.0;
  return a;
}

// Average-rank Spearman written from the definition.
double spearman_oracle(const std::vector<double>& x, const std::vector<double>& y) {
  auto ranks = [](const std::vector<double>& v) {
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      double less = 0, equal = 0;
      for (double w : v) {
        if (w < v[i]) ++less;
        if (w == v[i]) ++equal;
      }
      r[i] = less + (equal + 1) / 2;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += rx[i] / n, my += ry[i] / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

ModelConfig tiny_model(Mechanism m) {
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

Corpus tiny_corpus() {
  CorpusConfig c;
  c.n_utterances = 6;
  c.vocab_size = 6;
  c.feature_dim = 3;
  c.min_length = 2;
  c.max_length = 4;
  return gen_corpus(c);
}

TEST(AlignmentPath, DiagonalAndTies) {
  EXPECT_EQ(alignment_path(one_hot_path({0, 1, 2}, 3)), (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(alignment_path(Tensor::filled({4, 3}, 1.0 / 3)), (std::vector<std::size_t>{0, 0, 0, 0}));
}

TEST(AlignmentPath, MatchesRowScan) {
  Rng rng = Rng::stream(1, 0);
  const Tensor a = random_tensor({50, 7}, rng, 0, 1);
  const auto path = alignment_path(a);
  for (std::size_t t = 0; t < 50; ++t) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < 7; ++j)
      if (a.at(t, j) > a.at(t, best)) best = j;
    ASSERT_EQ(path[t], best);
  }
  const auto occ = occupancy(a);
  std::vector<std::size_t> counts(7, 0);
  for (std::size_t p : path) ++counts[p];
  EXPECT_EQ(occ, counts);
}

TEST(Defects, CleanDiagonalHasNone) {
  const UtteranceDefects d = detect_defects(one_hot_path({0, 0, 1, 1, 1, 2, 3}, 4), false);
  EXPECT_EQ(d.defects(), 0u);
  EXPECT_EQ(d.n_symbols, 4u);
  EXPECT_EQ(d.n_frames, 7u);
}

TEST(Defects, SkipAndRepeatByHand) {
  const UtteranceDefects skip = detect_defects(one_hot_path({0, 0, 2, 2}, 3), false);
  EXPECT_EQ(skip.skips, 1u);
  EXPECT_EQ(skip.repeats, 0u);
  const UtteranceDefects rep = detect_defects(one_hot_path({0, 1, 0, 1}, 3), false);
  EXPECT_GE(rep.repeats, 1u);
  EXPECT_EQ(rep.skips, 1u);  // symbol 2 never reached
  EXPECT_TRUE(detect_defects(one_hot_path({0, 1, 2}, 3), true).truncated);
}

TEST(Defects, CollapseNeedsLongBlurredRun) {
  auto with_blur = [](std::size_t blurred) {
    Tensor a({blurred + 4, 4});
    std::size_t t = 0;
    for (std::size_t j = 0; j < 2; ++j) a.at(t++, j) = 1.0;
    for (std::size_t k = 0; k < blurred; ++k, ++t)
      for (std::size_t j = 0; j < 4; ++j) a.at(t, j) = 0.25;
    a.at(t++, 2) = 1.0;
    a.at(t++, 3) = 1.0;
    return a;
  };
  EXPECT_EQ(detect_defects(with_blur(4), false).collapses, 0u);
  EXPECT_EQ(detect_defects(with_blur(5), false).collapses, 1u);
  EXPECT_EQ(detect_defects(with_blur(12), false).collapses, 1u);
  RobustnessThresholds strict;
  strict.collapse_min_rows = 3;
  EXPECT_EQ(detect_defects(with_blur(4), false, strict).collapses, 1u);
}

TEST(Robustness, ReportTotalsAndRate) {
  std::vector<SynthesisOutput> outs(3);
  outs[0].alignment = one_hot_path({0, 1, 2}, 3);
  outs[1].alignment = one_hot_path({0, 0, 2, 2}, 3);
  outs[2].alignment = one_hot_path({0, 1, 0, 1}, 2);
  outs[2].truncated = true;
  const RobustnessReport r = robustness_report(outs);
  EXPECT_EQ(r.total_symbols, 8u);
  EXPECT_EQ(r.skips, 1u);
  EXPECT_EQ(r.truncations, 1u);
  EXPECT_EQ(r.repeats, r.utterances[2].repeats);
  const double expected = static_cast<double>(r.skips + r.repeats + r.collapses + r.truncations) / 8.0;
  EXPECT_DOUBLE_EQ(r.defect_rate, std::min(1.0, expected));
  const auto j = to_json(r);
  EXPECT_EQ(j.at("skips"), r.skips);
  EXPECT_TRUE(j.contains("thresholds"));
}

TEST(Robustness, RateIsClampedToOne) {
  std::vector<SynthesisOutput> outs(1);
  outs[0].alignment = one_hot_path({1, 0, 1, 0, 1, 0, 1, 0}, 2);
  outs[0].truncated = true;
  EXPECT_EQ(robustness_report(outs).defect_rate, 1.0);
}

TEST(Spearman, KnownValueAndOracle) {
  const std::vector<double> x = {1, 2, 3, 4, 5}, y = {5, 6, 7, 8, 7};
  const Correlation c = spearman(x, y);
  ASSERT_TRUE(c.defined);
  EXPECT_NEAR(c.value, 0.8207826816681233, 1e-12);
  Rng rng = Rng::stream(2, 0);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.below(20);
    std::vector<double> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) a[i] = static_cast<double>(rng.below(5)), b[i] = static_cast<double>(rng.below(5));
    const Correlation s = spearman(a, b);
    const double ref = spearman_oracle(a, b);
    if (std::isnan(ref)) {
      EXPECT_FALSE(s.defined);
    } else {
      ASSERT_TRUE(s.defined);
      ASSERT_NEAR(s.value, ref, 1e-12);
    }
  }
}

TEST(Spearman, ConstantOrTinyInputIsUndefined) {
  const std::vector<double> k = {3, 3, 3}, v = {1, 2, 3};
  EXPECT_FALSE(spearman(k, v).defined);
  EXPECT_TRUE(std::isnan(spearman(k, v).value));
  EXPECT_FALSE(spearman(std::vector<double>{1}, std::vector<double>{2}).defined);
  EXPECT_NEAR(spearman(v, std::vector<double>{30, 20, 10}).value, -1.0, 1e-15);
}

TEST(Rhythm, ReportStructureAndScaledDurations) {
  const Model model(tiny_model(Mechanism::kRc), 3);
  Corpus c = tiny_corpus();
  const std::vector<double> scales = {0.5, 1.0, 2.0};
  EvalOptions opt;
  opt.max_steps = 20;
  opt.threads = 2;
  const RhythmReport r = rhythm_response(model, c.utterances, scales, opt);
  ASSERT_EQ(r.utterances.size(), c.utterances.size());
  EXPECT_EQ(r.scales, scales);
  EXPECT_EQ(r.mean_total_length.size(), 3u);
  for (std::size_t i = 0; i < c.utterances.size(); ++i) {
    EXPECT_EQ(r.utterances[i].supplied, c.utterances[i].durations);
    EXPECT_EQ(r.utterances[i].total_lengths.size(), 3u);
    std::size_t occ = 0;
    for (std::size_t x : r.utterances[i].realized) occ += x;
    EXPECT_EQ(occ, r.utterances[i].total_lengths[1]);
  }
  const auto j = to_json(r);
  EXPECT_TRUE(j.contains("spearman_at_unit_scale"));
}

TEST(Rhythm, ConstantDurationsGiveUndefinedCorrelation) {
  const Model model(tiny_model(Mechanism::kRc), 4);
  Corpus c = tiny_corpus();
  for (auto& u : c.utterances) u.durations.assign(u.num_symbols(), 5);
  EvalOptions opt;
  opt.max_steps = 10;
  const std::vector<double> scales = {1.0, 2.0};
  const RhythmReport r = rhythm_response(model, c.utterances, scales, opt);
  EXPECT_FALSE(r.correlation.defined);
  EXPECT_TRUE(std::isnan(r.correlation.value));
  EXPECT_TRUE(to_json(r).at("spearman_at_unit_scale").at("value").is_null());
}

TEST(Rhythm, PreconditionsAndCapability) {
  Corpus c = tiny_corpus();
  const std::vector<double> ok = {0.5, 1.0}, no_unit = {0.5, 2.0};
  EXPECT_THROW(rhythm_response(Model(tiny_model(Mechanism::kRc), 1), c.utterances, no_unit), Error);
  for (Mechanism m : {Mechanism::kLocationSensitive, Mechanism::kGmm, Mechanism::kForward}) {
    EXPECT_THROW(rhythm_response(Model(tiny_model(m), 1), c.utterances, ok), CapabilityError);
  }
}

TEST(SynthesizeAll, ThreadCountDoesNotChangeResults) {
  const Model model(tiny_model(Mechanism::kGmm), 5);
  const Corpus c = tiny_corpus();
  EvalOptions one, many;
  one.threads = 1;
  many.threads = 4;
  one.max_steps = many.max_steps = 15;
  const auto a = synthesize_all(model, c.utterances, one);
  const auto b = synthesize_all(model, c.utterances, many);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(values(a[i].frames), values(b[i].frames));
    EXPECT_EQ(values(a[i].alignment), values(b[i].alignment));
    EXPECT_EQ(a[i].truncated, b[i].truncated);
  }
}

TEST(LongSentences, LengthsScaleAndDeterminism) {
  const Corpus c = tiny_corpus();
  const auto a = make_long_sentences(c, 12, 10.0, 7);
  const auto b = make_long_sentences(c, 12, 10.0, 7);
  ASSERT_EQ(a.size(), 12u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_GE(a[i].num_symbols(), 20u);
    EXPECT_LE(a[i].num_symbols(), 40u);
    EXPECT_EQ(a[i].symbol_ids, b[i].symbol_ids);
    EXPECT_EQ(a[i].durations, b[i].durations);
    EXPECT_EQ(a[i].style_class, i % 3);
    std::size_t total = 0;
    for (std::size_t d : a[i].durations) total += d;
    EXPECT_EQ(total, a[i].num_frames());
    for (std::size_t id : a[i].symbol_ids) EXPECT_LT(id, 6u);
  }
  EXPECT_NE(make_long_sentences(c, 3, 10.0, 8)[0].symbol_ids, a[0].symbol_ids);
}

TEST(Threads, EnvironmentOverride) {
  EXPECT_EQ(resolve_threads(3), 3u);
  ::setenv("RC_ALIGN_THREADS", "2", 1);
  EXPECT_EQ(resolve_threads(0), 2u);
  ::unsetenv("RC_ALIGN_THREADS");
  EXPECT_GE(resolve_threads(0), 1u);
}

TEST(Csv, FormatAndRoundTrip) {
  const Tensor m = Tensor::matrix(2, 3, {0.5, 0.25, 0.25, 0.0, 1.0, 0.0});
  EXPECT_EQ(viz::matrix_csv(m), "0.500000,0.250000,0.250000\n0.000000,1.000000,0.000000\n");
  EXPECT_EQ(viz::parse_matrix_csv(viz::matrix_csv(m)), m);
  Rng rng = Rng::stream(3, 0);
  const Tensor r = random_tensor({9, 4}, rng, 0, 1);
  const Tensor back = viz::parse_matrix_csv(viz::matrix_csv(r));
  for (std::size_t i = 0; i < r.size(); ++i) EXPECT_NEAR(back[i], r[i], 5e-7);
}

TEST(Csv, RaggedAndNonNumericNameTheRow) {
  try {
    viz::parse_matrix_csv("0.1,0.9\n0.5\n");
    FAIL();
  } catch (const ValueError& e) {
    EXPECT_NE(std::string(e.what()).find("row 2"), std::string::npos) << e.what();
  }
  try {
    viz::parse_matrix_csv("0.1,0.9\n0.5,0.5\nx,1\n");
    FAIL();
  } catch (const ValueError& e) {
    EXPECT_NE(std::string(e.what()).find("row 3"), std::string::npos) << e.what();
  }
  EXPECT_THROW(viz::parse_matrix_csv(""), ValueError);
}

TEST(Pgm, HeaderAndPixelValues) {
  const Tensor a = Tensor::matrix(2, 3, {0.0, 0.5, 1.0, 0.2, 1.5, -0.1});
  const std::string pgm = viz::to_pgm(a);
  EXPECT_EQ(pgm.substr(0, 11), "P5\n3 2\n255\n");
  const viz::Image img = viz::parse_pnm(pgm);
  EXPECT_EQ(img.width, 3u);
  EXPECT_EQ(img.height, 2u);
  EXPECT_EQ(img.channels, 1u);
  const std::vector<int> expect = {0, 128, 255, 51, 255, 0};
  for (std::size_t k = 0; k < 6; ++k) EXPECT_EQ(img.at(k / 3, k % 3), expect[k]) << k;
}

TEST(Pgm, CsvToImagePixelsMatchRounding) {
  Rng rng = Rng::stream(4, 0);
  const Tensor a = viz::parse_matrix_csv(viz::matrix_csv(random_tensor({6, 5}, rng, 0, 1)));
  const viz::Image img = viz::parse_pnm(viz::to_pgm(a));
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(img.at(t, j), static_cast<int>(std::lround(255 * a.at(t, j))));
}

TEST(Ppm, BlueToRed) {
  const viz::Image img = viz::parse_pnm(viz::to_ppm(Tensor::matrix(1, 2, {0.0, 1.0})));
  EXPECT_EQ(img.channels, 3u);
  EXPECT_EQ(img.at(0, 0, 0), 0);
  EXPECT_EQ(img.at(0, 0, 2), 255);
  EXPECT_EQ(img.at(0, 1, 0), 255);
  EXPECT_EQ(img.at(0, 1, 2), 0);
}

TEST(Pnm, RejectsOtherFormats) {
  EXPECT_THROW(viz::parse_pnm("P2\n1 1\n255\n0"), FormatError);
  EXPECT_THROW(viz::parse_pnm("P5\n2 2\n255\nab"), FormatError);
  EXPECT_THROW(viz::parse_pnm("P5\n1 1\n65535\nab"), FormatError);
}

}  // namespace
}  // namespace rcalign
