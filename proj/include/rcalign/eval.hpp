#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "json.hpp"
#include "rcalign/corpus.hpp"
#include "rcalign/model.hpp"

namespace rcalign {

// Per-row argmax of a [T x N] alignment; ties go to the lower index.
std::vector<std::size_t> alignment_path(const Tensor& alignment);

// Rows-per-symbol counts of the argmax path (sums to T).
std::vector<std::size_t> occupancy(const Tensor& alignment);

struct RobustnessThresholds {
  std::size_t collapse_min_rows = 5;
  // Row entropy (nats) above this fraction of ln(N) counts as blurred.
  double collapse_entropy_fraction = 0.8;
};

struct UtteranceDefects {
  std::size_t n_symbols = 0;
  std::size_t n_frames = 0;
  std::size_t skips = 0;      // symbols never visited by the argmax path
  std::size_t repeats = 0;    // steps where the path moves backwards
  std::size_t collapses = 0;  // maximal runs of blurred rows
  bool truncated = false;

  std::size_t defects() const { return skips + repeats + collapses + (truncated ? 1 : 0); }
};

struct RobustnessReport {
  RobustnessThresholds thresholds;
  std::vector<UtteranceDefects> utterances;
  std::size_t skips = 0;
  std::size_t repeats = 0;
  std::size_t collapses = 0;
  std::size_t truncations = 0;
  std::size_t total_symbols = 0;
  // min(1, (skips + repeats + collapses + truncations) / total_symbols)
  double defect_rate = 0.0;
};

UtteranceDefects detect_defects(const Tensor& alignment, bool truncated, const RobustnessThresholds& th = {});
RobustnessReport robustness_report(std::span<const SynthesisOutput> outputs, const RobustnessThresholds& th = {});

// Spearman rank correlation with average ranks for ties. Undefined (constant
// input or fewer than two points) yields NaN with `defined` false.
struct Correlation {
  double value = 0.0;
  bool defined = false;
};
Correlation spearman(std::span<const double> x, std::span<const double> y);

struct RhythmUtterance {
  std::vector<std::size_t> supplied;   // durations at scale 1
  std::vector<std::size_t> realized;   // argmax occupancy at scale 1
  std::vector<std::size_t> total_lengths;  // decoded frames per scale
  std::vector<bool> truncated;             // per scale
  Correlation correlation;
};

struct RhythmReport {
  std::vector<double> scales;
  std::vector<RhythmUtterance> utterances;
  // Pooled over all symbols of all utterances at scale 1.
  Correlation correlation;
  std::vector<double> mean_total_length;  // per scale
  bool mean_lengths_nondecreasing = false;
  // Share of utterances whose decoded length at the largest scale exceeds the
  // length at the smallest.
  double longer_at_max_scale = 0.0;
};

struct EvalOptions {
  std::optional<std::size_t> max_steps;
  // Worker threads; 0 reads RC_ALIGN_THREADS (default: hardware threads). Results are merged
  // in input order.
  std::size_t threads = 0;
};

std::size_t resolve_threads(std::size_t requested);

// Free-run synthesis of every utterance with its own durations and style.
std::vector<SynthesisOutput> synthesize_all(const Model& model, std::span<const Utterance> utterances,
                                            const EvalOptions& options = {});

// Durations become ceil(k * d) for each scale k; scales must include 1.0.
// Only the RC mechanism consumes durations, others raise CapabilityError.
RhythmReport rhythm_response(const Model& model, std::span<const Utterance> utterances,
                             std::span<const double> scales, const EvalOptions& options = {});

// Long test sentences: lengths drawn in [long_factor * min_length,
// long_factor * max_length] of the corpus config, symbols uniform over the
// vocabulary, from a stream independent of the training data.
std::vector<Utterance> make_long_sentences(const Corpus& corpus, std::size_t count, double long_factor,
                                           std::uint64_t seed);

nlohmann::json to_json(const RobustnessReport& report);
nlohmann::json to_json(const RhythmReport& report);

}  // namespace rcalign
