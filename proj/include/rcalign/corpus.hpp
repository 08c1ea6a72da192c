#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "rcalign/prng.hpp"
#include "rcalign/tensor.hpp"

namespace rcalign {

// Phoneme-inventory stand-in: one prototype feature vector and one mean
// duration per symbol.
struct SymbolTable {
  std::size_t vocab_size = 0;
  std::size_t feature_dim = 0;
  Tensor prototypes;                  // [V x F]
  std::vector<double> base_durations;  // frames, in [3, 20]
};

// Symbol indices in durations/gt_alignment are 0-based.
struct Utterance {
  std::vector<std::size_t> symbol_ids;
  std::vector<std::size_t> durations;
  std::size_t style_class = 0;
  Tensor frames;                          // [T x F], T = sum(durations)
  std::vector<std::size_t> gt_alignment;  // frame -> symbol position

  std::size_t num_symbols() const { return symbol_ids.size(); }
  std::size_t num_frames() const { return gt_alignment.size(); }
};

struct CorpusConfig {
  std::size_t n_utterances = 500;
  std::size_t vocab_size = 40;
  std::size_t feature_dim = 16;
  std::size_t min_length = 3;
  std::size_t max_length = 8;
  double noise_std = 0.05;
  // One tempo multiplier per style class; styles are assigned round-robin.
  std::vector<double> tempo_multipliers{1.0, 0.75, 1.5};
  double validation_fraction = 0.1;
  std::uint64_t seed = 20240;

  std::size_t n_style_classes() const { return tempo_multipliers.size(); }
  // Throws ConfigError naming the offending field(s).
  void validate() const;
};

nlohmann::json to_json(const CorpusConfig& cfg);
// Strict: unknown keys and invalid values raise ConfigError.
CorpusConfig corpus_config_from_json(const nlohmann::json& j);

struct Corpus {
  CorpusConfig config;
  SymbolTable table;
  std::vector<Utterance> utterances;
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> validation_indices;
  std::uint64_t content_hash = 0;
};

// Lognormal jitter sigma applied to every symbol duration.
inline constexpr double kDurationJitter = 0.25;
// Frame amplitude ramps linearly between these across each symbol segment.
inline constexpr double kEnvelopeStart = 0.8;
inline constexpr double kEnvelopeEnd = 1.2;
inline constexpr double kMinPrototypeDistance = 0.5;
inline constexpr int kMaxTableAttempts = 1000;

SymbolTable gen_symbol_table(std::size_t vocab_size, std::size_t feature_dim, std::uint64_t seed);

// Draw order (fixed, part of the dataset format): length, symbols, one normal
// per symbol for duration jitter, then F normals per frame for noise.
Utterance gen_utterance(const SymbolTable& table, const CorpusConfig& config,
                        std::size_t style_class, Rng& rng);

// Rebuilds durations-derived fields (gt_alignment) for a record.
std::vector<std::size_t> alignment_from_durations(const std::vector<std::size_t>& durations);

// Utterance i uses Rng::stream(seed, i + 1) and style class i mod n_classes.
Corpus gen_corpus(const CorpusConfig& config);

// Deterministic split: floor(n * validation_fraction) validation records,
// chosen as the smallest mix64(seed ^ mix64(i)) keys.
void assign_split(Corpus& corpus);

// Mean realized duration per symbol id across the corpus (falls back to the
// table's base duration for unseen symbols).
std::vector<double> symbol_mean_durations(const Corpus& corpus);

// Dataset container:
//   "RCDS" | u32 version | u64 header length | header JSON
//   | table block: V*F f64 prototypes, V f64 base durations
//   | records: u32 N, u32 T, u32 style, N u32 ids, N u32 durations, T*F f64
// content_hash = FNV-1a 64 over table block + records (hex in header).
inline constexpr std::uint32_t kDatasetVersion = 1;
std::string serialize_corpus(const Corpus& corpus);
Corpus deserialize_corpus(const std::string& bytes);
void save_corpus(const Corpus& corpus, const std::string& path);
Corpus load_corpus(const std::string& path);
std::string hash_hex(std::uint64_t h);

}  // namespace rcalign
