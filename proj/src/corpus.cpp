#include "rcalign/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "rcalign/binary_io.hpp"
#include "rcalign/error.hpp"

namespace rcalign {
namespace {

constexpr std::uint64_t kTableStream = 0x7AB1E;
constexpr char kDatasetMagic[4] = {'R', 'C', 'D', 'S'};

std::string serialize_body(const Corpus& corpus) {
  std::string body;
  binio::put_f64s(body, corpus.table.prototypes.data());
  binio::put_f64s(body, corpus.table.base_durations);
  for (const Utterance& u : corpus.utterances) {
    binio::put<std::uint32_t>(body, static_cast<std::uint32_t>(u.num_symbols()));
    binio::put<std::uint32_t>(body, static_cast<std::uint32_t>(u.frames.rows()));
    binio::put<std::uint32_t>(body, static_cast<std::uint32_t>(u.style_class));
    for (std::size_t id : u.symbol_ids) binio::put<std::uint32_t>(body, static_cast<std::uint32_t>(id));
    for (std::size_t d : u.durations) binio::put<std::uint32_t>(body, static_cast<std::uint32_t>(d));
    binio::put_f64s(body, u.frames.data());
  }
  return body;
}

template <typename T>
T field(const nlohmann::json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("corpus config field '") + key + "': " + e.what());
  }
}

}  // namespace

void CorpusConfig::validate() const {
  std::vector<std::string> problems;
  if (n_utterances < 1) problems.emplace_back("n_utterances must be >= 1");
  if (vocab_size < 2) problems.emplace_back("vocab_size must be >= 2");
  if (feature_dim < 1) problems.emplace_back("feature_dim must be >= 1");
  if (min_length < 1) problems.emplace_back("min_length must be >= 1");
  if (min_length > max_length) {
    problems.push_back("min_length (" + std::to_string(min_length) + ") exceeds max_length (" +
                       std::to_string(max_length) + ")");
  }
  if (!(noise_std >= 0.0)) problems.emplace_back("noise_std must be >= 0");
  if (tempo_multipliers.empty()) problems.emplace_back("tempo_multipliers must be nonempty");
  for (double m : tempo_multipliers) {
    if (!(m > 0.0)) {
      problems.emplace_back("tempo_multipliers entries must be > 0");
      break;
    }
  }
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
    problems.emplace_back("validation_fraction must be in [0, 1)");
  }
  if (!problems.empty()) {
    std::string msg = "invalid corpus config:";
    for (const auto& p : problems) msg += " " + p + ";";
    throw ConfigError(msg);
  }
}

nlohmann::json to_json(const CorpusConfig& cfg) {
  return nlohmann::json{{"n_utterances", cfg.n_utterances},
                        {"vocab_size", cfg.vocab_size},
                        {"feature_dim", cfg.feature_dim},
                        {"min_length", cfg.min_length},
                        {"max_length", cfg.max_length},
                        {"noise_std", cfg.noise_std},
                        {"tempo_multipliers", cfg.tempo_multipliers},
                        {"validation_fraction", cfg.validation_fraction},
                        {"seed", cfg.seed}};
}

CorpusConfig corpus_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("corpus config must be a JSON object");
  static const std::vector<std::string> known = {"n_utterances", "vocab_size",  "feature_dim",
                                                 "min_length",   "max_length",  "noise_std",
                                                 "tempo_multipliers", "validation_fraction", "seed"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ConfigError("unknown corpus config field '" + key + "'");
    }
  }
  CorpusConfig c;
  c.n_utterances = field(j, "n_utterances", c.n_utterances);
  c.vocab_size = field(j, "vocab_size", c.vocab_size);
  c.feature_dim = field(j, "feature_dim", c.feature_dim);
  c.min_length = field(j, "min_length", c.min_length);
  c.max_length = field(j, "max_length", c.max_length);
  c.noise_std = field(j, "noise_std", c.noise_std);
  c.tempo_multipliers = field(j, "tempo_multipliers", c.tempo_multipliers);
  c.validation_fraction = field(j, "validation_fraction", c.validation_fraction);
  c.seed = field(j, "seed", c.seed);
  c.validate();
  return c;
}

SymbolTable gen_symbol_table(std::size_t vocab_size, std::size_t feature_dim, std::uint64_t seed) {
  if (vocab_size < 2) throw ConfigError("gen_symbol_table: vocab_size must be >= 2");
  if (feature_dim < 1) throw ConfigError("gen_symbol_table: feature_dim must be >= 1");
  const Rng base = Rng::stream(seed, kTableStream);
  for (int attempt = 0; attempt < kMaxTableAttempts; ++attempt) {
    Rng rng = base.derive(static_cast<std::uint64_t>(attempt));
    Tensor protos({vocab_size, feature_dim});
    for (double& v : protos.data()) v = rng.normal();
    bool separated = true;
    for (std::size_t a = 0; a < vocab_size && separated; ++a) {
      for (std::size_t b = a + 1; b < vocab_size; ++b) {
        double d2 = 0.0;
        for (std::size_t f = 0; f < feature_dim; ++f) {
          const double diff = protos.at(a, f) - protos.at(b, f);
          d2 += diff * diff;
        }
        if (!(std::sqrt(d2) > kMinPrototypeDistance)) {
          separated = false;
          break;
        }
      }
    }
    if (!separated) continue;
    SymbolTable table;
    table.vocab_size = vocab_size;
    table.feature_dim = feature_dim;
    table.prototypes = std::move(protos);
    table.base_durations.resize(vocab_size);
    for (double& d : table.base_durations) d = rng.uniform(3.0, 20.0);
    return table;
  }
  throw ConfigError("gen_symbol_table: could not place " + std::to_string(vocab_size) +
                    " prototypes at pairwise distance > " + std::to_string(kMinPrototypeDistance) +
                    " in " + std::to_string(feature_dim) + " dimensions after " +
                    std::to_string(kMaxTableAttempts) + " attempts (feature_dim too small)");
}

std::vector<std::size_t> alignment_from_durations(const std::vector<std::size_t>& durations) {
  std::vector<std::size_t> path;
  for (std::size_t j = 0; j < durations.size(); ++j) path.insert(path.end(), durations[j], j);
  return path;
}

Utterance gen_utterance(const SymbolTable& table, const CorpusConfig& config,
                        std::size_t style_class, Rng& rng) {
  if (style_class >= config.n_style_classes()) {
    throw IndexError("gen_utterance: style class " + std::to_string(style_class) + " outside [0, " +
                     std::to_string(config.n_style_classes()) + ")");
  }
  Utterance u;
  u.style_class = style_class;
  const std::size_t n = config.min_length + rng.below(config.max_length - config.min_length + 1);
  u.symbol_ids.resize(n);
  for (auto& id : u.symbol_ids) id = rng.below(table.vocab_size);
  u.durations.resize(n);
  const double tempo = config.tempo_multipliers[style_class];
  for (std::size_t j = 0; j < n; ++j) {
    const double jitter = std::exp(kDurationJitter * rng.normal());
    const double d = std::round(table.base_durations[u.symbol_ids[j]] * tempo * jitter);
    u.durations[j] = static_cast<std::size_t>(std::max(2.0, d));
  }
  u.gt_alignment = alignment_from_durations(u.durations);
  const std::size_t F = table.feature_dim;
  u.frames = Tensor({u.gt_alignment.size(), F});
  std::size_t t = 0;
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t d = u.durations[j];
    const auto proto = table.prototypes.row(u.symbol_ids[j]);
    for (std::size_t k = 0; k < d; ++k, ++t) {
      const double env = kEnvelopeStart + (kEnvelopeEnd - kEnvelopeStart) * static_cast<double>(k) /
                                              static_cast<double>(d - 1);
      for (std::size_t f = 0; f < F; ++f) {
        u.frames.at(t, f) = proto[f] * env + config.noise_std * rng.normal();
      }
    }
  }
  return u;
}

void assign_split(Corpus& corpus) {
  const std::size_t n = corpus.utterances.size();
  const auto n_val = static_cast<std::size_t>(
      std::floor(static_cast<double>(n) * corpus.config.validation_fraction));
  std::vector<std::pair<std::uint64_t, std::size_t>> keyed(n);
  for (std::size_t i = 0; i < n; ++i) keyed[i] = {mix64(corpus.config.seed ^ mix64(i)), i};
  std::sort(keyed.begin(), keyed.end());
  corpus.train_indices.clear();
  corpus.validation_indices.clear();
  for (std::size_t r = 0; r < n; ++r) {
    (r < n_val ? corpus.validation_indices : corpus.train_indices).push_back(keyed[r].second);
  }
  std::sort(corpus.train_indices.begin(), corpus.train_indices.end());
  std::sort(corpus.validation_indices.begin(), corpus.validation_indices.end());
}

Corpus gen_corpus(const CorpusConfig& config) {
  config.validate();
  Corpus corpus;
  corpus.config = config;
  corpus.table = gen_symbol_table(config.vocab_size, config.feature_dim, config.seed);
  corpus.utterances.reserve(config.n_utterances);
  for (std::size_t i = 0; i < config.n_utterances; ++i) {
    Rng rng = Rng::stream(config.seed, i + 1);
    corpus.utterances.push_back(gen_utterance(corpus.table, config, i % config.n_style_classes(), rng));
  }
  assign_split(corpus);
  corpus.content_hash = fnv1a64(serialize_body(corpus));
  return corpus;
}

std::vector<double> symbol_mean_durations(const Corpus& corpus) {
  std::vector<double> total(corpus.table.vocab_size, 0.0);
  std::vector<double> count(corpus.table.vocab_size, 0.0);
  for (const Utterance& u : corpus.utterances) {
    for (std::size_t j = 0; j < u.num_symbols(); ++j) {
      total[u.symbol_ids[j]] += static_cast<double>(u.durations[j]);
      count[u.symbol_ids[j]] += 1.0;
    }
  }
  std::vector<double> mean(corpus.table.vocab_size);
  for (std::size_t s = 0; s < mean.size(); ++s) {
    mean[s] = count[s] > 0.0 ? total[s] / count[s] : corpus.table.base_durations[s];
  }
  return mean;
}

std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string serialize_corpus(const Corpus& corpus) {
  const std::string body = serialize_body(corpus);
  nlohmann::json header{{"format", "rc-align-dataset"},
                        {"format_version", kDatasetVersion},
                        {"corpus_config", to_json(corpus.config)},
                        {"vocab_size", corpus.table.vocab_size},
                        {"feature_dim", corpus.table.feature_dim},
                        {"n_records", corpus.utterances.size()},
                        {"hash_algorithm", "fnv1a64"},
                        {"content_hash", hash_hex(fnv1a64(body))}};
  const std::string header_text = header.dump();
  std::string out(kDatasetMagic, 4);
  binio::put<std::uint32_t>(out, kDatasetVersion);
  binio::put<std::uint64_t>(out, header_text.size());
  out += header_text;
  out += body;
  return out;
}

Corpus deserialize_corpus(const std::string& bytes) {
  binio::Reader r(bytes);
  const std::string_view magic = r.take(4);
  if (magic != std::string_view(kDatasetMagic, 4)) throw MagicError("not a dataset file (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kDatasetVersion) {
    throw VersionError("dataset version " + std::to_string(version) + " unsupported (expected " +
                       std::to_string(kDatasetVersion) + ")");
  }
  const auto header_len = r.get<std::uint64_t>();
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.take(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("dataset header is not valid JSON: ") + e.what());
  }
  const std::size_t body_start = r.position();
  Corpus corpus;
  std::size_t V = 0, F = 0, n_records = 0;
  std::string expected_hash;
  try {
    corpus.config = corpus_config_from_json(header.at("corpus_config"));
    V = header.at("vocab_size").get<std::size_t>();
    F = header.at("feature_dim").get<std::size_t>();
    n_records = header.at("n_records").get<std::size_t>();
    expected_hash = header.at("content_hash").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("dataset header: ") + e.what());
  }
  if (V == 0 || F == 0 || V > r.remaining() / 8 / F) {
    throw TruncatedFileError("dataset symbol table (" + std::to_string(V) + " x " + std::to_string(F) +
                             ") does not fit in the file");
  }
  corpus.table.vocab_size = V;
  corpus.table.feature_dim = F;
  corpus.table.prototypes = Tensor({V, F});
  r.get_f64s(corpus.table.prototypes.data());
  corpus.table.base_durations.resize(V);
  r.get_f64s(corpus.table.base_durations);
  corpus.utterances.resize(n_records);
  for (Utterance& u : corpus.utterances) {
    const auto n = r.get<std::uint32_t>();
    const auto T = r.get<std::uint32_t>();
    u.style_class = r.get<std::uint32_t>();
    u.symbol_ids.resize(n);
    u.durations.resize(n);
    for (auto& id : u.symbol_ids) id = r.get<std::uint32_t>();
    for (auto& d : u.durations) d = r.get<std::uint32_t>();
    u.frames = Tensor({T, F});
    r.get_f64s(u.frames.data());
    u.gt_alignment = alignment_from_durations(u.durations);
    if (u.gt_alignment.size() != T) throw FormatError("dataset record durations do not sum to its frame count");
  }
  if (r.remaining() != 0) throw FormatError("dataset has trailing bytes");
  const std::uint64_t h = fnv1a64(std::string_view(bytes).substr(body_start));
  if (hash_hex(h) != expected_hash) {
    throw FormatError("dataset content hash mismatch (file corrupted)");
  }
  corpus.content_hash = h;
  assign_split(corpus);
  return corpus;
}

void save_corpus(const Corpus& corpus, const std::string& path) {
  binio::write_file_atomic(path, serialize_corpus(corpus));
}

Corpus load_corpus(const std::string& path) { return deserialize_corpus(binio::read_file(path)); }

}  // namespace rcalign
