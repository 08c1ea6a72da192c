#include "rcalign/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <limits>
#include <numeric>
#include <thread>

#include "rcalign/error.hpp"

namespace rcalign {

namespace {

constexpr std::uint64_t kLongSentenceStream = 0x10C6;

void check_alignment(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("alignment must be [T x N], got " + shape_str(a.shape()));
}

// Runs fn(i) for i in [0, n) on `threads` workers; first exception wins.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += threads) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::vector<double> ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
    i = j + 1;
  }
  return r;
}

std::vector<double> as_doubles(const std::vector<std::size_t>& v) { return {v.begin(), v.end()}; }

nlohmann::json correlation_json(const Correlation& c) {
  return nlohmann::json{{"value", c.defined ? nlohmann::json(c.value) : nlohmann::json(nullptr)},
                        {"defined", c.defined}};
}

}  // namespace

std::vector<std::size_t> alignment_path(const Tensor& alignment) {
  check_alignment(alignment);
  const std::size_t T = alignment.dim(0);
  std::vector<std::size_t> path(T, 0);
  for (std::size_t t = 0; t < T; ++t) {
    const auto row = alignment.row(t);
    // max_element keeps the first of equal maxima.
    path[t] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return path;
}

std::vector<std::size_t> occupancy(const Tensor& alignment) {
  check_alignment(alignment);
  std::vector<std::size_t> counts(alignment.dim(1), 0);
  for (std::size_t j : alignment_path(alignment)) ++counts[j];
  return counts;
}

UtteranceDefects detect_defects(const Tensor& alignment, bool truncated, const RobustnessThresholds& th) {
  check_alignment(alignment);
  const std::size_t T = alignment.dim(0);
  const std::size_t N = alignment.dim(1);
  UtteranceDefects d;
  d.n_symbols = N;
  d.n_frames = T;
  d.truncated = truncated;

  const std::vector<std::size_t> path = alignment_path(alignment);
  std::vector<bool> seen(N, false);
  for (std::size_t j : path) seen[j] = true;
  d.skips = static_cast<std::size_t>(std::count(seen.begin(), seen.end(), false));
  for (std::size_t t = 1; t < T; ++t) {
    if (path[t] < path[t - 1]) ++d.repeats;
  }

  const double limit = th.collapse_entropy_fraction * std::log(static_cast<double>(N));
  std::size_t run = 0;
  auto close_run = [&] {
    if (run >= th.collapse_min_rows) ++d.collapses;
    run = 0;
  };
  for (std::size_t t = 0; t < T; ++t) {
    double h = 0.0;
    for (double a : alignment.row(t)) {
      if (a > 0.0) h -= a * std::log(a);
    }
    if (h > limit) {
      ++run;
    } else {
      close_run();
    }
  }
  close_run();
  return d;
}

RobustnessReport robustness_report(std::span<const SynthesisOutput> outputs, const RobustnessThresholds& th) {
  RobustnessReport r;
  r.thresholds = th;
  for (const SynthesisOutput& o : outputs) {
    const UtteranceDefects d = detect_defects(o.alignment, o.truncated, th);
    r.skips += d.skips;
    r.repeats += d.repeats;
    r.collapses += d.collapses;
    r.truncations += d.truncated ? 1 : 0;
    r.total_symbols += d.n_symbols;
    r.utterances.push_back(d);
  }
  const std::size_t defects = r.skips + r.repeats + r.collapses + r.truncations;
  r.defect_rate =
      r.total_symbols == 0 ? 0.0
                           : std::min(1.0, static_cast<double>(defects) / static_cast<double>(r.total_symbols));
  return r;
}

Correlation spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) {
    throw DimensionError("spearman: " + std::to_string(x.size()) + " vs " + std::to_string(y.size()) + " values");
  }
  const Correlation undefined{std::numeric_limits<double>::quiet_NaN(), false};
  if (x.size() < 2) return undefined;
  const std::vector<double> rx = ranks(x);
  const std::vector<double> ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return undefined;
  return Correlation{std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0), true};
}

std::size_t resolve_threads(std::size_t requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("RC_ALIGN_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
    throw ConfigError(std::string("RC_ALIGN_THREADS must be a positive integer, got '") + env + "'");
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

std::vector<SynthesisOutput> synthesize_all(const Model& model, std::span<const Utterance> utterances,
                                            const EvalOptions& options) {
  std::vector<SynthesisOutput> out(utterances.size());
  FreeRunOptions fr;
  fr.max_steps = options.max_steps;
  parallel_for(utterances.size(), resolve_threads(options.threads), [&](std::size_t i) {
    const Utterance& u = utterances[i];
    out[i] = synthesize_free_run(model, u.symbol_ids, u.durations, StyleInput{u.style_class}, fr);
  });
  return out;
}

RhythmReport rhythm_response(const Model& model, std::span<const Utterance> utterances,
                             std::span<const double> scales, const EvalOptions& options) {
  if (model.config().mechanism != attention::Mechanism::kRc) {
    throw CapabilityError("rhythm_response: mechanism '" +
                          std::string(attention::mechanism_name(model.config().mechanism)) +
                          "' has no duration input");
  }
  if (scales.empty()) throw UsageError("rhythm_response: no scale factors given");
  for (double k : scales) {
    if (!(k > 0.0) || !std::isfinite(k)) throw ConfigError("rhythm_response: scale factors must be > 0");
  }
  const auto unit = std::find(scales.begin(), scales.end(), 1.0);
  if (unit == scales.end()) throw ConfigError("rhythm_response: scale factors must include 1.0");
  const std::size_t unit_index = static_cast<std::size_t>(unit - scales.begin());
  const std::size_t S = scales.size();

  struct Job {
    std::vector<std::size_t> supplied;
    std::vector<std::size_t> realized;
    std::size_t length = 0;
    bool truncated = false;
  };
  std::vector<Job> jobs(utterances.size() * S);
  FreeRunOptions fr;
  fr.max_steps = options.max_steps;
  parallel_for(jobs.size(), resolve_threads(options.threads), [&](std::size_t job) {
    const Utterance& u = utterances[job / S];
    const double k = scales[job % S];
    Job& r = jobs[job];
    r.supplied.resize(u.durations.size());
    for (std::size_t j = 0; j < u.durations.size(); ++j) {
      r.supplied[j] = static_cast<std::size_t>(std::ceil(k * static_cast<double>(u.durations[j])));
    }
    const SynthesisOutput out = synthesize_free_run(model, u.symbol_ids, r.supplied, StyleInput{u.style_class}, fr);
    r.realized = occupancy(out.alignment);
    r.length = out.alignment.dim(0);
    r.truncated = out.truncated;
  });

  RhythmReport report;
  report.scales.assign(scales.begin(), scales.end());
  report.mean_total_length.assign(S, 0.0);
  std::vector<double> pooled_supplied, pooled_realized;
  std::size_t longer = 0;
  const std::size_t lo = static_cast<std::size_t>(std::min_element(scales.begin(), scales.end()) - scales.begin());
  const std::size_t hi = static_cast<std::size_t>(std::max_element(scales.begin(), scales.end()) - scales.begin());
  for (std::size_t i = 0; i < utterances.size(); ++i) {
    RhythmUtterance ru;
    for (std::size_t s = 0; s < S; ++s) {
      const Job& r = jobs[i * S + s];
      ru.total_lengths.push_back(r.length);
      ru.truncated.push_back(r.truncated);
      report.mean_total_length[s] += static_cast<double>(r.length);
    }
    const Job& unit_job = jobs[i * S + unit_index];
    ru.supplied = unit_job.supplied;
    ru.realized = unit_job.realized;
    const std::vector<double> sd = as_doubles(ru.supplied), rd = as_doubles(ru.realized);
    ru.correlation = spearman(sd, rd);
    pooled_supplied.insert(pooled_supplied.end(), sd.begin(), sd.end());
    pooled_realized.insert(pooled_realized.end(), rd.begin(), rd.end());
    if (ru.total_lengths[hi] > ru.total_lengths[lo]) ++longer;
    report.utterances.push_back(std::move(ru));
  }
  if (!utterances.empty()) {
    for (double& m : report.mean_total_length) m /= static_cast<double>(utterances.size());
    report.longer_at_max_scale = static_cast<double>(longer) / static_cast<double>(utterances.size());
  }
  report.correlation = spearman(pooled_supplied, pooled_realized);
  std::vector<std::size_t> order(S);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scales[a] < scales[b]; });
  report.mean_lengths_nondecreasing = true;
  for (std::size_t i = 1; i < S; ++i) {
    if (report.mean_total_length[order[i]] < report.mean_total_length[order[i - 1]]) {
      report.mean_lengths_nondecreasing = false;
    }
  }
  return report;
}

std::vector<Utterance> make_long_sentences(const Corpus& corpus, std::size_t count, double long_factor,
                                           std::uint64_t seed) {
  if (!(long_factor >= 1.0) || !std::isfinite(long_factor)) {
    throw ConfigError("long factor must be >= 1, got " + std::to_string(long_factor));
  }
  CorpusConfig cfg = corpus.config;
  cfg.min_length = static_cast<std::size_t>(std::llround(long_factor * static_cast<double>(cfg.min_length)));
  cfg.max_length = static_cast<std::size_t>(std::llround(long_factor * static_cast<double>(cfg.max_length)));
  std::vector<Utterance> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng = Rng::stream(seed, kLongSentenceStream).derive(i);
    out.push_back(gen_utterance(corpus.table, cfg, i % cfg.n_style_classes(), rng));
  }
  return out;
}

nlohmann::json to_json(const RobustnessReport& r) {
  nlohmann::json per = nlohmann::json::array();
  for (const UtteranceDefects& d : r.utterances) {
    per.push_back({{"n_symbols", d.n_symbols},
                   {"n_frames", d.n_frames},
                   {"skips", d.skips},
                   {"repeats", d.repeats},
                   {"collapses", d.collapses},
                   {"truncated", d.truncated}});
  }
  return nlohmann::json{
      {"thresholds",
       {{"collapse_min_rows", r.thresholds.collapse_min_rows},
        {"collapse_entropy_fraction", r.thresholds.collapse_entropy_fraction},
        {"entropy_log_base", "e"}}},
      {"skips", r.skips},
      {"repeats", r.repeats},
      {"collapses", r.collapses},
      {"truncations", r.truncations},
      {"total_symbols", r.total_symbols},
      {"defect_rate", r.defect_rate},
      {"utterances", std::move(per)}};
}

nlohmann::json to_json(const RhythmReport& r) {
  nlohmann::json per = nlohmann::json::array();
  for (const RhythmUtterance& u : r.utterances) {
    per.push_back({{"supplied_durations", u.supplied},
                   {"realized_durations", u.realized},
                   {"total_lengths", u.total_lengths},
                   {"truncated", u.truncated},
                   {"spearman", correlation_json(u.correlation)}});
  }
  return nlohmann::json{{"scales", r.scales},
                        {"spearman_at_unit_scale", correlation_json(r.correlation)},
                        {"mean_total_length", r.mean_total_length},
                        {"mean_lengths_nondecreasing", r.mean_lengths_nondecreasing},
                        {"longer_at_max_scale", r.longer_at_max_scale},
                        {"utterances", std::move(per)}};
}

}  // namespace rcalign
