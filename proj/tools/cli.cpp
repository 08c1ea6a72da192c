#include "cli.hpp"

#include <charconv>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "rcalign/binary_io.hpp"
#include "rcalign/checkpoint.hpp"
#include "rcalign/corpus.hpp"
#include "rcalign/error.hpp"
#include "rcalign/eval.hpp"
#include "rcalign/train.hpp"
#include "rcalign/viz.hpp"

#ifndef RCALIGN_VERSION
#define RCALIGN_VERSION "0.0.0"
#endif

namespace rcalign::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string iso_utc(std::chrono::system_clock::time_point tp) {
  const std::time_t t = std::chrono::system_clock::to_time_t(tp);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

json read_json_file(const std::string& path) {
  const std::string text = binio::read_file(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(path + ": invalid JSON: " + e.what());
  }
}

void write_text(const fs::path& path, std::string_view text) { binio::write_file_atomic(path.string(), text); }

class Manifest {
 public:
  explicit Manifest(std::string command) : command_(std::move(command)), start_(std::chrono::system_clock::now()) {}

  json body = json::object();

  void write(const fs::path& path) const {
    json m{{"command", command_},
           {"tool_version", RCALIGN_VERSION},
           {"started_at", iso_utc(start_)},
           {"finished_at", iso_utc(std::chrono::system_clock::now())}};
    m.update(body);
    write_text(path, m.dump(2) + "\n");
  }

 private:
  std::string command_;
  std::chrono::system_clock::time_point start_;
};

std::vector<std::size_t> parse_tokens(const std::string& text, std::size_t vocab) {
  std::vector<std::size_t> ids;
  std::istringstream is(text);
  std::string tok;
  while (is >> tok) {
    std::string_view digits = tok;
    if (!digits.empty() && (digits.front() == 's' || digits.front() == 'S')) digits.remove_prefix(1);
    std::size_t id = 0;
    const auto [end, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), id);
    if (digits.empty() || ec != std::errc() || end != digits.data() + digits.size()) {
      throw UsageError("--text: token '" + tok + "' is not a symbol (expected e.g. s12 or 12)");
    }
    if (id >= vocab) {
      throw UsageError("--text: symbol " + std::to_string(id) + " outside vocabulary [0, " + std::to_string(vocab) +
                       ")");
    }
    ids.push_back(id);
  }
  if (ids.empty()) throw UsageError("--text: no symbols given");
  return ids;
}

std::vector<std::size_t> parse_durations(const std::string& text) {
  std::vector<std::size_t> out;
  std::istringstream is(text);
  std::string cell;
  while (std::getline(is, cell, ',')) {
    std::size_t d = 0;
    const auto [end, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), d);
    if (cell.empty() || ec != std::errc() || end != cell.data() + cell.size() || d < 1) {
      throw UsageError("--durations: '" + cell + "' is not a positive integer");
    }
    out.push_back(d);
  }
  return out;
}

std::vector<double> parse_scales(const std::string& text) {
  std::vector<double> out;
  std::istringstream is(text);
  std::string cell;
  while (std::getline(is, cell, ',')) {
    double v = 0.0;
    const auto [end, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
    if (cell.empty() || ec != std::errc() || end != cell.data() + cell.size()) {
      throw UsageError("--scales: '" + cell + "' is not a number");
    }
    out.push_back(v);
  }
  return out;
}

void write_f64s(const fs::path& path, std::span<const double> values) {
  std::string bytes;
  binio::put_f64s(bytes, values);
  write_text(path, bytes);
}

// ---------------------------------------------------------------- gen-data

struct GenDataArgs {
  std::string config;
  std::string out;
};

int cmd_gen_data(const GenDataArgs& a, std::ostream& out) {
  Manifest manifest("gen-data");
  const CorpusConfig cfg = a.config.empty() ? CorpusConfig{} : corpus_config_from_json(read_json_file(a.config));
  cfg.validate();
  const Corpus corpus = gen_corpus(cfg);
  save_corpus(corpus, a.out);
  const std::string hash = hash_hex(corpus.content_hash);
  out << "wrote " << corpus.utterances.size() << " utterances to " << a.out << "\n";
  out << "corpus hash: " << hash << "\n";
  manifest.body = {{"config", to_json(cfg)}, {"corpus_hash", hash}, {"seed", cfg.seed}, {"outputs", {a.out}}};
  manifest.write(a.out + ".manifest.json");
  return 0;
}

// ------------------------------------------------------------------- train

struct TrainArgs {
  std::string config;
  std::string data;
  std::string mechanism;
  std::string out;
  std::string resume;
  std::optional<std::size_t> steps;
};

ModelConfig resolve_model_config(json model_json, const Corpus& corpus, const std::string& mechanism) {
  if (!model_json.is_object()) throw ConfigError("config field 'model' must be an object");
  if (!model_json.contains("vocab_size")) model_json["vocab_size"] = corpus.config.vocab_size;
  if (!model_json.contains("feature_dim")) model_json["feature_dim"] = corpus.config.feature_dim;
  if (!model_json.contains("n_style_classes")) model_json["n_style_classes"] = corpus.config.n_style_classes();
  if (!mechanism.empty()) model_json["mechanism"] = mechanism;
  return model_config_from_json(model_json);
}

int cmd_train(const TrainArgs& a, std::ostream& out) {
  Manifest manifest("train");
  if (!a.mechanism.empty()) attention::parse_mechanism(a.mechanism);
  json run = a.config.empty() ? json::object() : read_json_file(a.config);
  if (!run.is_object()) throw ConfigError("run config must be a JSON object");
  for (const auto& [key, _] : run.items()) {
    if (key != "model" && key != "train") throw ConfigError("unknown run config field '" + key + "' (expected model, train)");
  }
  const Corpus corpus = load_corpus(a.data);
  const std::string corpus_hash = hash_hex(corpus.content_hash);

  std::optional<Checkpoint> resumed;
  ModelConfig mc;
  TrainConfig tc;
  if (!a.resume.empty()) {
    resumed = load_checkpoint(a.resume);
    if (!resumed->training) throw UsageError("--resume: " + a.resume + " carries no training state");
    mc = resumed->model.config();
    if (!a.mechanism.empty() && attention::parse_mechanism(a.mechanism) != mc.mechanism) {
      throw UsageError("--resume: checkpoint mechanism is " + std::string(attention::mechanism_name(mc.mechanism)) +
                       ", not " + a.mechanism);
    }
    const std::string stored = resumed->metadata.value("corpus_hash", "");
    if (stored != corpus_hash) {
      throw UsageError("--resume: checkpoint was trained on corpus " + stored + ", --data has " + corpus_hash);
    }
    tc = run.contains("train") ? train_config_from_json(run["train"]) : resumed->training->config;
  } else {
    mc = resolve_model_config(run.value("model", json::object()), corpus, a.mechanism);
    tc = run.contains("train") ? train_config_from_json(run["train"]) : TrainConfig{};
  }
  if (a.steps) tc.steps = *a.steps;
  tc.validate();

  const fs::path dir(a.out);
  fs::create_directories(dir);
  const json metadata{{"corpus_hash", corpus_hash}, {"symbol_mean_durations", symbol_mean_durations(corpus)}};
  std::vector<std::string> written;
  TrainOptions opts;
  opts.on_step = [&](std::size_t step, double loss) {
    if (step == 1 || step % 100 == 0 || step == tc.steps) {
      out << "step " << step << "/" << tc.steps << "  loss " << std::setprecision(6) << loss << "\n" << std::flush;
    }
  };
  opts.on_checkpoint = [&](const Model& model, const AdamState& opt, const std::vector<double>& losses) {
    Checkpoint ck{model, TrainingState{tc, opt, losses}, metadata};
    const bool final = opt.step == tc.steps;
    std::ostringstream name;
    name << "checkpoint_" << std::setw(6) << std::setfill('0') << opt.step << ".rcat";
    const fs::path path = dir / (final ? std::string("final.rcat") : name.str());
    save_checkpoint(ck, path.string());
    written.push_back(path.string());
  };

  TrainResult result = resumed ? resume_training(std::move(resumed->model), std::move(resumed->training->optimizer),
                                                 std::move(resumed->training->losses), corpus, tc, opts)
                               : train(mc, corpus, tc, opts);

  std::ostringstream csv;
  csv << "step,loss\n" << std::setprecision(17);
  for (std::size_t i = 0; i < result.losses.size(); ++i) csv << (i + 1) << "," << result.losses[i] << "\n";
  write_text(dir / "loss.csv", csv.str());
  out << "final checkpoint: " << (dir / "final.rcat").string() << "\n";

  manifest.body = {{"config", {{"model", to_json(mc)}, {"train", to_json(tc)}}},
                   {"corpus_hash", corpus_hash},
                   {"data", a.data},
                   {"seed", tc.seed},
                   {"resumed_from", a.resume.empty() ? json(nullptr) : json(a.resume)},
                   {"checkpoints", written},
                   {"outputs", {(dir / "loss.csv").string()}}};
  manifest.write(dir / "manifest.json");
  return 0;
}

// ------------------------------------------------------------------- synth

struct SynthArgs {
  std::string ckpt;
  std::string text;
  std::string durations;
  double duration_scale = 1.0;
  std::size_t style = 0;
  std::string out;
  std::optional<double> fa_transition;
  std::optional<std::size_t> max_steps;
};

int cmd_synth(const SynthArgs& a, std::ostream& out) {
  Manifest manifest("synth");
  const Checkpoint ck = load_checkpoint(a.ckpt);
  const ModelConfig& mc = ck.model.config();
  const std::vector<std::size_t> ids = parse_tokens(a.text, mc.vocab_size);
  if (!(a.duration_scale > 0.0) || !std::isfinite(a.duration_scale)) {
    throw UsageError("--duration-scale must be > 0");
  }
  if (a.style >= mc.n_style_classes) {
    throw UsageError("--style " + std::to_string(a.style) + " outside [0, " + std::to_string(mc.n_style_classes) + ")");
  }
  if (a.fa_transition && mc.mechanism != attention::Mechanism::kForward) {
    throw UsageError("--fa-transition applies to the forward mechanism only");
  }

  std::vector<std::size_t> base;
  if (!a.durations.empty()) {
    base = parse_durations(a.durations);
    if (base.size() != ids.size()) {
      throw UsageError("--durations has " + std::to_string(base.size()) + " values for " +
                       std::to_string(ids.size()) + " symbols");
    }
  } else {
    if (!ck.metadata.contains("symbol_mean_durations")) {
      throw UsageError("checkpoint has no per-symbol duration statistics; pass --durations");
    }
    const auto means = ck.metadata["symbol_mean_durations"].get<std::vector<double>>();
    for (std::size_t id : ids) {
      base.push_back(id < means.size() ? std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(means[id]))) : 1);
    }
  }
  std::vector<std::size_t> durations;
  for (std::size_t d : base) {
    durations.push_back(static_cast<std::size_t>(std::ceil(a.duration_scale * static_cast<double>(d))));
  }

  FreeRunOptions fr;
  fr.max_steps = a.max_steps;
  fr.forward_transition = a.fa_transition;
  const SynthesisOutput o = synthesize_free_run(ck.model, ids, durations, StyleInput{a.style}, fr);

  const fs::path dir(a.out);
  fs::create_directories(dir);
  std::vector<std::string> outputs{(dir / "frames.f64").string(), (dir / "alignment.csv").string(),
                                   (dir / "alignment.pgm").string()};
  write_f64s(dir / "frames.f64", o.frames.data());
  write_text(dir / "alignment.csv", viz::matrix_csv(o.alignment));
  write_text(dir / "alignment.pgm", viz::to_pgm(o.alignment));
  if (o.omegas) {
    write_text(dir / "omegas.csv", viz::matrix_csv(*o.omegas));
    outputs.push_back((dir / "omegas.csv").string());
  }
  const std::vector<std::size_t> realized = occupancy(o.alignment);
  out << "decoded " << o.frames.dim(0) << " frames" << (o.truncated ? " (truncated at max steps)" : "") << "\n";
  out << "supplied durations:";
  for (std::size_t d : durations) out << " " << d;
  out << "\nrealized durations:";
  for (std::size_t d : realized) out << " " << d;
  out << "\n";

  manifest.body = {{"config",
                    {{"model", to_json(mc)},
                     {"symbols", ids},
                     {"durations", durations},
                     {"duration_scale", a.duration_scale},
                     {"style", a.style},
                     {"fa_transition", a.fa_transition ? json(*a.fa_transition) : json(nullptr)}}},
                   {"corpus_hash", ck.metadata.value("corpus_hash", "")},
                   {"checkpoints", {a.ckpt}},
                   {"seed", nullptr},
                   {"frames_shape", o.frames.shape()},
                   {"truncated", o.truncated},
                   {"outputs", outputs}};
  manifest.write(dir / "manifest.json");
  return 0;
}

// -------------------------------------------------------------------- eval

struct EvalArgs {
  std::vector<std::string> ckpts;
  std::string data;
  double long_factor = 10.0;
  std::size_t n_sentences = 40;
  std::uint64_t seed = 1;
  std::string scales = "0.5,1,2";
  std::optional<std::size_t> max_steps;
  std::size_t threads = 0;
  std::string out;
};

std::string format_table(const std::vector<json>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(24) << "Model" << std::setw(20) << "Mechanism" << std::right << std::setw(10)
     << "Skipping" << std::setw(11) << "Repeating" << std::setw(10) << "Collapse" << std::setw(12) << "Truncation"
     << std::setw(9) << "Symbols" << std::setw(13) << "Defect rate" << "\n";
  for (const json& r : rows) {
    os << std::left << std::setw(24) << r["label"].get<std::string>() << std::setw(20)
       << r["mechanism"].get<std::string>() << std::right << std::setw(10) << r["skips"].get<std::size_t>()
       << std::setw(11) << r["repeats"].get<std::size_t>() << std::setw(10) << r["collapses"].get<std::size_t>()
       << std::setw(12) << r["truncations"].get<std::size_t>() << std::setw(9)
       << r["total_symbols"].get<std::size_t>() << std::setw(13) << std::fixed << std::setprecision(4)
       << r["defect_rate"].get<double>() << "\n";
  }
  return os.str();
}

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  Manifest manifest("eval");
  const std::vector<double> scales = parse_scales(a.scales);
  const Corpus corpus = load_corpus(a.data);
  const std::vector<Utterance> sentences = make_long_sentences(corpus, a.n_sentences, a.long_factor, a.seed);
  std::vector<Utterance> validation;
  for (std::size_t i : corpus.validation_indices) validation.push_back(corpus.utterances[i]);
  if (validation.empty()) {
    for (const Utterance& u : corpus.utterances) validation.push_back(u);
  }
  EvalOptions opts;
  opts.max_steps = a.max_steps;
  opts.threads = a.threads;

  const fs::path dir(a.out);
  fs::create_directories(dir);
  std::vector<json> rows;
  std::vector<std::string> outputs;
  std::map<std::string, int> seen;
  for (const std::string& path : a.ckpts) {
    const Checkpoint ck = load_checkpoint(path);
    const ModelConfig& mc = ck.model.config();
    if (mc.vocab_size < corpus.config.vocab_size || mc.feature_dim != corpus.config.feature_dim) {
      throw UsageError(path + ": model does not match the corpus vocabulary/feature size");
    }
    std::string label = fs::path(path).stem().string();
    if (fs::path(path).stem() == "final") label = fs::path(path).parent_path().filename().string() + "_final";
    if (seen[label]++ > 0) label += "_" + std::to_string(seen[label]);
    const std::string mech(attention::mechanism_name(mc.mechanism));

    const RobustnessReport rob = robustness_report(synthesize_all(ck.model, sentences, opts));
    json rob_json = to_json(rob);
    rob_json["checkpoint"] = path;
    rob_json["mechanism"] = mech;
    rob_json["long_factor"] = a.long_factor;
    rob_json["n_sentences"] = a.n_sentences;
    rob_json["sentence_seed"] = a.seed;
    write_text(dir / ("robustness_" + label + ".json"), rob_json.dump(2) + "\n");
    outputs.push_back((dir / ("robustness_" + label + ".json")).string());

    json row{{"label", label},
             {"checkpoint", path},
             {"mechanism", mech},
             {"skips", rob.skips},
             {"repeats", rob.repeats},
             {"collapses", rob.collapses},
             {"truncations", rob.truncations},
             {"total_symbols", rob.total_symbols},
             {"defect_rate", rob.defect_rate}};
    if (mc.mechanism == attention::Mechanism::kRc) {
      const RhythmReport rr = rhythm_response(ck.model, validation, scales, opts);
      json rr_json = to_json(rr);
      rr_json["checkpoint"] = path;
      write_text(dir / ("rhythm_" + label + ".json"), rr_json.dump(2) + "\n");
      outputs.push_back((dir / ("rhythm_" + label + ".json")).string());
      row["spearman"] = rr_json["spearman_at_unit_scale"];
      row["longer_at_max_scale"] = rr.longer_at_max_scale;
    } else {
      row["rhythm"] = "not applicable: mechanism has no duration input";
    }
    rows.push_back(std::move(row));
  }

  const std::string table = format_table(rows);
  write_text(dir / "comparison.txt", table);
  write_text(dir / "comparison.json", json(rows).dump(2) + "\n");
  outputs.push_back((dir / "comparison.txt").string());
  outputs.push_back((dir / "comparison.json").string());
  out << table;

  manifest.body = {{"config",
                    {{"long_factor", a.long_factor},
                     {"n_sentences", a.n_sentences},
                     {"scales", scales},
                     {"max_steps", a.max_steps ? json(*a.max_steps) : json(nullptr)},
                     {"thresholds", to_json(RobustnessReport{})["thresholds"]}}},
                   {"corpus_hash", hash_hex(corpus.content_hash)},
                   {"data", a.data},
                   {"checkpoints", a.ckpts},
                   {"seed", a.seed},
                   {"outputs", outputs}};
  manifest.write(dir / "manifest.json");
  return 0;
}

// --------------------------------------------------------------------- viz

struct VizArgs {
  std::string alignment;
  std::string out;
};

int cmd_viz(const VizArgs& a, std::ostream& out) {
  Manifest manifest("viz");
  const Tensor m = viz::parse_matrix_csv(binio::read_file(a.alignment));
  const std::string ext = fs::path(a.out).extension().string();
  if (ext == ".pgm") {
    write_text(a.out, viz::to_pgm(m));
  } else if (ext == ".ppm") {
    write_text(a.out, viz::to_ppm(m));
  } else {
    throw UsageError("--out must end in .pgm or .ppm, got '" + a.out + "'");
  }
  out << "wrote " << m.dim(1) << "x" << m.dim(0) << " image to " << a.out << "\n";
  manifest.body = {{"config", {{"alignment", a.alignment}}},
                   {"corpus_hash", nullptr},
                   {"checkpoints", json::array()},
                   {"seed", nullptr},
                   {"outputs", {a.out}}};
  manifest.write(a.out + ".manifest.json");
  return 0;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Rhythm-controllable attention toolkit: data, training, synthesis, evaluation"};
  app.set_version_flag("--version", RCALIGN_VERSION);
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic corpus");
  gen_cmd->add_option("--config", gen.config, "Corpus config JSON (defaults when omitted)");
  gen_cmd->add_option("--out", gen.out, "Output dataset path")->required();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model");
  train_cmd->add_option("--config", tr.config, "Run config JSON with optional 'model' and 'train' objects");
  train_cmd->add_option("--data", tr.data, "Dataset file")->required();
  train_cmd->add_option("--mechanism", tr.mechanism, "location_sensitive | gmm | forward | rc");
  train_cmd->add_option("--out", tr.out, "Output directory")->required();
  train_cmd->add_option("--resume", tr.resume, "Continue from a checkpoint with training state");
  train_cmd->add_option("--steps", tr.steps, "Override the total number of steps");

  SynthArgs sy;
  auto* synth_cmd = app.add_subcommand("synth", "Free-run synthesis from a checkpoint");
  synth_cmd->add_option("--ckpt", sy.ckpt, "Checkpoint")->required();
  synth_cmd->add_option("--text", sy.text, "Space-separated symbols, e.g. \"s3 s17 s5\"")->required();
  synth_cmd->add_option("--durations", sy.durations, "Comma-separated frame counts per symbol");
  synth_cmd->add_option("--duration-scale", sy.duration_scale, "Multiply durations (rounded up)");
  synth_cmd->add_option("--style", sy.style, "Style class index");
  synth_cmd->add_option("--out", sy.out, "Output directory")->required();
  synth_cmd->add_option("--fa-transition", sy.fa_transition, "Fixed transition probability (forward mechanism)");
  synth_cmd->add_option("--max-steps", sy.max_steps, "Decoder step limit");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Robustness and rhythm evaluation");
  eval_cmd->add_option("--ckpt", ev.ckpts, "Checkpoint(s)")->required();
  eval_cmd->add_option("--data", ev.data, "Dataset file")->required();
  eval_cmd->add_option("--long-factor", ev.long_factor, "Test sentence length relative to training");
  eval_cmd->add_option("--n-sentences", ev.n_sentences, "Number of long test sentences");
  eval_cmd->add_option("--seed", ev.seed, "Seed for test sentence generation");
  eval_cmd->add_option("--scales", ev.scales, "Duration scale factors for the rhythm report");
  eval_cmd->add_option("--max-steps", ev.max_steps, "Decoder step limit");
  eval_cmd->add_option("--threads", ev.threads, "Worker threads (default RC_ALIGN_THREADS or all cores)");
  eval_cmd->add_option("--out", ev.out, "Output directory")->required();

  VizArgs vz;
  auto* viz_cmd = app.add_subcommand("viz", "Render an alignment CSV as PGM or PPM");
  viz_cmd->add_option("--alignment", vz.alignment, "Alignment CSV")->required();
  viz_cmd->add_option("--out", vz.out, "Output image (.pgm or .ppm)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen_cmd) return cmd_gen_data(gen, out);
    if (*train_cmd) return cmd_train(tr, out);
    if (*synth_cmd) return cmd_synth(sy, out);
    if (*eval_cmd) return cmd_eval(ev, out);
    if (*viz_cmd) return cmd_viz(vz, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code(e);
  } catch (const json::exception& e) {
    err << "error: malformed JSON data: " << e.what() << "\n";
    return 3;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return 3;
  }
  return 2;
}

}  // namespace rcalign::cli
