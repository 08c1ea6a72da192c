#include "rcalign/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rcalign/error.hpp"
#include "rcalign/ops.hpp"

namespace rcalign {

namespace {

constexpr std::uint64_t kBatchStream = 0xBA7C;
constexpr std::uint64_t kDropoutStream = 0xD50F;

template <typename T>
T field(const nlohmann::json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config field '") + key + "': " + e.what());
  }
}

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

bool finite(std::span<const double> xs) {
  return std::all_of(xs.begin(), xs.end(), [](double x) { return std::isfinite(x); });
}

[[noreturn]] void numeric_abort(std::size_t step, const std::string& what) {
  throw NumericError("training step " + std::to_string(step + 1) + ": non-finite values in " + what);
}

// Names the first non-finite tensor in forward order, then in gradients.
[[noreturn]] void diagnose(std::size_t step, const Model& model, const TeacherForcedGraph& g, double loss_value,
                           const Tape& tape, const ModelVars& vars) {
  const ParameterStore& params = model.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params.at(i).all_finite()) numeric_abort(step, "parameter '" + params.name(i) + "'");
  }
  if (!g.alignment.value().all_finite()) numeric_abort(step, "alignment");
  if (g.omegas && !g.omegas->value().all_finite()) numeric_abort(step, "transition gates");
  if (!g.frames.value().all_finite()) numeric_abort(step, "predicted frames");
  if (!g.stop_logits.value().all_finite()) numeric_abort(step, "stop logits");
  if (!std::isfinite(loss_value)) numeric_abort(step, "loss");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!finite(tape.grad(vars.all[i]))) numeric_abort(step, "gradient of '" + params.name(i) + "'");
  }
  numeric_abort(step, "loss");
}

std::vector<std::size_t> training_pool(const Corpus& corpus) {
  if (!corpus.train_indices.empty()) return corpus.train_indices;
  std::vector<std::size_t> all(corpus.utterances.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return all;
}

void check_compatible(const ModelConfig& mc, const Corpus& corpus) {
  if (corpus.utterances.empty()) throw UsageError("train: corpus is empty");
  if (mc.feature_dim != corpus.config.feature_dim) {
    throw ConfigError("model feature_dim (" + std::to_string(mc.feature_dim) + ") does not match corpus (" +
                      std::to_string(corpus.config.feature_dim) + ")");
  }
  if (mc.vocab_size < corpus.config.vocab_size) {
    throw ConfigError("model vocab_size (" + std::to_string(mc.vocab_size) + ") is smaller than corpus vocab (" +
                      std::to_string(corpus.config.vocab_size) + ")");
  }
  if (mc.n_style_classes < corpus.config.n_style_classes()) {
    throw ConfigError("model n_style_classes (" + std::to_string(mc.n_style_classes) +
                      ") is smaller than corpus style classes (" +
                      std::to_string(corpus.config.n_style_classes()) + ")");
  }
}

void adam_update(Model& model, AdamState& opt, const TrainConfig& tc, std::vector<std::vector<double>>& grads) {
  double norm2 = 0.0;
  for (const auto& g : grads) {
    for (double x : g) norm2 += x * x;
  }
  const double norm = std::sqrt(norm2);
  if (tc.grad_clip_norm > 0.0 && norm > tc.grad_clip_norm) {
    const double s = tc.grad_clip_norm / norm;
    for (auto& g : grads) {
      for (double& x : g) x *= s;
    }
  }
  ++opt.step;
  const double t = static_cast<double>(opt.step);
  const double c1 = 1.0 - std::pow(tc.beta1, t);
  const double c2 = 1.0 - std::pow(tc.beta2, t);
  ParameterStore& params = model.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params.at(i).data();
    auto m = opt.m[i].data();
    auto v = opt.v[i].data();
    const auto& g = grads[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = tc.beta1 * m[k] + (1.0 - tc.beta1) * g[k];
      v[k] = tc.beta2 * v[k] + (1.0 - tc.beta2) * g[k] * g[k];
      p[k] -= tc.learning_rate * (m[k] / c1) / (std::sqrt(v[k] / c2) + tc.eps);
    }
  }
}

AdamState fresh_adam(const Model& model) {
  AdamState s;
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    s.m.push_back(Tensor::zeros(model.params().at(i).shape()));
    s.v.push_back(Tensor::zeros(model.params().at(i).shape()));
  }
  return s;
}

}  // namespace

void TrainConfig::validate() const {
  std::vector<std::string> problems;
  if (steps < 1) problems.push_back("steps must be >= 1");
  if (batch_size < 1) problems.push_back("batch_size must be >= 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) problems.push_back("learning_rate must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) problems.push_back("beta1 must be in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) problems.push_back("beta2 must be in [0, 1)");
  if (!(eps > 0.0)) problems.push_back("eps must be > 0");
  if (!(grad_clip_norm >= 0.0)) problems.push_back("grad_clip_norm must be >= 0 (0 disables clipping)");
  if (!(stop_pos_weight > 0.0) || !std::isfinite(stop_pos_weight)) problems.push_back("stop_pos_weight must be > 0");
  if (!teacher_forcing) problems.push_back("teacher_forcing cannot be disabled");
  if (problems.empty()) return;
  std::string msg = "invalid train config:";
  for (const auto& p : problems) msg += " " + p + ";";
  msg.pop_back();
  throw ConfigError(msg);
}

nlohmann::json to_json(const TrainConfig& c) {
  return nlohmann::json{{"steps", c.steps},
                        {"batch_size", c.batch_size},
                        {"learning_rate", c.learning_rate},
                        {"beta1", c.beta1},
                        {"beta2", c.beta2},
                        {"eps", c.eps},
                        {"grad_clip_norm", c.grad_clip_norm},
                        {"stop_pos_weight", c.stop_pos_weight},
                        {"teacher_forcing", c.teacher_forcing},
                        {"seed", c.seed},
                        {"checkpoint_every", c.checkpoint_every}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  const nlohmann::json defaults = to_json(TrainConfig{});
  for (const auto& [key, _] : j.items()) {
    if (!defaults.contains(key)) throw ConfigError("unknown train config field '" + key + "'");
  }
  TrainConfig c;
  c.steps = field(j, "steps", c.steps);
  c.batch_size = field(j, "batch_size", c.batch_size);
  c.learning_rate = field(j, "learning_rate", c.learning_rate);
  c.beta1 = field(j, "beta1", c.beta1);
  c.beta2 = field(j, "beta2", c.beta2);
  c.eps = field(j, "eps", c.eps);
  c.grad_clip_norm = field(j, "grad_clip_norm", c.grad_clip_norm);
  c.stop_pos_weight = field(j, "stop_pos_weight", c.stop_pos_weight);
  c.teacher_forcing = field(j, "teacher_forcing", c.teacher_forcing);
  c.seed = field(j, "seed", c.seed);
  c.checkpoint_every = field(j, "checkpoint_every", c.checkpoint_every);
  c.validate();
  return c;
}

Tensor stop_targets(std::size_t frames) {
  Tensor t = Tensor::zeros({frames});
  if (frames > 0) t[frames - 1] = 1.0;
  return t;
}

Var loss(const TeacherForcedGraph& graph, const Tensor& target_frames, const Tensor& target_stops,
         double stop_pos_weight) {
  if (graph.frames.shape() != target_frames.shape() || graph.stop_logits.shape() != target_stops.shape()) {
    throw UsageError("loss: output " + shape_str(graph.frames.shape()) + " vs target " +
                     shape_str(target_frames.shape()) + " (stops " + shape_str(graph.stop_logits.shape()) +
                     " vs " + shape_str(target_stops.shape()) + ")");
  }
  Tape& tape = *graph.frames.tape;
  return ops::add(ops::mse(graph.frames, tape.constant(target_frames)),
                  ops::bce_with_logits(graph.stop_logits, tape.constant(target_stops), stop_pos_weight));
}

double loss(const SynthesisOutput& output, const Tensor& target_frames, const Tensor& target_stops,
            double stop_pos_weight) {
  if (output.frames.shape() != target_frames.shape() || output.stop_logits.shape() != target_stops.shape()) {
    throw UsageError("loss: output " + shape_str(output.frames.shape()) + " vs target " +
                     shape_str(target_frames.shape()) + " (stops " + shape_str(output.stop_logits.shape()) +
                     " vs " + shape_str(target_stops.shape()) + ")");
  }
  double se = 0.0;
  const auto p = output.frames.data();
  const auto t = target_frames.data();
  for (std::size_t i = 0; i < p.size(); ++i) se += (p[i] - t[i]) * (p[i] - t[i]);
  double bce = 0.0;
  const auto x = output.stop_logits.data();
  const auto y = target_stops.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    bce += stop_pos_weight == 1.0 ? softplus(x[i]) - y[i] * x[i]
                                  : (1.0 - y[i]) * softplus(x[i]) + stop_pos_weight * y[i] * softplus(-x[i]);
  }
  const double mse = p.empty() ? 0.0 : se / static_cast<double>(p.size());
  return mse + (x.empty() ? 0.0 : bce / static_cast<double>(x.size()));
}

std::vector<std::size_t> batch_indices(const Corpus& corpus, std::uint64_t seed, std::size_t step,
                                       std::size_t batch_size) {
  const std::vector<std::size_t> pool = training_pool(corpus);
  if (pool.empty()) throw UsageError("batch_indices: corpus is empty");
  const std::size_t n = pool.size();
  std::vector<std::size_t> out;
  out.reserve(batch_size);
  std::size_t cached_epoch = static_cast<std::size_t>(-1);
  std::vector<std::size_t> perm;
  for (std::size_t slot = 0; slot < batch_size; ++slot) {
    const std::size_t global = step * batch_size + slot;
    const std::size_t epoch = global / n;
    if (epoch != cached_epoch) {
      perm = pool;
      Rng rng = Rng::stream(seed, kBatchStream).derive(epoch);
      for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
      cached_epoch = epoch;
    }
    out.push_back(perm[global % n]);
  }
  return out;
}

BatchGradient batch_gradient(const Model& model, const Corpus& corpus, std::span<const std::size_t> indices,
                             std::uint64_t dropout_seed, std::size_t step, double stop_pos_weight) {
  const ParameterStore& params = model.params();
  BatchGradient out;
  out.grads.resize(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) out.grads[i].assign(params.at(i).size(), 0.0);
  const double inv_b = 1.0 / static_cast<double>(indices.size());

  for (std::size_t slot = 0; slot < indices.size(); ++slot) {
    const Utterance& u = corpus.utterances.at(indices[slot]);
    Tape tape;
    const ModelVars vars = bind(model, tape, true);
    Rng dropout = Rng::stream(dropout_seed, kDropoutStream).derive(step).derive(slot);
    const TeacherForcedGraph g =
        teacher_forced(model, vars, u.symbol_ids, u.durations, StyleInput{u.style_class}, u.frames, &dropout);
    Var l = loss(g, u.frames, stop_targets(u.num_frames()), stop_pos_weight);
    const double value = l.value()[0];
    if (!std::isfinite(value)) diagnose(step, model, g, value, tape, vars);
    tape.backward(l);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto gi = tape.grad(vars.all[i]);
      if (gi.empty()) continue;
      if (!finite(gi)) diagnose(step, model, g, value, tape, vars);
      auto& acc = out.grads[i];
      for (std::size_t k = 0; k < gi.size(); ++k) acc[k] += inv_b * gi[k];
    }
    out.loss += inv_b * value;
  }
  return out;
}

double evaluate_loss(const Model& model, const Corpus& corpus, std::span<const std::size_t> indices,
                     double stop_pos_weight) {
  if (indices.empty()) throw UsageError("evaluate_loss: no utterances given");
  double total = 0.0;
  for (std::size_t i : indices) {
    const Utterance& u = corpus.utterances.at(i);
    const SynthesisOutput out =
        synthesize_teacher_forced(model, u.symbol_ids, u.durations, StyleInput{u.style_class}, u.frames);
    total += loss(out, u.frames, stop_targets(u.num_frames()), stop_pos_weight);
  }
  return total / static_cast<double>(indices.size());
}

TrainResult train(const ModelConfig& model_config, const Corpus& corpus, const TrainConfig& train_config,
                  const TrainOptions& options) {
  model_config.validate();
  train_config.validate();
  check_compatible(model_config, corpus);
  Model model(model_config, train_config.seed);
  AdamState opt = fresh_adam(model);
  return resume_training(std::move(model), std::move(opt), {}, corpus, train_config, options);
}

TrainResult resume_training(Model model, AdamState optimizer, std::vector<double> losses, const Corpus& corpus,
                            const TrainConfig& tc, const TrainOptions& options) {
  tc.validate();
  check_compatible(model.config(), corpus);
  if (optimizer.m.empty() && optimizer.step == 0) optimizer = fresh_adam(model);
  if (optimizer.m.size() != model.params().size() || optimizer.v.size() != model.params().size()) {
    throw UsageError("resume: optimizer state does not match the model's parameters");
  }
  if (losses.size() != optimizer.step) {
    throw UsageError("resume: loss history has " + std::to_string(losses.size()) + " entries but optimizer is at step " +
                     std::to_string(optimizer.step));
  }
  for (std::size_t step = optimizer.step; step < tc.steps; ++step) {
    const std::vector<std::size_t> idx = batch_indices(corpus, tc.seed, step, tc.batch_size);
    BatchGradient bg = batch_gradient(model, corpus, idx, tc.seed, step, tc.stop_pos_weight);
    adam_update(model, optimizer, tc, bg.grads);
    for (std::size_t i = 0; i < model.params().size(); ++i) {
      if (!model.params().at(i).all_finite()) {
        numeric_abort(step, "updated parameter '" + model.params().name(i) + "'");
      }
    }
    losses.push_back(bg.loss);
    if (options.on_step) options.on_step(step + 1, bg.loss);
    const bool boundary = tc.checkpoint_every > 0 && (step + 1) % tc.checkpoint_every == 0;
    if (boundary && options.on_checkpoint && step + 1 < tc.steps) options.on_checkpoint(model, optimizer, losses);
  }
  if (options.on_checkpoint) options.on_checkpoint(model, optimizer, losses);
  return TrainResult{std::move(model), std::move(optimizer), std::move(losses)};
}

}  // namespace rcalign
