#include "rcalign/model.hpp"

#include <algorithm>
#include <cmath>

#include "rcalign/error.hpp"
#include "rcalign/ops.hpp"

namespace rcalign {

using attention::Mechanism;

namespace {

constexpr std::uint64_t kInitStream = 0x1417;

template <typename T>
T field(const nlohmann::json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config field '") + key + "': " + e.what());
  }
}

struct ParamSpec {
  std::string name;
  Shape shape;
  std::size_t fan_in;
  // LSTM bias: forget-gate slice [d_h, 2 d_h) set to 1.0.
  std::size_t lstm_hidden = 0;
};

std::vector<ParamSpec> param_layout(const ModelConfig& c) {
  const std::size_t h_enc = c.d_enc / 2;
  const std::size_t n_head = c.d_dec + c.d_enc;
  std::vector<ParamSpec> specs = {
      {"text.embedding", {c.vocab_size, c.d_embed}, 1},
      {"text.lstm_fwd.w", {c.d_embed + h_enc, 4 * h_enc}, c.d_embed + h_enc},
      {"text.lstm_fwd.b", {4 * h_enc}, c.d_embed + h_enc, h_enc},
      {"text.lstm_bwd.w", {c.d_embed + h_enc, 4 * h_enc}, c.d_embed + h_enc},
      {"text.lstm_bwd.b", {4 * h_enc}, c.d_embed + h_enc, h_enc},
      {"duration.embedding", {c.n_dur_buckets, c.d_dur}, 1},
      {"style.embedding", {c.n_style_classes, c.d_style}, 1},
      {"style.ref.w", {c.feature_dim, c.d_style}, c.feature_dim},
      {"style.ref.b", {c.d_style}, c.feature_dim},
      {"style.tokens", {c.n_style_tokens, c.d_style}, 1},
  };
  if (c.d_style != c.d_prenet) specs.push_back({"style.to_prenet.w", {c.d_style, c.d_prenet}, c.d_style});
  const std::size_t att_in = c.d_prenet + c.d_enc + c.d_dec;
  const std::size_t dec_in = c.d_dec + c.d_enc + c.d_dec;
  std::vector<ParamSpec> rest = {
      {"prenet.l1.w", {c.feature_dim, c.d_prenet}, c.feature_dim},
      {"prenet.l1.b", {c.d_prenet}, c.feature_dim},
      {"prenet.l2.w", {c.d_prenet, c.d_prenet}, c.d_prenet},
      {"prenet.l2.b", {c.d_prenet}, c.d_prenet},
      {"att_rnn.w", {att_in, 4 * c.d_dec}, att_in},
      {"att_rnn.b", {4 * c.d_dec}, att_in, c.d_dec},
      {"query.w", {c.d_dec, c.d_a}, c.d_dec},
      {"attention.key.w", {c.d_enc, c.d_a}, c.d_enc},
      {"attention.v", {c.d_a, 1}, c.d_a},
  };
  specs.insert(specs.end(), rest.begin(), rest.end());
  switch (c.mechanism) {
    case Mechanism::kLocationSensitive:
      specs.push_back({"attention.location.kernel", {c.location_kernel, 1, c.location_filters}, c.location_kernel});
      specs.push_back({"attention.location.proj", {c.location_filters, c.d_a}, c.location_filters});
      break;
    case Mechanism::kGmm:
      specs.push_back({"attention.gmm.w", {c.d_a, 3 * c.gmm_mixtures}, c.d_a});
      specs.push_back({"attention.gmm.b", {3 * c.gmm_mixtures}, c.d_a});
      break;
    case Mechanism::kForward: {
      const std::size_t agent_in = c.d_enc + c.d_a + c.feature_dim;
      specs.push_back({"attention.agent.w", {agent_in, 1}, agent_in});
      specs.push_back({"attention.agent.b", {1}, agent_in});
      break;
    }
    case Mechanism::kRc:
      specs.push_back({"attention.gate.w", {c.d_a + c.d_dur, 1}, c.d_a + c.d_dur});
      specs.push_back({"attention.gate.b", {1}, c.d_a + c.d_dur});
      break;
  }
  std::vector<ParamSpec> tail = {
      {"dec_rnn.w", {dec_in, 4 * c.d_dec}, dec_in},
      {"dec_rnn.b", {4 * c.d_dec}, dec_in, c.d_dec},
      {"frame.w", {n_head, c.feature_dim}, n_head},
      {"frame.b", {c.feature_dim}, n_head},
      {"stop.w", {n_head, 1}, n_head},
      {"stop.b", {1}, n_head},
  };
  specs.insert(specs.end(), tail.begin(), tail.end());
  return specs;
}

Var linear(Var x, const LinearVars& l) { return ops::add_rows(ops::matmul(x, l.w), l.b); }

Var dropout(Var x, double rate, Rng* rng) {
  if (rng == nullptr || rate <= 0.0) return x;
  Tensor mask(x.shape());
  const double keep_scale = 1.0 / (1.0 - rate);
  for (double& m : mask.data()) m = rng->uniform() < rate ? 0.0 : keep_scale;
  return ops::apply_mask(x, mask);
}

void check_inputs(const ModelConfig& c, std::span<const std::size_t> ids, std::span<const std::size_t> durations) {
  if (ids.empty()) throw UsageError("symbol sequence is empty");
  if (durations.size() != ids.size()) {
    throw UsageError("duration count " + std::to_string(durations.size()) + " does not match symbol count " +
                     std::to_string(ids.size()));
  }
  for (std::size_t id : ids) {
    if (id >= c.vocab_size) {
      throw IndexError("symbol id " + std::to_string(id) + " outside vocabulary [0, " +
                       std::to_string(c.vocab_size) + ")");
    }
  }
}

StyleEncoding encode_style(const Model& m, const ModelVars& v, const StyleInput& style) {
  if (const auto* cls = std::get_if<std::size_t>(&style)) return style_encode_class(m, v, *cls);
  return style_encode_reference(m, v, std::get<Tensor>(style));
}

}  // namespace

void ModelConfig::validate() const {
  std::vector<std::string> problems;
  const std::pair<const char*, std::size_t> dims[] = {
      {"vocab_size", vocab_size}, {"d_embed", d_embed}, {"d_enc", d_enc}, {"d_a", d_a},
      {"d_dur", d_dur}, {"n_dur_buckets", n_dur_buckets}, {"d_style", d_style},
      {"n_style_classes", n_style_classes}, {"n_style_tokens", n_style_tokens},
      {"d_prenet", d_prenet}, {"d_dec", d_dec}, {"feature_dim", feature_dim},
      {"max_decoder_steps", max_decoder_steps}, {"gmm_mixtures", gmm_mixtures},
      {"location_filters", location_filters}, {"location_kernel", location_kernel}};
  for (const auto& [name, value] : dims) {
    if (value < 1) problems.push_back(std::string(name) + " must be >= 1");
  }
  if (d_enc % 2 != 0) problems.emplace_back("d_enc must be even (split across two directions)");
  if (location_kernel % 2 == 0) problems.emplace_back("location_kernel must be odd");
  if (!(prenet_dropout >= 0.0 && prenet_dropout < 1.0)) problems.emplace_back("prenet_dropout must be in [0, 1)");
  if (!problems.empty()) {
    std::string msg = "invalid model config:";
    for (const auto& p : problems) msg += " " + p + ";";
    throw ConfigError(msg);
  }
}

attention::AttentionConfig ModelConfig::attention_config() const {
  attention::AttentionConfig a;
  a.mechanism = mechanism;
  a.gmm_mixtures = gmm_mixtures;
  a.gmm_delta_bias = gmm_delta_bias;
  a.gmm_sigma_bias = gmm_sigma_bias;
  a.location_filters = location_filters;
  a.location_kernel = location_kernel;
  a.rc_product_composition = rc_product_composition;
  return a;
}

nlohmann::json to_json(const ModelConfig& c) {
  return nlohmann::json{{"vocab_size", c.vocab_size},
                        {"d_embed", c.d_embed},
                        {"d_enc", c.d_enc},
                        {"d_a", c.d_a},
                        {"d_dur", c.d_dur},
                        {"n_dur_buckets", c.n_dur_buckets},
                        {"d_style", c.d_style},
                        {"n_style_classes", c.n_style_classes},
                        {"n_style_tokens", c.n_style_tokens},
                        {"d_prenet", c.d_prenet},
                        {"d_dec", c.d_dec},
                        {"feature_dim", c.feature_dim},
                        {"max_decoder_steps", c.max_decoder_steps},
                        {"mechanism", std::string(attention::mechanism_name(c.mechanism))},
                        {"gmm_mixtures", c.gmm_mixtures},
                        {"gmm_delta_bias", c.gmm_delta_bias},
                        {"gmm_sigma_bias", c.gmm_sigma_bias},
                        {"location_filters", c.location_filters},
                        {"location_kernel", c.location_kernel},
                        {"rc_product_composition", c.rc_product_composition},
                        {"prenet_dropout", c.prenet_dropout}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  const nlohmann::json defaults = to_json(ModelConfig{});
  for (const auto& [key, _] : j.items()) {
    if (!defaults.contains(key)) throw ConfigError("unknown model config field '" + key + "'");
  }
  ModelConfig c;
  c.vocab_size = field(j, "vocab_size", c.vocab_size);
  c.d_embed = field(j, "d_embed", c.d_embed);
  c.d_enc = field(j, "d_enc", c.d_enc);
  c.d_a = field(j, "d_a", c.d_a);
  c.d_dur = field(j, "d_dur", c.d_dur);
  c.n_dur_buckets = field(j, "n_dur_buckets", c.n_dur_buckets);
  c.d_style = field(j, "d_style", c.d_style);
  c.n_style_classes = field(j, "n_style_classes", c.n_style_classes);
  c.n_style_tokens = field(j, "n_style_tokens", c.n_style_tokens);
  c.d_prenet = field(j, "d_prenet", c.d_prenet);
  c.d_dec = field(j, "d_dec", c.d_dec);
  c.feature_dim = field(j, "feature_dim", c.feature_dim);
  c.max_decoder_steps = field(j, "max_decoder_steps", c.max_decoder_steps);
  if (j.contains("mechanism")) c.mechanism = attention::parse_mechanism(field<std::string>(j, "mechanism", ""));
  c.gmm_mixtures = field(j, "gmm_mixtures", c.gmm_mixtures);
  c.gmm_delta_bias = field(j, "gmm_delta_bias", c.gmm_delta_bias);
  c.gmm_sigma_bias = field(j, "gmm_sigma_bias", c.gmm_sigma_bias);
  c.location_filters = field(j, "location_filters", c.location_filters);
  c.location_kernel = field(j, "location_kernel", c.location_kernel);
  c.rc_product_composition = field(j, "rc_product_composition", c.rc_product_composition);
  c.prenet_dropout = field(j, "prenet_dropout", c.prenet_dropout);
  c.validate();
  return c;
}

std::size_t quantize_duration(std::size_t frames, std::size_t n_buckets) {
  if (frames < 1) throw ValueError("duration must be >= 1 frame, got " + std::to_string(frames));
  if (n_buckets < 1) throw ConfigError("n_dur_buckets must be >= 1");
  std::size_t bucket = 0;
  std::size_t upper = 4;
  while (bucket + 1 < n_buckets && frames > upper) {
    ++bucket;
    upper *= 2;
  }
  return bucket;
}

void ParameterStore::add(std::string name, Tensor value) {
  if (contains(name)) throw UsageError("duplicate parameter " + name);
  names_.push_back(std::move(name));
  tensors_.push_back(std::move(value));
}

bool ParameterStore::contains(const std::string& name) const {
  return std::find(names_.begin(), names_.end(), name) != names_.end();
}

std::size_t ParameterStore::index_of(const std::string& name) const {
  const auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) throw UsageError("unknown parameter " + name);
  return static_cast<std::size_t>(it - names_.begin());
}

std::size_t ParameterStore::num_values() const {
  std::size_t n = 0;
  for (const Tensor& t : tensors_) n += t.size();
  return n;
}

Model::Model(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  for (const ParamSpec& spec : param_layout(config_)) params_.add(spec.name, Tensor(spec.shape));
}

Model Model::empty(ModelConfig config) { return Model(std::move(config)); }

Model::Model(ModelConfig config, std::uint64_t init_seed) : Model(std::move(config)) {
  const Rng base = Rng::stream(init_seed, kInitStream);
  for (const ParamSpec& spec : param_layout(config_)) {
    Rng rng = base.derive(fnv1a64(spec.name));
    Tensor& t = params_.at(spec.name);
    const double bound = 1.0 / std::sqrt(static_cast<double>(spec.fan_in));
    for (double& v : t.data()) v = rng.uniform(-bound, bound);
    if (spec.lstm_hidden > 0) {
      for (std::size_t k = spec.lstm_hidden; k < 2 * spec.lstm_hidden; ++k) t[k] = 1.0;
    }
  }
}

ModelVars bind(const Model& model, Tape& tape, bool trainable) {
  const ParameterStore& ps = model.params();
  ModelVars v;
  v.all.reserve(ps.size());
  for (std::size_t i = 0; i < ps.size(); ++i) v.all.push_back(tape.external(ps.at(i), trainable));
  auto get = [&](const char* name) { return v.all[ps.index_of(name)]; };
  v.text_embedding = get("text.embedding");
  v.text_fwd = {get("text.lstm_fwd.w"), get("text.lstm_fwd.b")};
  v.text_bwd = {get("text.lstm_bwd.w"), get("text.lstm_bwd.b")};
  v.dur_embedding = get("duration.embedding");
  v.style_embedding = get("style.embedding");
  v.style_ref = {get("style.ref.w"), get("style.ref.b")};
  v.style_tokens = get("style.tokens");
  if (ps.contains("style.to_prenet.w")) v.style_to_prenet = get("style.to_prenet.w");
  v.prenet1 = {get("prenet.l1.w"), get("prenet.l1.b")};
  v.prenet2 = {get("prenet.l2.w"), get("prenet.l2.b")};
  v.att_rnn = {get("att_rnn.w"), get("att_rnn.b")};
  v.query_w = get("query.w");
  v.attention.key_proj = get("attention.key.w");
  v.attention.energy_proj = get("attention.v");
  switch (model.config().mechanism) {
    case Mechanism::kLocationSensitive:
      v.attention.location_kernel = get("attention.location.kernel");
      v.attention.location_proj = get("attention.location.proj");
      break;
    case Mechanism::kGmm:
      v.attention.gmm_w = get("attention.gmm.w");
      v.attention.gmm_b = get("attention.gmm.b");
      break;
    case Mechanism::kForward:
      v.attention.agent_w = get("attention.agent.w");
      v.attention.agent_b = get("attention.agent.b");
      break;
    case Mechanism::kRc:
      v.attention.gate_w = get("attention.gate.w");
      v.attention.gate_b = get("attention.gate.b");
      break;
  }
  v.dec_rnn = {get("dec_rnn.w"), get("dec_rnn.b")};
  v.frame_head = {get("frame.w"), get("frame.b")};
  v.stop_head = {get("stop.w"), get("stop.b")};
  return v;
}

attention::EncoderMemory text_encode(const Model& model, const ModelVars& v,
                                     std::span<const std::size_t> symbol_ids) {
  if (symbol_ids.empty()) throw UsageError("text_encode: empty symbol sequence");
  Tape& tape = *v.text_embedding.tape;
  const std::size_t n = symbol_ids.size();
  const std::size_t h = model.config().d_enc / 2;
  Var embedded = ops::embedding_lookup(v.text_embedding, symbol_ids);
  std::vector<Var> rows(n);
  for (std::size_t j = 0; j < n; ++j) rows[j] = ops::row(embedded, j);

  std::vector<Var> fwd(n), bwd(n);
  Var hf = tape.constant(Tensor({h})), cf = tape.constant(Tensor({h}));
  for (std::size_t j = 0; j < n; ++j) {
    auto out = ops::lstm_cell(rows[j], hf, cf, v.text_fwd.w, v.text_fwd.b);
    hf = fwd[j] = out.h;
    cf = out.c;
  }
  Var hb = tape.constant(Tensor({h})), cb = tape.constant(Tensor({h}));
  for (std::size_t j = n; j-- > 0;) {
    auto out = ops::lstm_cell(rows[j], hb, cb, v.text_bwd.w, v.text_bwd.b);
    hb = bwd[j] = out.h;
    cb = out.c;
  }
  std::vector<Var> states(n);
  for (std::size_t j = 0; j < n; ++j) states[j] = ops::concat(fwd[j], bwd[j], 0);
  return attention::make_memory(ops::stack_rows(states), v.attention.key_proj);
}

Var duration_encode(const Model& model, const ModelVars& v, std::span<const std::size_t> durations) {
  std::vector<std::size_t> buckets(durations.size());
  for (std::size_t j = 0; j < durations.size(); ++j) {
    buckets[j] = quantize_duration(durations[j], model.config().n_dur_buckets);
  }
  return ops::embedding_lookup(v.dur_embedding, buckets);
}

StyleEncoding style_encode_class(const Model& model, const ModelVars& v, std::size_t style_class) {
  if (style_class >= model.config().n_style_classes) {
    throw IndexError("style class " + std::to_string(style_class) + " outside [0, " +
                     std::to_string(model.config().n_style_classes) + ")");
  }
  const std::size_t ids[] = {style_class};
  return StyleEncoding{ops::row(ops::embedding_lookup(v.style_embedding, ids), 0), std::nullopt};
}

StyleEncoding style_encode_reference(const Model& model, const ModelVars& v, const Tensor& reference) {
  const ModelConfig& c = model.config();
  if (reference.rank() != 2 || reference.dim(0) == 0) {
    throw UsageError("style_encode: reference frames must be a nonempty [T x F] matrix");
  }
  if (reference.dim(1) != c.feature_dim) {
    throw DimensionError("style_encode: reference has " + std::to_string(reference.dim(1)) +
                         " features, model expects " + std::to_string(c.feature_dim));
  }
  Tape& tape = *v.style_tokens.tape;
  const std::size_t T = reference.dim(0);
  Var pool = tape.constant(Tensor::filled({T}, 1.0 / static_cast<double>(T)));
  Var pooled = ops::matmul(pool, tape.constant(reference));
  Var query = linear(pooled, v.style_ref);
  Var scores = ops::reshape(ops::matmul(v.style_tokens, ops::reshape(query, {c.d_style, 1})),
                            {c.n_style_tokens});
  Var weights = ops::softmax(ops::scale(scores, 1.0 / std::sqrt(static_cast<double>(c.d_style))), 0);
  return StyleEncoding{ops::matmul(weights, v.style_tokens), weights};
}

DecoderState init_decoder_state(const Model& model, Tape& tape, std::size_t length) {
  const ModelConfig& c = model.config();
  DecoderState s;
  s.att_h = tape.constant(Tensor({c.d_dec}));
  s.att_c = tape.constant(Tensor({c.d_dec}));
  s.dec_h = tape.constant(Tensor({c.d_dec}));
  s.dec_c = tape.constant(Tensor({c.d_dec}));
  s.context = tape.constant(Tensor({c.d_enc}));
  s.prev_frame = tape.constant(Tensor({c.feature_dim}));
  s.attention = attention::init_state(tape, c.attention_config(), length);
  return s;
}

DecoderStepOutput decoder_step(const Model& model, const ModelVars& v,
                               const attention::AttentionConfig& att_cfg, const DecoderState& state,
                               const attention::EncoderMemory& memory, std::optional<Var> durations,
                               Var style, std::optional<Var> teacher_frame, Rng* rng) {
  const ModelConfig& c = model.config();
  Var pre = dropout(ops::relu(linear(state.prev_frame, v.prenet1)), c.prenet_dropout, rng);
  pre = dropout(ops::relu(linear(pre, v.prenet2)), c.prenet_dropout, rng);
  Var style_in = v.style_to_prenet ? ops::matmul(style, *v.style_to_prenet) : style;
  Var att_in = ops::concat(ops::add(pre, style_in), state.context, 0);
  auto att = ops::lstm_cell(att_in, state.att_h, state.att_c, v.att_rnn.w, v.att_rnn.b);
  Var query = ops::matmul(att.h, v.query_w);

  attention::StepInputs in{query, durations, state.prev_frame};
  attention::StepResult ar = attention::attention_step(att_cfg, v.attention, state.attention, in, memory);

  auto dec = ops::lstm_cell(ops::concat(att.h, ar.context, 0), state.dec_h, state.dec_c, v.dec_rnn.w, v.dec_rnn.b);
  Var head_in = ops::concat(dec.h, ar.context, 0);
  Var frame = linear(head_in, v.frame_head);
  Var stop = linear(head_in, v.stop_head);

  DecoderState next;
  next.att_h = att.h;
  next.att_c = att.c;
  next.dec_h = dec.h;
  next.dec_c = dec.c;
  next.context = ar.context;
  next.attention = std::move(ar.state);
  next.prev_frame = teacher_frame ? *teacher_frame : frame;
  next.step_index = state.step_index + 1;
  return DecoderStepOutput{frame, stop, ar.alignment, ar.gates, std::move(next)};
}

TeacherForcedGraph teacher_forced(const Model& model, const ModelVars& v,
                                  std::span<const std::size_t> symbol_ids,
                                  std::span<const std::size_t> durations, const StyleInput& style,
                                  const Tensor& targets, Rng* rng) {
  const ModelConfig& c = model.config();
  check_inputs(c, symbol_ids, durations);
  if (targets.rank() != 2 || targets.dim(0) == 0 || targets.dim(1) != c.feature_dim) {
    throw DimensionError("teacher_forced: targets must be [T x " + std::to_string(c.feature_dim) + "], got " +
                         shape_str(targets.shape()));
  }
  Tape& tape = *v.text_embedding.tape;
  const attention::EncoderMemory memory = text_encode(model, v, symbol_ids);
  Var dur = duration_encode(model, v, durations);
  const std::optional<Var> dur_in = c.mechanism == Mechanism::kRc ? std::optional<Var>(dur) : std::nullopt;
  Var style_vec = encode_style(model, v, style).embedding;
  const attention::AttentionConfig att_cfg = c.attention_config();

  DecoderState state = init_decoder_state(model, tape, memory.length);
  const std::size_t T = targets.dim(0);
  std::vector<Var> frames, stops, aligns, gates;
  for (std::size_t t = 0; t < T; ++t) {
    Tensor target_row({c.feature_dim});
    std::copy_n(targets.data().data() + t * c.feature_dim, c.feature_dim, target_row.data().data());
    DecoderStepOutput out = decoder_step(model, v, att_cfg, state, memory, dur_in, style_vec,
                                         tape.constant(std::move(target_row)), rng);
    frames.push_back(out.frame);
    stops.push_back(out.stop_logit);
    aligns.push_back(out.alignment);
    if (out.gates) gates.push_back(*out.gates);
    state = std::move(out.state);
  }
  TeacherForcedGraph g;
  g.frames = ops::stack_rows(frames);
  g.stop_logits = ops::reshape(ops::stack_rows(stops), {T});
  g.alignment = ops::stack_rows(aligns);
  if (!gates.empty()) g.omegas = ops::stack_rows(gates);
  return g;
}

SynthesisOutput to_output(const TeacherForcedGraph& g) {
  SynthesisOutput out;
  out.frames = g.frames.value();
  out.stop_logits = g.stop_logits.value();
  out.alignment = g.alignment.value();
  if (g.omegas) out.omegas = g.omegas->value();
  return out;
}

SynthesisOutput synthesize_teacher_forced(const Model& model, std::span<const std::size_t> symbol_ids,
                                          std::span<const std::size_t> durations,
                                          const StyleInput& style, const Tensor& targets) {
  Tape tape;
  tape.set_grad_enabled(false);
  const ModelVars v = bind(model, tape, false);
  return to_output(teacher_forced(model, v, symbol_ids, durations, style, targets, nullptr));
}

SynthesisOutput synthesize_free_run(const Model& model, std::span<const std::size_t> symbol_ids,
                                    std::span<const std::size_t> durations, const StyleInput& style,
                                    const FreeRunOptions& options) {
  const ModelConfig& c = model.config();
  check_inputs(c, symbol_ids, durations);
  const std::size_t max_steps = options.max_steps.value_or(c.max_decoder_steps);
  if (max_steps < 1) throw ConfigError("max decoder steps must be >= 1");
  attention::AttentionConfig att_cfg = c.attention_config();
  att_cfg.forward_transition_override = options.forward_transition;

  Tape tape;
  tape.set_grad_enabled(false);
  const ModelVars v = bind(model, tape, false);
  const attention::EncoderMemory memory = text_encode(model, v, symbol_ids);
  Var dur = duration_encode(model, v, durations);
  const std::optional<Var> dur_in = c.mechanism == Mechanism::kRc ? std::optional<Var>(dur) : std::nullopt;
  Var style_vec = encode_style(model, v, style).embedding;
  const std::size_t mark = tape.size();
  const std::size_t n = memory.length;

  // Recurrent values carried across steps; the tape is rewound to `mark`
  // after every step so memory stays bounded.
  struct Carry {
    Tensor att_h, att_c, dec_h, dec_c, context, prev_frame, prev_alignment;
    std::optional<Tensor> cumulative, gmm_means, transition_prob;
  };
  std::optional<Carry> carry;
  auto restore = [&](const Carry& k) {
    DecoderState s;
    s.att_h = tape.constant(k.att_h);
    s.att_c = tape.constant(k.att_c);
    s.dec_h = tape.constant(k.dec_h);
    s.dec_c = tape.constant(k.dec_c);
    s.context = tape.constant(k.context);
    s.prev_frame = tape.constant(k.prev_frame);
    s.attention.prev_alignment = tape.constant(k.prev_alignment);
    if (k.cumulative) s.attention.cumulative = tape.constant(*k.cumulative);
    if (k.gmm_means) s.attention.gmm_means = tape.constant(*k.gmm_means);
    if (k.transition_prob) s.attention.transition_prob = tape.constant(*k.transition_prob);
    return s;
  };

  std::vector<double> frames, stops, aligns, omegas;
  SynthesisOutput out;
  out.truncated = true;
  std::size_t steps = 0;
  while (steps < max_steps) {
    tape.truncate(mark);
    DecoderState state = carry ? restore(*carry) : init_decoder_state(model, tape, n);
    state.step_index = steps;
    DecoderStepOutput o = decoder_step(model, v, att_cfg, state, memory, dur_in, style_vec, std::nullopt, nullptr);
    const auto& fv = o.frame.value().storage();
    frames.insert(frames.end(), fv.begin(), fv.end());
    const double stop_logit = o.stop_logit.value()[0];
    stops.push_back(stop_logit);
    const auto& av = o.alignment.value().storage();
    aligns.insert(aligns.end(), av.begin(), av.end());
    if (o.gates) {
      const auto& gv = o.gates->value().storage();
      omegas.insert(omegas.end(), gv.begin(), gv.end());
    }
    ++steps;
    if (stop_logit > 0.0) {  // sigmoid(stop) > 0.5
      out.truncated = false;
      break;
    }
    Carry k;
    k.att_h = o.state.att_h.value();
    k.att_c = o.state.att_c.value();
    k.dec_h = o.state.dec_h.value();
    k.dec_c = o.state.dec_c.value();
    k.context = o.state.context.value();
    k.prev_frame = o.frame.value();
    k.prev_alignment = o.state.attention.prev_alignment.value();
    if (o.state.attention.cumulative) k.cumulative = o.state.attention.cumulative->value();
    if (o.state.attention.gmm_means) k.gmm_means = o.state.attention.gmm_means->value();
    if (o.state.attention.transition_prob) k.transition_prob = o.state.attention.transition_prob->value();
    carry = std::move(k);
  }
  out.frames = Tensor({steps, c.feature_dim}, std::move(frames));
  out.stop_logits = Tensor({steps}, std::move(stops));
  out.alignment = Tensor({steps, n}, std::move(aligns));
  if (!omegas.empty()) out.omegas = Tensor({steps, n}, std::move(omegas));
  return out;
}

}  // namespace rcalign
