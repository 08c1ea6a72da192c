#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "rcalign/attention.hpp"
#include "rcalign/autodiff.hpp"
#include "rcalign/prng.hpp"
#include "rcalign/tensor.hpp"

namespace rcalign {

struct ModelConfig {
  std::size_t vocab_size = 40;
  std::size_t d_embed = 32;
  std::size_t d_enc = 64;
  std::size_t d_a = 64;
  std::size_t d_dur = 16;
  std::size_t n_dur_buckets = 5;
  std::size_t d_style = 16;
  std::size_t n_style_classes = 3;
  std::size_t n_style_tokens = 10;
  std::size_t d_prenet = 32;
  std::size_t d_dec = 128;
  std::size_t feature_dim = 16;
  std::size_t max_decoder_steps = 2000;
  attention::Mechanism mechanism = attention::Mechanism::kRc;
  std::size_t gmm_mixtures = 5;
  double gmm_delta_bias = 0.2;
  double gmm_sigma_bias = 2.0;
  std::size_t location_filters = 8;
  std::size_t location_kernel = 15;
  bool rc_product_composition = false;
  double prenet_dropout = 0.5;

  void validate() const;
  attention::AttentionConfig attention_config() const;
};

nlohmann::json to_json(const ModelConfig& cfg);
// Keys mirror the field names; unknown keys raise ConfigError.
ModelConfig model_config_from_json(const nlohmann::json& j);

// Duration bucket: upper bounds 4, 8, 16, 32, ... (doubling), last bucket
// open-ended. With 5 buckets: [1..4] [5..8] [9..16] [17..32] [33..inf).
std::size_t quantize_duration(std::size_t frames, std::size_t n_buckets = 5);

// Ordered named tensors.
class ParameterStore {
 public:
  void add(std::string name, Tensor value);
  bool contains(const std::string& name) const;
  std::size_t index_of(const std::string& name) const;
  Tensor& at(const std::string& name) { return tensors_[index_of(name)]; }
  const Tensor& at(const std::string& name) const { return tensors_[index_of(name)]; }
  Tensor& at(std::size_t i) { return tensors_[i]; }
  const Tensor& at(std::size_t i) const { return tensors_[i]; }
  const std::string& name(std::size_t i) const { return names_[i]; }
  std::size_t size() const { return names_.size(); }
  std::size_t num_values() const;
  bool operator==(const ParameterStore& other) const = default;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
};

class Model {
 public:
  // Parameters drawn uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) from streams of
  // `init_seed`; LSTM forget-gate biases start at 1.0.
  Model(ModelConfig config, std::uint64_t init_seed);
  // Builds the parameter layout with zeroed tensors (filled by a loader).
  static Model empty(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

 private:
  explicit Model(ModelConfig config);
  ModelConfig config_;
  ParameterStore params_;
};

struct LinearVars {
  Var w;
  Var b;
};

// Model parameters bound onto one tape.
struct ModelVars {
  std::vector<Var> all;  // ParameterStore order
  Var text_embedding;
  LinearVars text_fwd;
  LinearVars text_bwd;
  Var dur_embedding;
  Var style_embedding;
  LinearVars style_ref;
  Var style_tokens;
  std::optional<Var> style_to_prenet;
  LinearVars prenet1;
  LinearVars prenet2;
  LinearVars att_rnn;
  Var query_w;
  attention::AttentionParams attention;
  LinearVars dec_rnn;
  LinearVars frame_head;
  LinearVars stop_head;
};

ModelVars bind(const Model& model, Tape& tape, bool trainable);

// Embedding -> bidirectional LSTM -> [N x d_enc]; keys projected for attention.
attention::EncoderMemory text_encode(const Model& model, const ModelVars& vars,
                                     std::span<const std::size_t> symbol_ids);

// Bucketized duration embeddings, [N x d_dur]. Durations < 1 raise ValueError.
Var duration_encode(const Model& model, const ModelVars& vars, std::span<const std::size_t> durations);

struct StyleEncoding {
  Var embedding;                         // [d_style]
  std::optional<Var> token_weights;      // [n_tokens], reference mode only
};
StyleEncoding style_encode_class(const Model& model, const ModelVars& vars, std::size_t style_class);
// Mean-pooled reference frames attend over the token bank.
StyleEncoding style_encode_reference(const Model& model, const ModelVars& vars, const Tensor& reference);

struct DecoderState {
  Var att_h, att_c;
  Var dec_h, dec_c;
  Var context;
  attention::AttentionState attention;
  Var prev_frame;
  std::size_t step_index = 0;
};

DecoderState init_decoder_state(const Model& model, Tape& tape, std::size_t length);

struct DecoderStepOutput {
  Var frame;       // [F]
  Var stop_logit;  // [1]
  Var alignment;   // [N]
  std::optional<Var> gates;
  DecoderState state;
};

// Prenet dropout masks are drawn from `dropout` when non-null.
DecoderStepOutput decoder_step(const Model& model, const ModelVars& vars,
                               const attention::AttentionConfig& att_cfg, const DecoderState& state,
                               const attention::EncoderMemory& memory, std::optional<Var> durations,
                               Var style, std::optional<Var> teacher_frame, Rng* dropout);

struct SynthesisOutput {
  Tensor frames;       // [T x F]
  Tensor stop_logits;  // [T]
  Tensor alignment;    // [T x N]
  std::optional<Tensor> omegas;  // [T x N], RC only
  bool truncated = false;
};

using StyleInput = std::variant<std::size_t, Tensor>;

// Teacher-forced pass recorded on a tape (for training and gradient checks).
struct TeacherForcedGraph {
  Var frames;
  Var stop_logits;
  Var alignment;
  std::optional<Var> omegas;
};
TeacherForcedGraph teacher_forced(const Model& model, const ModelVars& vars,
                                  std::span<const std::size_t> symbol_ids,
                                  std::span<const std::size_t> durations, const StyleInput& style,
                                  const Tensor& targets, Rng* dropout);

SynthesisOutput to_output(const TeacherForcedGraph& g);

struct FreeRunOptions {
  std::optional<std::size_t> max_steps;         // defaults to config.max_decoder_steps
  std::optional<double> forward_transition;     // Forward Attention agent override
};

// Autoregressive synthesis: stops when sigmoid(stop_logit) > 0.5 (the frame
// is kept) or flags `truncated` after max steps.
SynthesisOutput synthesize_free_run(const Model& model, std::span<const std::size_t> symbol_ids,
                                    std::span<const std::size_t> durations, const StyleInput& style,
                                    const FreeRunOptions& options = {});

// Teacher-forced synthesis returning values only (exactly T frames).
SynthesisOutput synthesize_teacher_forced(const Model& model, std::span<const std::size_t> symbol_ids,
                                          std::span<const std::size_t> durations,
                                          const StyleInput& style, const Tensor& targets);

}  // namespace rcalign
