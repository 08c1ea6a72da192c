#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rcalign/autodiff.hpp"

// Per-decoder-step alignment for the four compared mechanisms. All step
// functions are pure in (state, inputs, params): they record onto the tape of
// their inputs and return a fresh state.
namespace rcalign::attention {

enum class Mechanism { kLocationSensitive, kGmm, kForward, kRc };

std::string_view mechanism_name(Mechanism m);
// Throws ConfigError listing the valid names.
Mechanism parse_mechanism(std::string_view name);
const std::vector<std::string>& mechanism_names();

struct AttentionConfig {
  Mechanism mechanism = Mechanism::kRc;
  std::size_t gmm_mixtures = 5;
  double gmm_delta_bias = 0.2;
  double gmm_sigma_bias = 2.0;
  std::size_t location_filters = 8;
  std::size_t location_kernel = 15;
  // Multiply the RC recursion output by softmax(energy) and renormalize.
  bool rc_product_composition = false;
  // External transition probability for Forward Attention (inference only).
  std::optional<double> forward_transition_override;
};

// Encoder outputs plus keys projected to the attention dimension.
struct EncoderMemory {
  Var hidden;  // [N x d_enc]
  Var keys;    // [N x d_a]
  std::size_t length = 0;
};

// Learned parameters; members unused by a mechanism are left unbound.
struct AttentionParams {
  Var key_proj;     // [d_enc x d_a]
  Var energy_proj;  // [d_a x 1], the additive-attention vector v
  Var location_kernel;  // [k x 1 x filters]
  Var location_proj;    // [filters x d_a]
  Var gmm_w;            // [d_a x 3K]
  Var gmm_b;            // [3K]
  Var agent_w;          // [(d_enc + d_a + F) x 1]
  Var agent_b;          // [1]
  Var gate_w;           // [(d_a + d_dur) x 1]
  Var gate_b;           // [1]
};

struct AttentionState {
  Var prev_alignment;                  // [N]
  std::optional<Var> cumulative;       // [N], location-sensitive
  std::optional<Var> gmm_means;        // [K], GMM
  std::optional<Var> transition_prob;  // [1], Forward Attention
};

struct StepInputs {
  Var query;                     // [d_a], projected attention-RNN state
  std::optional<Var> durations;  // [N x d_dur], RC only
  std::optional<Var> prev_frame; // [F], Forward Attention agent input
};

struct StepResult {
  Var alignment;  // [N]
  Var context;    // [d_enc]
  AttentionState state;
  std::optional<Var> gates;  // [N] transition gates (RC only)
};

EncoderMemory make_memory(Var hidden, Var key_proj);

// prev_alignment one-hot at position 0; cumulative zeros; GMM means zeros;
// transition probability 0.5. N = 0 raises ConfigError.
AttentionState init_state(Tape& tape, const AttentionConfig& cfg, std::size_t length);

struct Energy {
  Var vectors;  // [N x d_a] = tanh(query + keys_j)
  Var scalars;  // [N] = vectors . v
};
Energy additive_energy(Var query, const EncoderMemory& memory, Var energy_proj);

// omega_j = sigmoid(W . concat(energy_vectors_j, durations_j) + b).
Var rc_transition_gates(Var energy_vectors, Var durations, Var gate_w, Var gate_b);

// a_j = (1 - w_{j-1}) p_{j-1} + w_j p_j with p_{-1} = 0 and the outgoing gate
// at the last position clamped to 1, so the output keeps unit mass. Raises
// StateCorruptionError when |sum(prev) - 1| > 1e-6.
Var rc_recursion(Var prev, Var gates);

// Value-level form of rc_recursion (no tape).
std::vector<double> rc_recursion_values(std::span<const double> prev, std::span<const double> gates);

// Mixture alignment normalized over positions 0..N-1:
//   a_j proportional to sum_k softmax(logits)_k exp(-(j - mu_k)^2 / (2 sigma_k^2)),
// evaluated in the log domain so that far-off means never underflow to 0/0.
Var gmm_alignment(Var logits, Var means, Var stds, std::size_t length);

StepResult rc_attention_step(const AttentionConfig& cfg, const AttentionParams& p,
                             const AttentionState& state, const StepInputs& in,
                             const EncoderMemory& memory);
StepResult location_sensitive_step(const AttentionConfig& cfg, const AttentionParams& p,
                                   const AttentionState& state, const StepInputs& in,
                                   const EncoderMemory& memory);
StepResult gmm_attention_step(const AttentionConfig& cfg, const AttentionParams& p,
                              const AttentionState& state, const StepInputs& in,
                              const EncoderMemory& memory);
StepResult forward_attention_step(const AttentionConfig& cfg, const AttentionParams& p,
                                  const AttentionState& state, const StepInputs& in,
                                  const EncoderMemory& memory);

// Dispatches on cfg.mechanism.
StepResult attention_step(const AttentionConfig& cfg, const AttentionParams& p,
                          const AttentionState& state, const StepInputs& in,
                          const EncoderMemory& memory);

// c = sum_j a_j h_j
Var context_vector(Var alignment, const EncoderMemory& memory);

}  // namespace rcalign::attention
