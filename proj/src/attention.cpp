#include "rcalign/attention.hpp"

#include <algorithm>
#include <cmath>

#include "rcalign/error.hpp"
#include "rcalign/ops.hpp"

namespace rcalign::attention {
namespace {

constexpr double kNormTolerance = 1e-6;

void check_normalized(std::span<const double> a, const char* where) {
  double total = 0.0;
  for (double v : a) total += v;
  if (!(std::abs(total - 1.0) <= kNormTolerance)) {
    throw StateCorruptionError(std::string(where) + ": previous alignment sums to " +
                               std::to_string(total) + ", expected 1");
  }
}

Tape& tape_of(Var v) { return *v.tape; }

StepResult finish(Var alignment, const EncoderMemory& memory, AttentionState next) {
  next.prev_alignment = alignment;
  return StepResult{alignment, context_vector(alignment, memory), std::move(next), std::nullopt};
}

}  // namespace

std::string_view mechanism_name(Mechanism m) {
  switch (m) {
    case Mechanism::kLocationSensitive: return "location_sensitive";
    case Mechanism::kGmm: return "gmm";
    case Mechanism::kForward: return "forward";
    case Mechanism::kRc: return "rc";
  }
  return "unknown";
}

const std::vector<std::string>& mechanism_names() {
  static const std::vector<std::string> names = {"location_sensitive", "gmm", "forward", "rc"};
  return names;
}

Mechanism parse_mechanism(std::string_view name) {
  if (name == "location_sensitive") return Mechanism::kLocationSensitive;
  if (name == "gmm") return Mechanism::kGmm;
  if (name == "forward") return Mechanism::kForward;
  if (name == "rc") return Mechanism::kRc;
  throw ConfigError("unknown mechanism '" + std::string(name) +
                    "'; valid names: location_sensitive, gmm, forward, rc");
}

EncoderMemory make_memory(Var hidden, Var key_proj) {
  const std::size_t n = hidden.value().rank() == 2 ? hidden.value().dim(0) : 0;
  if (n == 0) throw UsageError("encoder memory must have at least one position");
  return EncoderMemory{hidden, ops::matmul(hidden, key_proj), n};
}

AttentionState init_state(Tape& tape, const AttentionConfig& cfg, std::size_t length) {
  if (length == 0) throw ConfigError("init_state: sequence length must be >= 1");
  AttentionState s;
  Tensor one_hot({length});
  one_hot[0] = 1.0;
  s.prev_alignment = tape.constant(std::move(one_hot));
  switch (cfg.mechanism) {
    case Mechanism::kLocationSensitive:
      s.cumulative = tape.constant(Tensor({length}));
      break;
    case Mechanism::kGmm:
      if (cfg.gmm_mixtures < 1) throw ConfigError("gmm_mixtures must be >= 1");
      s.gmm_means = tape.constant(Tensor({cfg.gmm_mixtures}));
      break;
    case Mechanism::kForward:
      s.transition_prob = tape.constant(Tensor::vector({0.5}));
      break;
    case Mechanism::kRc:
      break;
  }
  return s;
}

Energy additive_energy(Var query, const EncoderMemory& memory, Var energy_proj) {
  if (query.value().rank() != 1) {
    throw DimensionError("additive_energy: query must be rank 1, got " + shape_str(query.shape()));
  }
  Var vectors = ops::tanh(ops::add_rows(memory.keys, query));
  Var scalars = ops::reshape(ops::matmul(vectors, energy_proj), {memory.length});
  return Energy{vectors, scalars};
}

Var rc_transition_gates(Var energy_vectors, Var durations, Var gate_w, Var gate_b) {
  const Shape es = energy_vectors.shape();
  const Shape ds = durations.shape();
  if (es.size() != 2 || ds.size() != 2 || es[0] != ds[0]) {
    throw DimensionError("rc_transition_gates: energy " + shape_str(es) + " and durations " +
                         shape_str(ds) + " need matching row counts");
  }
  Var logits = ops::add_rows(ops::matmul(ops::concat(energy_vectors, durations, 1), gate_w), gate_b);
  return ops::reshape(ops::sigmoid(logits), {es[0]});
}

std::vector<double> rc_recursion_values(std::span<const double> prev, std::span<const double> gates) {
  const std::size_t n = prev.size();
  std::vector<double> out(n);
  for (std::size_t j = 0; j < n; ++j) {
    const double stay = (j + 1 == n) ? 1.0 : gates[j];
    const double arrive = j == 0 ? 0.0 : (1.0 - gates[j - 1]) * prev[j - 1];
    out[j] = arrive + stay * prev[j];
  }
  return out;
}

Var rc_recursion(Var prev, Var gates) {
  const Tensor& pv = prev.value();
  const Tensor& gv = gates.value();
  if (pv.rank() != 1 || gv.rank() != 1 || pv.size() != gv.size()) {
    throw DimensionError("rc_recursion: alignment " + shape_str(pv.shape()) + " and gates " +
                         shape_str(gv.shape()) + " differ");
  }
  check_normalized(pv.data(), "rc_recursion");
  const std::size_t n = pv.size();
  Tensor out({n}, rc_recursion_values(pv.data(), gv.data()));
  return tape_of(prev).record(std::move(out), {prev, gates}, [prev, gates, n](Tape& t, std::uint32_t self) {
    const auto g = t.grad_of(self);
    const Tensor& pv = t.value(prev.id);
    const Tensor& gv = t.value(gates.id);
    if (t.requires_grad(prev.id)) {
      auto& gp = t.grad_buffer(prev.id);
      for (std::size_t j = 0; j < n; ++j) {
        const bool last = j + 1 == n;
        gp[j] += g[j] * (last ? 1.0 : gv[j]);
        if (!last) gp[j] += g[j + 1] * (1.0 - gv[j]);
      }
    }
    if (t.requires_grad(gates.id)) {
      auto& gg = t.grad_buffer(gates.id);
      for (std::size_t j = 0; j + 1 < n; ++j) gg[j] += pv[j] * (g[j] - g[j + 1]);
    }
  });
}

Var gmm_alignment(Var logits, Var means, Var stds, std::size_t length) {
  const std::size_t K = logits.size();
  if (means.size() != K || stds.size() != K) {
    throw DimensionError("gmm_alignment: logits " + shape_str(logits.shape()) + ", means " +
                         shape_str(means.shape()) + ", stds " + shape_str(stds.shape()) + " differ");
  }
  const Tensor& lw = logits.value();
  const Tensor& mu = means.value();
  const Tensor& sd = stds.value();
  // s_j = logsumexp_k(l_k - (j - mu_k)^2 / (2 sd_k^2)); a = softmax(s).
  // The log-normalizer of the mixture weights is constant in j and cancels.
  std::vector<double> s(length);
  std::vector<double> term(K);
  for (std::size_t j = 0; j < length; ++j) {
    double mx = -INFINITY;
    for (std::size_t k = 0; k < K; ++k) {
      const double z = static_cast<double>(j) - mu[k];
      term[k] = lw[k] - z * z / (2.0 * sd[k] * sd[k]);
      mx = std::max(mx, term[k]);
    }
    double acc = 0.0;
    for (std::size_t k = 0; k < K; ++k) acc += std::exp(term[k] - mx);
    s[j] = mx + std::log(acc);
  }
  const double smax = *std::max_element(s.begin(), s.end());
  Tensor out({length});
  double total = 0.0;
  for (std::size_t j = 0; j < length; ++j) {
    out[j] = std::exp(s[j] - smax);
    total += out[j];
  }
  for (std::size_t j = 0; j < length; ++j) out[j] /= total;
  return tape_of(logits).record(std::move(out), {logits, means, stds},
                                [logits, means, stds, K, length, s = std::move(s)](Tape& t, std::uint32_t self) {
    const auto g = t.grad_of(self);
    const Tensor& a = t.value(self);
    const Tensor& lw = t.value(logits.id);
    const Tensor& mu = t.value(means.id);
    const Tensor& sd = t.value(stds.id);
    double dot = 0.0;
    for (std::size_t j = 0; j < length; ++j) dot += g[j] * a[j];
    std::vector<double> dl(K, 0.0), dmu(K, 0.0), dsd(K, 0.0);
    for (std::size_t j = 0; j < length; ++j) {
      const double ds = a[j] * (g[j] - dot);
      for (std::size_t k = 0; k < K; ++k) {
        const double z = static_cast<double>(j) - mu[k];
        const double var = sd[k] * sd[k];
        const double resp = std::exp(lw[k] - z * z / (2.0 * var) - s[j]);
        const double d = ds * resp;
        dl[k] += d;
        dmu[k] += d * z / var;
        dsd[k] += d * z * z / (var * sd[k]);
      }
    }
    if (t.requires_grad(logits.id)) {
      auto& gl = t.grad_buffer(logits.id);
      for (std::size_t k = 0; k < K; ++k) gl[k] += dl[k];
    }
    if (t.requires_grad(means.id)) {
      auto& gm = t.grad_buffer(means.id);
      for (std::size_t k = 0; k < K; ++k) gm[k] += dmu[k];
    }
    if (t.requires_grad(stds.id)) {
      auto& gs = t.grad_buffer(stds.id);
      for (std::size_t k = 0; k < K; ++k) gs[k] += dsd[k];
    }
  });
}

Var context_vector(Var alignment, const EncoderMemory& memory) {
  return ops::matmul(alignment, memory.hidden);
}

StepResult rc_attention_step(const AttentionConfig& cfg, const AttentionParams& p,
                             const AttentionState& state, const StepInputs& in,
                             const EncoderMemory& memory) {
  if (!in.durations) throw UsageError("rc_attention_step: duration embeddings are required");
  const Energy energy = additive_energy(in.query, memory, p.energy_proj);
  Var gates = rc_transition_gates(energy.vectors, *in.durations, p.gate_w, p.gate_b);
  Var alignment = rc_recursion(state.prev_alignment, gates);
  if (cfg.rc_product_composition) {
    alignment = ops::normalize(ops::mul(alignment, ops::softmax(energy.scalars, 0)));
  }
  StepResult r = finish(alignment, memory, state);
  r.gates = gates;
  return r;
}

StepResult location_sensitive_step(const AttentionConfig&, const AttentionParams& p,
                                   const AttentionState& state, const StepInputs& in,
                                   const EncoderMemory& memory) {
  if (!state.cumulative) throw UsageError("location_sensitive_step: state lacks cumulative alignment");
  const std::size_t n = memory.length;
  Var features = ops::conv1d(ops::reshape(*state.cumulative, {n, 1}), p.location_kernel);
  Var location = ops::matmul(features, p.location_proj);
  Var vectors = ops::tanh(ops::add_rows(ops::add(memory.keys, location), in.query));
  Var scalars = ops::reshape(ops::matmul(vectors, p.energy_proj), {n});
  Var alignment = ops::softmax(scalars, 0);
  AttentionState next = state;
  next.cumulative = ops::add(*state.cumulative, alignment);
  return finish(alignment, memory, std::move(next));
}

StepResult gmm_attention_step(const AttentionConfig& cfg, const AttentionParams& p,
                              const AttentionState& state, const StepInputs& in,
                              const EncoderMemory& memory) {
  if (!state.gmm_means) throw UsageError("gmm_attention_step: state lacks mixture means");
  const std::size_t K = cfg.gmm_mixtures;
  if (K < 1) throw ConfigError("gmm_mixtures must be >= 1");
  Var head = ops::add_rows(ops::matmul(in.query, p.gmm_w), p.gmm_b);
  Var weight_logits = ops::slice(head, 0, K);
  Var delta = ops::softplus(ops::add_scalar(ops::slice(head, K, K), cfg.gmm_delta_bias));
  Var stds = ops::softplus(ops::add_scalar(ops::slice(head, 2 * K, K), cfg.gmm_sigma_bias));
  Var means = ops::add(*state.gmm_means, delta);
  Var alignment = gmm_alignment(weight_logits, means, stds, memory.length);
  AttentionState next = state;
  next.gmm_means = means;
  return finish(alignment, memory, std::move(next));
}

StepResult forward_attention_step(const AttentionConfig& cfg, const AttentionParams& p,
                                  const AttentionState& state, const StepInputs& in,
                                  const EncoderMemory& memory) {
  if (!state.transition_prob) throw UsageError("forward_attention_step: state lacks transition probability");
  Tape& tape = tape_of(in.query);
  Var u = *state.transition_prob;
  if (cfg.forward_transition_override) {
    const double forced = *cfg.forward_transition_override;
    if (!(forced > 0.0 && forced < 1.0)) {
      throw ConfigError("forward transition override must lie in (0, 1), got " + std::to_string(forced));
    }
    u = tape.constant(Tensor::vector({forced}));
  }
  const std::size_t n = memory.length;
  const Energy energy = additive_energy(in.query, memory, p.energy_proj);
  Var y = ops::softmax(energy.scalars, 0);
  // Stay with probability 1 - u, advance with u; the final position keeps its
  // mass, which is the RC recursion with every gate equal to 1 - u.
  Var stay = ops::mul(tape.constant(Tensor::filled({n}, 1.0)), ops::one_minus(u));
  Var proposal = rc_recursion(state.prev_alignment, stay);
  Var alignment = ops::normalize(ops::mul(proposal, y));
  StepResult r = finish(alignment, memory, state);
  if (!in.prev_frame) throw UsageError("forward_attention_step: transition agent needs the previous frame");
  Var agent_in = ops::concat(ops::concat(r.context, in.query, 0), *in.prev_frame, 0);
  r.state.transition_prob = ops::sigmoid(ops::add_rows(ops::matmul(agent_in, p.agent_w), p.agent_b));
  return r;
}

StepResult attention_step(const AttentionConfig& cfg, const AttentionParams& p,
                          const AttentionState& state, const StepInputs& in,
                          const EncoderMemory& memory) {
  switch (cfg.mechanism) {
    case Mechanism::kLocationSensitive: return location_sensitive_step(cfg, p, state, in, memory);
    case Mechanism::kGmm: return gmm_attention_step(cfg, p, state, in, memory);
    case Mechanism::kForward: return forward_attention_step(cfg, p, state, in, memory);
    case Mechanism::kRc: return rc_attention_step(cfg, p, state, in, memory);
  }
  throw ConfigError("unknown mechanism");
}

}  // namespace rcalign::attention
