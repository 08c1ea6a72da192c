#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "rcalign/corpus.hpp"
#include "rcalign/model.hpp"

namespace rcalign {

struct TrainConfig {
  std::size_t steps = 3000;
  std::size_t batch_size = 8;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip_norm = 1.0;
  // Weight of the single positive (final-frame) stop target in the BCE.
  double stop_pos_weight = 5.0;
  bool teacher_forcing = true;
  std::uint64_t seed = 1;
  // 0 writes only the final checkpoint.
  std::size_t checkpoint_every = 0;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct AdamState {
  std::size_t step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
};

// 1 at the final frame, 0 elsewhere.
Tensor stop_targets(std::size_t frames);

// Frame MSE + stop BCE (weight 1 each), recorded on the graph's tape.
Var loss(const TeacherForcedGraph& graph, const Tensor& target_frames, const Tensor& target_stops,
         double stop_pos_weight = 1.0);
// Same quantity from plain values. Length mismatch raises UsageError.
double loss(const SynthesisOutput& output, const Tensor& target_frames, const Tensor& target_stops,
            double stop_pos_weight = 1.0);

// Corpus positions used at `step`: epoch-wise permutations of the training
// split, a pure function of (seed, step).
std::vector<std::size_t> batch_indices(const Corpus& corpus, std::uint64_t seed, std::size_t step,
                                       std::size_t batch_size);

// Mean loss and gradients (ParameterStore order) over a batch, without
// updating parameters.
struct BatchGradient {
  double loss = 0.0;
  std::vector<std::vector<double>> grads;
};
BatchGradient batch_gradient(const Model& model, const Corpus& corpus, std::span<const std::size_t> indices,
                             std::uint64_t dropout_seed, std::size_t step, double stop_pos_weight = 1.0);

// Mean teacher-forced loss without dropout over the given utterances.
double evaluate_loss(const Model& model, const Corpus& corpus, std::span<const std::size_t> indices,
                     double stop_pos_weight = 1.0);

struct TrainResult {
  Model model;
  AdamState optimizer;
  std::vector<double> losses;  // one per step, before the update
};

struct TrainOptions {
  // Called after every step with (1-based step, loss) and at checkpoint
  // boundaries with the current state.
  std::function<void(std::size_t, double)> on_step;
  std::function<void(const Model&, const AdamState&, const std::vector<double>&)> on_checkpoint;
};

// Fresh run; parameters initialized from train_config.seed.
TrainResult train(const ModelConfig& model_config, const Corpus& corpus, const TrainConfig& train_config,
                  const TrainOptions& options = {});

// Continues from an existing model/optimizer state up to train_config.steps.
TrainResult resume_training(Model model, AdamState optimizer, std::vector<double> losses, const Corpus& corpus,
                            const TrainConfig& train_config, const TrainOptions& options = {});

}  // namespace rcalign
