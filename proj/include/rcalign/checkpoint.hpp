#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "rcalign/model.hpp"
#include "rcalign/train.hpp"

namespace rcalign {

// Optimizer and loss history needed to continue a run bit-identically.
struct TrainingState {
  TrainConfig config;
  AdamState optimizer;
  std::vector<double> losses;
};

struct Checkpoint {
  Model model;
  std::optional<TrainingState> training;
  // Free-form provenance (corpus hash, per-symbol mean durations, ...).
  nlohmann::json metadata = nlohmann::json::object();
};

// File layout:
//   "RCAT" | u32 LE version | u64 LE header length | JSON header | f64 LE data
// Header: {format, model_config, tensors: [{name, shape, dtype "f64", offset}],
// train_state, metadata}. Offsets are bytes from the start of the data block;
// tensors appear in table order. Optimizer moments are stored as
// "adam.m/<param>" and "adam.v/<param>", the loss curve as "train.losses".
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string serialize_checkpoint(const Checkpoint& ckpt);

// With `expected`, parameters are validated against that config's layout and
// a ShapeMismatchError names the first offending tensor. Otherwise the
// embedded config is used.
Checkpoint deserialize_checkpoint(const std::string& bytes, const std::optional<ModelConfig>& expected = {});

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path, const std::optional<ModelConfig>& expected = {});

}  // namespace rcalign
