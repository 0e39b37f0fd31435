#pragma once

#include <string>

#include "diffmoe/model.hpp"
#include "diffmoe/trainer.hpp"

namespace diffmoe {

// Versioned binary container: config, parameters, thresholds (flat decimal
// list, layer-major), EMA shadow weights, optimizer moments and the step
// counter. All numeric payloads are little-endian.
struct Checkpoint {
  ModelConfig config;
  uint64_t model_seed = 0;
  TrainerState state;
  std::vector<std::pair<std::string, std::vector<double>>> params;
};

Checkpoint snapshot(const Model& model, const TrainerState& state);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// Rebuilds the model; with use_ema the parameters are replaced by the EMA
// shadow and gradients are disabled (evaluation always runs on EMA weights).
Model model_from_checkpoint(const Checkpoint& ckpt, bool use_ema);

// FNV-1a hex digest of a file's bytes (manifest <-> checkpoint pairing).
std::string file_digest(const std::string& path);

}  // namespace diffmoe
