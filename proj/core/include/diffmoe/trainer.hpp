#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "diffmoe/capacity_predictor.hpp"
#include "diffmoe/dataset.hpp"
#include "diffmoe/model.hpp"
#include "diffmoe/schedule.hpp"

namespace diffmoe {

struct TrainConfig {
  int64_t steps = 2000;
  int64_t batch = 64;
  double lr = 1e-4;
  double weight_ema = 0.9999;
  uint64_t seed = 0;
  int64_t log_every = 1;
  int64_t ckpt_every = 0;  // 0 -> final checkpoint only
  double cfg_dropout = 0.1;
  double threshold_alpha = 0.95;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
};

struct StepRecord {
  int64_t step = 0;
  double loss = 0.0;
  double cp_loss = 0.0;
  std::vector<double> layer_capacity;  // C per MoE layer
  std::vector<double> thresholds;      // layer-major flat
  double wall_ms = 0.0;                // timing sidecar only, never in the log file
  bool aborted = false;
};

struct RunLog {
  std::vector<StepRecord> records;
};

// Serialized training state snapshot (see checkpoint.hpp for the container).
struct TrainerState {
  int64_t step = 0;
  std::vector<std::vector<double>> ema;     // aligned with model parameters
  std::vector<std::vector<double>> adam_m;  // aligned
  std::vector<std::vector<double>> adam_v;  // aligned
  ThresholdSet thresholds;
};

class Trainer {
 public:
  Trainer(Model& model, const ToyDataset& data, TrainConfig config);

  // One optimization step: diffusion + predictor losses (gradient-disjoint),
  // dynamic-threshold EMA update, optimizer update, weight-EMA update.
  // Throws on a non-finite loss after recording a diagnostic record.
  StepRecord step();

  // Runs `steps` steps (no file IO).
  RunLog run(int64_t steps);

  const TrainerState& state() const { return state_; }
  void restore(TrainerState state);
  Model& model() { return model_; }
  const TrainConfig& config() const { return config_; }
  const NoiseSchedule& schedule() const { return schedule_; }

 private:
  Model& model_;
  const ToyDataset& data_;
  TrainConfig config_;
  NoiseSchedule schedule_;
  TrainerState state_;
};

void append_runlog_jsonl(const std::string& path, const StepRecord& record);
void append_timing_jsonl(const std::string& path, const StepRecord& record);

// Full training entry point: runs config.steps steps from scratch or from a
// resumed state, writing log.jsonl, log.timing.jsonl and checkpoints under
// out_dir. Returns the final checkpoint path.
std::string train(Model& model, const ToyDataset& data, const TrainConfig& config,
                  const std::string& out_dir,
                  const std::optional<TrainerState>& resume = std::nullopt,
                  RunLog* log_out = nullptr);

}  // namespace diffmoe
