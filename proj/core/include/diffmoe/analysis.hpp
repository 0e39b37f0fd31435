#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "diffmoe/capacity_predictor.hpp"
#include "diffmoe/dataset.hpp"
#include "diffmoe/model.hpp"

namespace diffmoe {

// ---- binary sample container -------------------------------------------
// Header (little-endian): magic "DMSB", u32 element width in bytes, u32
// rank, then i64 extents; payload follows as raw little-endian values.

void write_sample_container(const std::string& path, const Tensor& data);
Tensor read_sample_container(const std::string& path);

// ---- instrumented sampling -----------------------------------------------

struct SampleOptions {
  int64_t count = 16;
  int64_t steps = 50;
  std::string sampler = "euler";  // euler | heun | ddpm
  double guidance = 1.0;
  uint64_t seed = 1;
  int64_t class_label = -1;  // -1 cycles through the classes
};

struct SampleRun {
  Tensor images;                       // [count, 64], pixel space
  std::vector<double> eval_times;      // model-eval times t (descending)
  std::vector<double> capacity_trace;  // per-eval forward capacity C^t
  std::vector<std::vector<double>> layer_expert_capacity;  // [layer][expert] mean C^E
  int64_t evals = 0;

  double c_avg_infer() const;
};

// Samples `count` images with the given sampler, recording per-eval forward
// capacity. Thresholds are required for DiffMoe models.
SampleRun run_sampler(const Model& model, const ThresholdSet* thresholds,
                      const SampleOptions& options);

// ---- toy quality proxy -----------------------------------------------------

// Average over random unit projections of the total-variation distance
// between fixed-bin 1-D histograms of the two sample sets. Nonnegative and
// zero for identical empirical distributions.
double sliced_histogram_distance(const Tensor& a, const Tensor& b,
                                 int64_t n_projections = 16, int64_t bins = 32,
                                 double lo = -3.0, double hi = 3.0,
                                 uint64_t seed = 2024);

// ---- report files ------------------------------------------------------------

std::string fmt_g9(double v);  // 9 significant digits, CSV float format

void write_capacity_trace_csv(const std::string& path, const SampleRun& run);
void write_layer_expert_csv(const std::string& path, const SampleRun& run);

struct ClassCapacity {
  int64_t label = 0;
  double c_avg = 0.0;
};

// Per-class average inference capacity, hardest (largest) first.
std::vector<ClassCapacity> rank_class_capacity(const Model& model,
                                               const ThresholdSet* thresholds,
                                               const SampleOptions& options);
void write_class_ranking_csv(const std::string& path,
                             const std::vector<ClassCapacity>& ranking);

void write_activated_params_csv(const std::string& path, const ModelConfig& config,
                                double c_avg_infer);

struct SweepRow {
  std::string method;  // "interval" or "dynamic"
  double gamma = 0.0;  // meaningful for interval rows only
  double capacity = 0.0;
  double quality = 0.0;
};

void write_sweep_csv(const std::string& path, const std::vector<SweepRow>& rows);

// ---- manifest -----------------------------------------------------------------

struct ManifestEntry {
  std::string file;
  std::string checkpoint_digest;
  SampleOptions options;
  double c_avg_infer = 0.0;
};

void append_manifest_jsonl(const std::string& path, const ManifestEntry& entry);
std::vector<ManifestEntry> read_manifest_jsonl(const std::string& path);

}  // namespace diffmoe
