#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "diffmoe/capacity_predictor.hpp"
#include "diffmoe/routing.hpp"
#include "diffmoe/tensor.hpp"

namespace diffmoe {

enum class RoutingKind { Dense, TokenChoice, ExpertChoice, DiffMoe };
enum class ObjectiveKind { Ddpm, Flow };

std::string to_string(RoutingKind kind);
std::string to_string(ObjectiveKind kind);
RoutingKind routing_from_string(const std::string& s);
ObjectiveKind objective_from_string(const std::string& s);

struct ModelConfig {
  int64_t blocks = 4;
  int64_t hidden = 64;
  int64_t heads = 4;
  int64_t experts = 4;
  RoutingKind routing = RoutingKind::DiffMoe;
  ObjectiveKind objective = ObjectiveKind::Flow;
  int64_t seq_len = 16;
  int64_t data_dim = 4;
  int64_t num_classes = 4;
  int64_t cp_hidden = 0;  // 0 -> hidden width
  int64_t tc_k = 1;       // experts per token in token-choice mode
  bool affinity_softmax = true;

  void validate() const;
  bool is_moe() const { return routing != RoutingKind::Dense; }
  // MoE layers sit at even 1-based block positions.
  bool moe_at(int64_t block) const { return is_moe() && block % 2 == 0; }
  std::vector<int64_t> moe_positions() const;
  int64_t moe_layer_count() const;
  int64_t cp_width() const { return cp_hidden > 0 ? cp_hidden : hidden; }
  int64_t null_label() const { return num_classes; }
};

struct Param {
  std::string name;
  Tensor value;
};

// Per-MoE-layer frozen selections (expert -> pool token indices); gates are
// recomputed from the live affinity so the layer stays differentiable while
// the discrete choice is held fixed.
using FrozenRouting = std::vector<std::vector<std::vector<int64_t>>>;

struct ForwardResult {
  Tensor prediction;  // [B*S, data_dim]
  std::vector<RoutingDecision> decisions;  // per MoE layer
  std::vector<CapacityStats> capacity;     // per MoE layer
  std::vector<Tensor> cp_logits;           // per MoE layer (DiffMoe only)
};

struct ParameterCounts {
  int64_t ffn = 0;        // experts + routers + capacity predictors
  int64_t attention = 0;
  int64_t adaln = 0;
  int64_t other = 0;
  int64_t total() const { return ffn + attention + adaln + other; }
};

class Model {
 public:
  Model(ModelConfig config, uint64_t seed);

  const ModelConfig& config() const { return config_; }
  uint64_t seed() const { return seed_; }

  // Denoiser output plus per-MoE-layer routing byproducts. Thresholds are
  // required for DiffMoe inference (training routes by fixed per-expert
  // quota instead).
  ForwardResult forward(const Tensor& tokens, std::span<const double> t,
                        std::span<const int64_t> labels, bool training,
                        const ThresholdSet* thresholds = nullptr,
                        const FrozenRouting* frozen = nullptr) const;

  const std::vector<Param>& parameters() const { return params_; }
  void set_parameter(size_t index, std::vector<double> values);
  // Adopts the tensor as-is, keeping its tape identity (lets a caller
  // differentiate a forward pass with respect to an external leaf).
  void set_parameter_tensor(size_t index, Tensor value);
  const Tensor& parameter(const std::string& name) const;

  // With gradients disabled the parameters become plain tensors and forward
  // passes record no tape (evaluation/sampling mode).
  void set_grads_enabled(bool enabled);
  bool grads_enabled() const { return grads_enabled_; }

 private:
  Tensor p(const std::string& name) const { return parameter(name); }
  Tensor time_embedding(std::span<const double> t) const;

  ModelConfig config_;
  uint64_t seed_ = 0;
  bool grads_enabled_ = true;
  std::vector<Param> params_;
  std::unordered_map<std::string, size_t> index_;
};

// Closed-form per-category counts for a config (no allocation).
ParameterCounts parameter_counts(const ModelConfig& config);
// Counts from the built model's actual tensors; cross-checked against the
// closed form.
ParameterCounts count_parameters(const Model& model);
// avg activated ~= ((1 + C) / (1 + N)) * #FFN + #Attention + #AdaLN + #Other
double estimate_activated_params(const ParameterCounts& counts, double c_avg_infer,
                                 int64_t n_experts);
// Compute-equivalent activated parameters when every MoE layer runs at
// capacity c (expert compute scales with c; routers and predictors always run).
double exact_activated_params(const ModelConfig& config, double c = 1.0);

}  // namespace diffmoe
