#pragma once

#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "diffmoe/routing.hpp"
#include "diffmoe/tensor.hpp"

namespace diffmoe {

// Per-MoE-layer two-layer SiLU MLP scoring, per token and expert, whether
// that expert would process the token.
struct PredictorParams {
  Tensor w1;  // [D, H]
  Tensor w2;  // [H, N]
};

// Logits [BS, N]; probabilities are sigmoid(logits). The caller passes the
// pool through stop_gradient before entry so the predictor never feeds back
// into the backbone.
Tensor cp_forward(const Tensor& pool_tokens, const PredictorParams& params);

// Binary routing outcome used as the predictor's training target.
Tensor build_target(const RoutingDecision& decision);

// Mean binary cross-entropy over all (token, expert) cells of one layer.
// Averaging across layers is the caller's 1/L sum of these.
Tensor cp_loss(const Tensor& target, const Tensor& logits);

struct ThresholdSet {
  enum class Mode { StaticGamma, DynamicEma };

  Mode mode = Mode::DynamicEma;
  double alpha = 0.95;
  std::vector<std::vector<double>> tau;  // [layer][expert]

  static ThresholdSet static_gamma(int64_t layers, int64_t experts, double gamma);
  static ThresholdSet dynamic_ema(int64_t layers, int64_t experts,
                                  double alpha = 0.95, double init = 0.5);

  int64_t layers() const { return static_cast<int64_t>(tau.size()); }
  // Layer-major, expert-minor flattening (the checkpoint wire order).
  std::vector<double> flat() const;
  static std::vector<std::vector<double>> unflatten(std::span<const double> flat,
                                                    int64_t layers, int64_t experts);
};

// Thresholded inference routing: per expert i the predictor sizes the
// selection (k_pred = #tokens with sigmoid(logit) > tau_i) and the expert
// then takes its k_pred highest-affinity tokens. k_pred may be zero.
RoutingDecision apply_threshold(const Tensor& cp_logits, std::span<const double> tau,
                                const AffinityMatrix& affinity);

// One EMA step toward the k-th descending CP quantile of each expert:
// tau' = alpha * tau + (1 - alpha) * sigmoid(k-th largest logit).
std::vector<double> update_dynamic_threshold(const Tensor& cp_logits,
                                             std::span<const double> tau_current,
                                             double alpha, int64_t k);

struct SweepPoint {
  double gamma = 0.0;
  double quality = 0.0;
  double capacity = 0.0;
};

struct IntervalSearchResult {
  double best_gamma = 0.0;
  SweepPoint best;
  std::vector<SweepPoint> table;  // full sweep, in grid order
};

// Evaluates every grid value with eval_fn: gamma -> (quality, avg inference
// capacity) and returns the quality-minimizing gamma among those with
// capacity <= 1. Throws (listing the measured capacities) if none qualify.
IntervalSearchResult interval_search(
    const std::function<std::pair<double, double>(double)>& eval_fn,
    std::span<const double> grid);

}  // namespace diffmoe
