#pragma once

#include <functional>
#include <span>
#include <vector>

#include "diffmoe/tensor.hpp"

namespace diffmoe {

struct TokenOrigin {
  int64_t sample = 0;
  int64_t position = 0;
  double t = 0.0;
};

// Flattened [batch * seq, hidden] view over which every routing regime
// operates. Flattening is row-major (sample-major), so pooling followed by
// unpooling is the identity on the original layout.
struct TokenPool {
  Tensor tokens;  // [BS, D]
  std::vector<TokenOrigin> origin;

  int64_t pool_size() const { return tokens.rows(); }
  int64_t hidden() const { return tokens.cols(); }
};

TokenPool make_pool(const Tensor& tokens, int64_t batch, int64_t seq,
                    std::span<const double> t_per_sample);
// Restores the [B, S, D] ordering recorded in `origin`.
Tensor unpool(const TokenPool& pool, int64_t batch, int64_t seq);

struct AffinityMatrix {
  Tensor scores;  // [BS, N]
  bool normalized = false;

  int64_t n_tokens() const { return scores.rows(); }
  int64_t n_experts() const { return scores.cols(); }
};

// scores = tokens * router_weights, optionally softmax-normalized over the
// expert axis (the default used throughout training and inference).
AffinityMatrix compute_affinity(const TokenPool& pool, const Tensor& router_weights,
                                bool apply_softmax = true);

// Which tokens each expert processes, and with what gain. Immutable once
// built; gating weights alias the affinity entries at the selected cells so
// gradients flow into the router through them.
struct RoutingDecision {
  int64_t n_tokens = 0;
  int64_t n_experts = 0;
  std::vector<std::vector<int64_t>> expert_tokens;  // per expert, pool indices
  std::vector<Tensor> expert_gates;                 // per expert, [k_i]
};

// Binary assignment matrix O: [BS, N], O[s,i] = 1 iff expert i selected
// token s.
Tensor assignment_matrix(const RoutingDecision& decision);

// Each token picks its top-K experts.
RoutingDecision route_tc(const AffinityMatrix& affinity, int64_t k);
// Within each sample independently, each expert picks its top-K' tokens.
RoutingDecision route_ec(const AffinityMatrix& affinity, int64_t batch, int64_t seq,
                         int64_t k_prime);
// Each expert picks its top-K_train tokens over the whole pool; requires
// K_train = BS/N (the expert count must divide the pool size).
RoutingDecision route_diffmoe_train(const AffinityMatrix& affinity, int64_t k_train);

// Same selection shapes as route_diffmoe_train but with externally fixed
// index lists; gates are still read from the (live) affinity matrix. Used
// to differentiate through a layer while holding the discrete selection.
RoutingDecision decision_from_indices(const AffinityMatrix& affinity,
                                      const std::vector<std::vector<int64_t>>& indices);

using ExpertFn = std::function<Tensor(const Tensor&)>;

// y starts at zero; each expert adds gate * E_i(token) for its selected
// tokens. Tokens selected by no expert stay zero.
Tensor combine(const TokenPool& pool, const RoutingDecision& decision,
               std::span<const ExpertFn> experts);

struct CapacityStats {
  std::vector<int64_t> tokens_per_expert;  // raw counts K^E
  std::vector<double> per_expert;          // C^E = N * K^E / BS
  double layer_capacity = 0.0;             // mean over experts
  int64_t pool_size = 0;
};

CapacityStats capacity_of(const RoutingDecision& decision, int64_t n_experts,
                          int64_t pool_size);

}  // namespace diffmoe
