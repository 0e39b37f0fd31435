#include "diffmoe/routing.hpp"

#include <stdexcept>
#include <string>

namespace diffmoe {

namespace {

[[noreturn]] void fail(const std::string& msg) {
  throw std::invalid_argument("routing: " + msg);
}

void check(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

// Gates for one expert: affinity values at (token, expert) cells, gathered
// through the tape so the router keeps its gradient path. An inactive expert
// (no tokens) gets an undefined gate tensor; combine() never touches it.
Tensor gates_at(const AffinityMatrix& affinity, std::span<const int64_t> tokens,
                int64_t expert) {
  if (tokens.empty()) return Tensor();
  const int64_t n = affinity.n_experts();
  std::vector<int64_t> flat;
  flat.reserve(tokens.size());
  for (int64_t s : tokens) flat.push_back(s * n + expert);
  return gather_flat(affinity.scores, flat);
}

}  // namespace

TokenPool make_pool(const Tensor& tokens, int64_t batch, int64_t seq,
                    std::span<const double> t_per_sample) {
  check(tokens.rank() == 2, "pool tokens must be 2-D [BS, D]");
  check(batch >= 1 && seq >= 1 && tokens.rows() == batch * seq,
        "pool row count " + std::to_string(tokens.rows()) + " != batch*seq");
  check(t_per_sample.empty() || static_cast<int64_t>(t_per_sample.size()) == batch,
        "t_per_sample must have one entry per sample");
  TokenPool pool;
  pool.tokens = tokens;
  pool.origin.reserve(static_cast<size_t>(batch * seq));
  for (int64_t b = 0; b < batch; ++b) {
    const double t = t_per_sample.empty() ? 0.0 : t_per_sample[static_cast<size_t>(b)];
    for (int64_t s = 0; s < seq; ++s) pool.origin.push_back({b, s, t});
  }
  return pool;
}

Tensor unpool(const TokenPool& pool, int64_t batch, int64_t seq) {
  check(static_cast<int64_t>(pool.origin.size()) == batch * seq,
        "origin size does not match batch*seq");
  std::vector<int64_t> dest(static_cast<size_t>(batch * seq), -1);
  for (int64_t row = 0; row < batch * seq; ++row) {
    const TokenOrigin& o = pool.origin[static_cast<size_t>(row)];
    check(o.sample >= 0 && o.sample < batch && o.position >= 0 && o.position < seq,
          "origin entry out of range");
    const int64_t target = o.sample * seq + o.position;
    check(dest[static_cast<size_t>(target)] == -1, "duplicate origin entry");
    dest[static_cast<size_t>(target)] = row;
  }
  return gather_rows(pool.tokens, dest);
}

AffinityMatrix compute_affinity(const TokenPool& pool, const Tensor& router_weights,
                                bool apply_softmax) {
  check(router_weights.rank() == 2 && router_weights.rows() == pool.hidden(),
        "router weights must be [D, N] with D = " + std::to_string(pool.hidden()));
  AffinityMatrix aff;
  Tensor logits = matmul(pool.tokens, router_weights);
  aff.scores = apply_softmax ? softmax_axis(logits, 1) : logits;
  aff.normalized = apply_softmax;
  return aff;
}

Tensor assignment_matrix(const RoutingDecision& decision) {
  std::vector<double> o(static_cast<size_t>(decision.n_tokens * decision.n_experts), 0.0);
  for (int64_t i = 0; i < decision.n_experts; ++i) {
    for (int64_t s : decision.expert_tokens[static_cast<size_t>(i)]) {
      o[static_cast<size_t>(s * decision.n_experts + i)] = 1.0;
    }
  }
  return Tensor::from({decision.n_tokens, decision.n_experts}, std::move(o));
}

RoutingDecision route_tc(const AffinityMatrix& affinity, int64_t k) {
  const int64_t bs = affinity.n_tokens();
  const int64_t n = affinity.n_experts();
  check(k >= 1 && k <= n, "route_tc: K out of range (K=" + std::to_string(k) +
                              ", N=" + std::to_string(n) + ")");
  RoutingDecision d;
  d.n_tokens = bs;
  d.n_experts = n;
  d.expert_tokens.resize(static_cast<size_t>(n));
  const auto& sv = affinity.scores.values();
  for (int64_t s = 0; s < bs; ++s) {
    std::span<const double> row(sv.data() + s * n, static_cast<size_t>(n));
    TopK top = topk_desc(row, k);
    for (int64_t e : top.indices) d.expert_tokens[static_cast<size_t>(e)].push_back(s);
  }
  d.expert_gates.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i)
    d.expert_gates.push_back(gates_at(affinity, d.expert_tokens[static_cast<size_t>(i)], i));
  return d;
}

RoutingDecision route_ec(const AffinityMatrix& affinity, int64_t batch, int64_t seq,
                         int64_t k_prime) {
  const int64_t bs = affinity.n_tokens();
  const int64_t n = affinity.n_experts();
  check(batch * seq == bs, "route_ec: batch*seq does not match pool size");
  check(k_prime >= 1 && k_prime <= seq,
        "route_ec: K' out of range (K'=" + std::to_string(k_prime) +
            ", S=" + std::to_string(seq) + ")");
  RoutingDecision d;
  d.n_tokens = bs;
  d.n_experts = n;
  d.expert_tokens.resize(static_cast<size_t>(n));
  const auto& sv = affinity.scores.values();
  std::vector<double> col(static_cast<size_t>(seq));
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t s = 0; s < seq; ++s)
        col[static_cast<size_t>(s)] = sv[static_cast<size_t>(((b * seq) + s) * n + i)];
      TopK top = topk_desc(col, k_prime);
      for (int64_t s : top.indices)
        d.expert_tokens[static_cast<size_t>(i)].push_back(b * seq + s);
    }
  }
  d.expert_gates.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i)
    d.expert_gates.push_back(gates_at(affinity, d.expert_tokens[static_cast<size_t>(i)], i));
  return d;
}

RoutingDecision route_diffmoe_train(const AffinityMatrix& affinity, int64_t k_train) {
  const int64_t bs = affinity.n_tokens();
  const int64_t n = affinity.n_experts();
  check(bs % n == 0, "route_diffmoe_train: expert count " + std::to_string(n) +
                         " does not divide pool size " + std::to_string(bs));
  check(k_train == bs / n, "route_diffmoe_train: K_train must equal BS/N = " +
                               std::to_string(bs / n));
  RoutingDecision d;
  d.n_tokens = bs;
  d.n_experts = n;
  d.expert_tokens.resize(static_cast<size_t>(n));
  const auto& sv = affinity.scores.values();
  std::vector<double> col(static_cast<size_t>(bs));
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t s = 0; s < bs; ++s)
      col[static_cast<size_t>(s)] = sv[static_cast<size_t>(s * n + i)];
    TopK top = topk_desc(col, k_train);
    d.expert_tokens[static_cast<size_t>(i)] = std::move(top.indices);
  }
  d.expert_gates.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i)
    d.expert_gates.push_back(gates_at(affinity, d.expert_tokens[static_cast<size_t>(i)], i));
  return d;
}

RoutingDecision decision_from_indices(const AffinityMatrix& affinity,
                                      const std::vector<std::vector<int64_t>>& indices) {
  RoutingDecision d;
  d.n_tokens = affinity.n_tokens();
  d.n_experts = affinity.n_experts();
  check(static_cast<int64_t>(indices.size()) == d.n_experts,
        "decision_from_indices: one index list per expert required");
  d.expert_tokens = indices;
  d.expert_gates.reserve(indices.size());
  for (int64_t i = 0; i < d.n_experts; ++i) {
    for (int64_t s : indices[static_cast<size_t>(i)])
      check(s >= 0 && s < d.n_tokens, "decision_from_indices: index out of range");
    d.expert_gates.push_back(gates_at(affinity, indices[static_cast<size_t>(i)], i));
  }
  return d;
}

Tensor combine(const TokenPool& pool, const RoutingDecision& decision,
               std::span<const ExpertFn> experts) {
  check(static_cast<int64_t>(experts.size()) == decision.n_experts,
        "combine: expert count mismatch");
  check(pool.pool_size() == decision.n_tokens, "combine: pool size mismatch");
  Tensor out = Tensor::zeros({pool.pool_size(), pool.hidden()});
  for (int64_t i = 0; i < decision.n_experts; ++i) {
    const auto& idx = decision.expert_tokens[static_cast<size_t>(i)];
    if (idx.empty()) continue;
    for (int64_t s : idx)
      check(s >= 0 && s < decision.n_tokens, "combine: token index out of range");
    Tensor picked = gather_rows(pool.tokens, idx);
    Tensor processed = experts[static_cast<size_t>(i)](picked);
    Tensor weighted = mul_colvec(processed, decision.expert_gates[static_cast<size_t>(i)]);
    out = scatter_add_rows(out, idx, weighted);
  }
  return out;
}

CapacityStats capacity_of(const RoutingDecision& decision, int64_t n_experts,
                          int64_t pool_size) {
  check(pool_size > 0, "capacity_of: pool size must be positive");
  check(static_cast<int64_t>(decision.expert_tokens.size()) == n_experts,
        "capacity_of: expert count mismatch");
  CapacityStats stats;
  stats.pool_size = pool_size;
  stats.tokens_per_expert.reserve(static_cast<size_t>(n_experts));
  stats.per_expert.reserve(static_cast<size_t>(n_experts));
  // integer counts; divide only at report time
  int64_t total = 0;
  for (const auto& idx : decision.expert_tokens) {
    const int64_t k = static_cast<int64_t>(idx.size());
    stats.tokens_per_expert.push_back(k);
    total += k;
    stats.per_expert.push_back(static_cast<double>(n_experts * k) /
                               static_cast<double>(pool_size));
  }
  stats.layer_capacity =
      static_cast<double>(total) / static_cast<double>(pool_size);
  return stats;
}

}  // namespace diffmoe
