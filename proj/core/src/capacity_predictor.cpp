#include "diffmoe/capacity_predictor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace diffmoe {

namespace {

[[noreturn]] void fail(const std::string& msg) {
  throw std::invalid_argument("capacity_predictor: " + msg);
}

void check(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor cp_forward(const Tensor& pool_tokens, const PredictorParams& params) {
  check(pool_tokens.rank() == 2 && params.w1.rank() == 2 && params.w2.rank() == 2,
        "cp_forward: 2-D tensors required");
  check(pool_tokens.cols() == params.w1.rows(),
        "cp_forward: token width " + std::to_string(pool_tokens.cols()) +
            " != W1 rows " + std::to_string(params.w1.rows()));
  check(params.w1.cols() == params.w2.rows(), "cp_forward: W1/W2 widths disagree");
  return matmul(silu(matmul(pool_tokens, params.w1)), params.w2);
}

Tensor build_target(const RoutingDecision& decision) {
  return assignment_matrix(decision);
}

Tensor cp_loss(const Tensor& target, const Tensor& logits) {
  return bce_with_logits(target, logits);
}

ThresholdSet ThresholdSet::static_gamma(int64_t layers, int64_t experts, double gamma) {
  if (gamma < 0.0 || gamma >= 1.0)
    fail("static gamma must lie in [0, 1), got " + std::to_string(gamma));
  ThresholdSet t;
  t.mode = Mode::StaticGamma;
  t.tau.assign(static_cast<size_t>(layers),
               std::vector<double>(static_cast<size_t>(experts), gamma));
  return t;
}

ThresholdSet ThresholdSet::dynamic_ema(int64_t layers, int64_t experts, double alpha,
                                       double init) {
  if (init <= 0.0 || init >= 1.0) fail("dynamic threshold init must lie in (0, 1)");
  ThresholdSet t;
  t.mode = Mode::DynamicEma;
  t.alpha = alpha;
  t.tau.assign(static_cast<size_t>(layers),
               std::vector<double>(static_cast<size_t>(experts), init));
  return t;
}

std::vector<double> ThresholdSet::flat() const {
  std::vector<double> out;
  for (const auto& layer : tau) out.insert(out.end(), layer.begin(), layer.end());
  return out;
}

std::vector<std::vector<double>> ThresholdSet::unflatten(std::span<const double> flat,
                                                         int64_t layers,
                                                         int64_t experts) {
  if (static_cast<int64_t>(flat.size()) != layers * experts)
    fail("threshold list length does not match layers*experts");
  std::vector<std::vector<double>> tau(static_cast<size_t>(layers));
  for (int64_t l = 0; l < layers; ++l)
    tau[static_cast<size_t>(l)].assign(flat.begin() + l * experts,
                                       flat.begin() + (l + 1) * experts);
  return tau;
}

RoutingDecision apply_threshold(const Tensor& cp_logits, std::span<const double> tau,
                                const AffinityMatrix& affinity) {
  const int64_t s_tokens = cp_logits.rows();
  const int64_t n = cp_logits.cols();
  check(static_cast<int64_t>(tau.size()) == n, "apply_threshold: one tau per expert");
  check(affinity.n_tokens() == s_tokens && affinity.n_experts() == n,
        "apply_threshold: affinity shape mismatch");

  RoutingDecision d;
  d.n_tokens = s_tokens;
  d.n_experts = n;
  d.expert_tokens.resize(static_cast<size_t>(n));
  const auto& zv = cp_logits.values();
  const auto& av = affinity.scores.values();
  std::vector<double> col(static_cast<size_t>(s_tokens));
  for (int64_t i = 0; i < n; ++i) {
    int64_t k_pred = 0;
    for (int64_t s = 0; s < s_tokens; ++s) {
      if (sigmoid_scalar(zv[static_cast<size_t>(s * n + i)]) > tau[static_cast<size_t>(i)])
        ++k_pred;
    }
    if (k_pred == 0) continue;  // inactive expert
    for (int64_t s = 0; s < s_tokens; ++s)
      col[static_cast<size_t>(s)] = av[static_cast<size_t>(s * n + i)];
    TopK top = topk_desc(col, k_pred);
    d.expert_tokens[static_cast<size_t>(i)] = std::move(top.indices);
  }
  d.expert_gates.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const auto& idx = d.expert_tokens[static_cast<size_t>(i)];
    if (idx.empty()) {
      d.expert_gates.emplace_back();
      continue;
    }
    std::vector<int64_t> flat;
    flat.reserve(idx.size());
    for (int64_t s : idx) flat.push_back(s * n + i);
    d.expert_gates.push_back(gather_flat(affinity.scores, flat));
  }
  return d;
}

std::vector<double> update_dynamic_threshold(const Tensor& cp_logits,
                                             std::span<const double> tau_current,
                                             double alpha, int64_t k) {
  const int64_t bs = cp_logits.rows();
  const int64_t n = cp_logits.cols();
  check(static_cast<int64_t>(tau_current.size()) == n,
        "update_dynamic_threshold: one tau per expert");
  check(k >= 1 && k <= bs, "update_dynamic_threshold: k out of range (k=" +
                               std::to_string(k) + ", BS=" + std::to_string(bs) + ")");
  const auto& zv = cp_logits.values();
  std::vector<double> col(static_cast<size_t>(bs));
  std::vector<double> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t s = 0; s < bs; ++s)
      col[static_cast<size_t>(s)] = zv[static_cast<size_t>(s * n + i)];
    TopK top = topk_desc(col, k);
    const double quantile = sigmoid_scalar(top.values.back());  // k-th descending
    out[static_cast<size_t>(i)] =
        alpha * tau_current[static_cast<size_t>(i)] + (1.0 - alpha) * quantile;
  }
  return out;
}

IntervalSearchResult interval_search(
    const std::function<std::pair<double, double>(double)>& eval_fn,
    std::span<const double> grid) {
  check(!grid.empty(), "interval_search: grid is empty");
  for (double g : grid)
    check(g < 1.0, "interval_search: gamma must be < 1, got " + std::to_string(g));

  IntervalSearchResult result;
  bool found = false;
  for (double gamma : grid) {
    auto [quality, capacity] = eval_fn(gamma);
    result.table.push_back({gamma, quality, capacity});
    if (capacity <= 1.0 && (!found || quality < result.best.quality)) {
      found = true;
      result.best = result.table.back();
      result.best_gamma = gamma;
    }
  }
  if (!found) {
    std::ostringstream os;
    os << "interval_search: no gamma satisfies capacity <= 1; measured capacities:";
    for (const auto& p : result.table) os << " (" << p.gamma << " -> " << p.capacity << ")";
    throw std::runtime_error(os.str());
  }
  return result;
}

}  // namespace diffmoe
