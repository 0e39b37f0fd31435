#include <benchmark/benchmark.h>

#include "diffmoe/capacity_predictor.hpp"
#include "diffmoe/rng.hpp"
#include "diffmoe/routing.hpp"

namespace {

using namespace diffmoe;

Tensor random_tensor(Shape shape, uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(static_cast<size_t>(shape_size(shape)));
  for (auto& x : v) x = rng.normal();
  return Tensor::from(std::move(shape), std::move(v));
}

AffinityMatrix affinity_of(const Tensor& scores) {
  AffinityMatrix aff;
  aff.scores = scores;
  return aff;
}

void BM_route_diffmoe_train(benchmark::State& state) {
  const int64_t bs = state.range(0);
  const int64_t n = state.range(1);
  AffinityMatrix aff = affinity_of(random_tensor({bs, n}, 1));
  for (auto _ : state) {
    benchmark::DoNotOptimize(route_diffmoe_train(aff, bs / n));
  }
  state.SetItemsProcessed(state.iterations() * bs);
}
BENCHMARK(BM_route_diffmoe_train)->Args({1024, 4})->Args({4096, 16});

void BM_route_tc(benchmark::State& state) {
  const int64_t bs = state.range(0);
  const int64_t n = state.range(1);
  AffinityMatrix aff = affinity_of(random_tensor({bs, n}, 2));
  for (auto _ : state) {
    benchmark::DoNotOptimize(route_tc(aff, 1));
  }
  state.SetItemsProcessed(state.iterations() * bs);
}
BENCHMARK(BM_route_tc)->Args({1024, 4})->Args({4096, 16});

void BM_apply_threshold(benchmark::State& state) {
  const int64_t bs = state.range(0);
  const int64_t n = state.range(1);
  Tensor logits = random_tensor({bs, n}, 3);
  AffinityMatrix aff = affinity_of(random_tensor({bs, n}, 4));
  std::vector<double> tau(static_cast<size_t>(n), 0.5);
  for (auto _ : state) {
    benchmark::DoNotOptimize(apply_threshold(logits, tau, aff));
  }
  state.SetItemsProcessed(state.iterations() * bs);
}
BENCHMARK(BM_apply_threshold)->Args({1024, 4})->Args({4096, 16});

void BM_combine(benchmark::State& state) {
  const int64_t bs = state.range(0);
  const int64_t d = 64;
  const int64_t n = state.range(1);
  Tensor tokens = random_tensor({bs, d}, 5);
  std::vector<double> t(static_cast<size_t>(bs), 0.0);
  TokenPool pool = make_pool(tokens, bs, 1, t);
  AffinityMatrix aff = compute_affinity(pool, random_tensor({d, n}, 6));
  RoutingDecision decision = route_diffmoe_train(aff, bs / n);
  Tensor w = random_tensor({d, d}, 7);
  std::vector<ExpertFn> experts;
  for (int64_t i = 0; i < n; ++i)
    experts.push_back([&w](const Tensor& x) { return matmul(x, w); });
  for (auto _ : state) {
    benchmark::DoNotOptimize(combine(pool, decision, experts));
  }
  state.SetItemsProcessed(state.iterations() * bs);
}
BENCHMARK(BM_combine)->Args({1024, 4});

}  // namespace

BENCHMARK_MAIN();
