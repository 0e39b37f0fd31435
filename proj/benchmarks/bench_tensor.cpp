#include <benchmark/benchmark.h>

#include "diffmoe/rng.hpp"
#include "diffmoe/tensor.hpp"

namespace {

using namespace diffmoe;

Tensor random_tensor(Shape shape, uint64_t seed, bool grad = false) {
  Rng rng(seed);
  std::vector<double> v(static_cast<size_t>(shape_size(shape)));
  for (auto& x : v) x = rng.normal();
  return grad ? Tensor::leaf(std::move(shape), std::move(v))
              : Tensor::from(std::move(shape), std::move(v));
}

void BM_matmul(benchmark::State& state) {
  const int64_t n = state.range(0);
  Tensor a = random_tensor({n, 64}, 1);
  Tensor b = random_tensor({64, 256}, 2);
  for (auto _ : state) {
    benchmark::DoNotOptimize(matmul(a, b));
  }
  state.SetItemsProcessed(state.iterations() * n * 64 * 256 * 2);
}
BENCHMARK(BM_matmul)->Arg(256)->Arg(1024);

void BM_sdpa(benchmark::State& state) {
  const int64_t samples = state.range(0);
  const int64_t seq = 16, width = 64;
  Tensor q = random_tensor({samples * seq, width}, 3);
  Tensor k = random_tensor({samples * seq, width}, 4);
  Tensor v = random_tensor({samples * seq, width}, 5);
  for (auto _ : state) {
    benchmark::DoNotOptimize(sdpa(q, k, v, samples, 4));
  }
  state.SetItemsProcessed(state.iterations() * samples * seq);
}
BENCHMARK(BM_sdpa)->Arg(16)->Arg(64);

void BM_forward_backward(benchmark::State& state) {
  const int64_t n = state.range(0);
  Tensor x = random_tensor({n, 64}, 6, /*grad=*/true);
  Tensor w1 = random_tensor({64, 256}, 7, /*grad=*/true);
  Tensor w2 = random_tensor({256, 64}, 8, /*grad=*/true);
  for (auto _ : state) {
    Tensor loss = mean_all(matmul(silu(matmul(x, w1)), w2));
    Gradients grads = backward(loss);
    benchmark::DoNotOptimize(grads.grad(w1));
  }
  state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_forward_backward)->Arg(256)->Arg(1024);

}  // namespace

BENCHMARK_MAIN();
