// OpenMP kernels against their serial references, plus one training step.
// Set OMP_NUM_THREADS to compare thread counts.

#include <benchmark/benchmark.h>

#include "vlq/kernels.hpp"
#include "vlq/rng.hpp"
#include "vlq/training.hpp"

using namespace vlq;

namespace {

Matrix<float> random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
    Rng rng(seed);
    Matrix<float> m(r, c);
    for (auto& v : m.flat()) v = static_cast<float>(rng.normal());
    return m;
}

// CLIP ViT-B/32 sized: 50 tokens (+8 prompts), width 768, MLP 3072.
template <bool Parallel>
void linear(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto d = static_cast<std::size_t>(state.range(1));
    const auto x = random_matrix(n, d, 1);
    const auto w = random_matrix(4 * d, d, 2);
    const auto b = random_matrix(1, 4 * d, 3);
    Matrix<float> y;
    for (auto _ : state) {
        if constexpr (Parallel) {
            kernels::linear(x, w, b.flat(), y);
        } else {
            kernels::reference::linear(x, w, b.flat(), y);
        }
        benchmark::DoNotOptimize(y.data());
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * d * 4 * d));
}

template <bool Parallel>
void matmul(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto a = random_matrix(n, n, 4);
    const auto b = random_matrix(n, n, 5);
    Matrix<float> c;
    for (auto _ : state) {
        if constexpr (Parallel) {
            kernels::matmul(a, b, c);
        } else {
            kernels::reference::matmul(a, b, c);
        }
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * n * n));
}

template <bool Parallel>
void softmax(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto s = random_matrix(n, n, 6);
    for (auto _ : state) {
        auto t = s;
        if constexpr (Parallel) {
            kernels::softmax_rows(t, false);
        } else {
            kernels::reference::softmax_rows(t, false);
        }
        benchmark::DoNotOptimize(t.data());
    }
}

template <bool Parallel>
void layer_norm(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto d = static_cast<std::size_t>(state.range(1));
    const auto x = random_matrix(n, d, 7);
    const auto g = random_matrix(1, d, 8);
    const auto b = random_matrix(1, d, 9);
    Matrix<float> y, xhat;
    std::vector<float> rstd(n);
    for (auto _ : state) {
        if constexpr (Parallel) {
            kernels::layer_norm(x, g.flat(), b.flat(), 1e-5f, y, xhat, std::span<float>(rstd));
        } else {
            kernels::reference::layer_norm(x, g.flat(), b.flat(), 1e-5f, y, xhat, std::span<float>(rstd));
        }
        benchmark::DoNotOptimize(y.data());
    }
}

void train_step_toy(benchmark::State& state) {
    BackboneConfig bcfg;
    const auto bb = make_toy_backbone(1, bcfg);
    TrainConfig cfg;
    cfg.batch_size = static_cast<std::size_t>(state.range(0));
    cfg.crop_size = bcfg.image_size;
    const auto data = make_synthetic_dataset(1, cfg.batch_size, 2, bcfg.image_size);
    Batch batch;
    for (const auto& s : data) {
        batch.images.push_back(s.image);
        batch.g_percept.push_back(0.5);
        batch.g_align.push_back(0.5);
    }
    auto st = init_state<float>(cfg, bcfg);
    for (auto _ : state) {
        benchmark::DoNotOptimize(train_step(bb, st, batch, cfg).total);
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * cfg.batch_size));
}

} // namespace

BENCHMARK(linear<false>)->Args({58, 768})->Args({256, 256})->Name("linear/serial")->Unit(benchmark::kMicrosecond);
BENCHMARK(linear<true>)->Args({58, 768})->Args({256, 256})->Name("linear/openmp")->Unit(benchmark::kMicrosecond);
BENCHMARK(matmul<false>)->Arg(128)->Arg(256)->Name("matmul/serial")->Unit(benchmark::kMicrosecond);
BENCHMARK(matmul<true>)->Arg(128)->Arg(256)->Name("matmul/openmp")->Unit(benchmark::kMicrosecond);
BENCHMARK(softmax<false>)->Arg(512)->Name("softmax/serial")->Unit(benchmark::kMicrosecond);
BENCHMARK(softmax<true>)->Arg(512)->Name("softmax/openmp")->Unit(benchmark::kMicrosecond);
BENCHMARK(layer_norm<false>)->Args({512, 768})->Name("layer_norm/serial")->Unit(benchmark::kMicrosecond);
BENCHMARK(layer_norm<true>)->Args({512, 768})->Name("layer_norm/openmp")->Unit(benchmark::kMicrosecond);
BENCHMARK(train_step_toy)->Arg(8)->Arg(32)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
