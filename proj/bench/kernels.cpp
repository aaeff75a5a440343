// Parallel kernels against their serial references.
//
//   bench_kernels --benchmark_filter=Gradient
//   OMP_NUM_THREADS=4 bench_kernels

#include <benchmark/benchmark.h>

#include <string>

#include "mdnik/kinematics.hpp"
#include "mdnik/mdn.hpp"
#include "mdnik/reference.hpp"

using namespace mdnik;

namespace {

const KinematicChain& arm() {
    static const KinematicChain chain = load_chain(std::string(MDNIK_DATA_DIR) + "/chains/desk_arm_5dof.urdf");
    return chain;
}

struct Batch {
    MdnModel model;
    Eigen::MatrixXd x, y;
};

Batch make_batch(Eigen::Index n) {
    MdnConfig c;
    c.output_dim = 5;
    c.seed = 1;
    Batch b{init_model(c), Eigen::MatrixXd(3, n), Eigen::MatrixXd(5, n)};
    Rng rng(2);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (int r = 0; r < 3; ++r) b.x(r, i) = rng.uniform(-2, 2);
        for (int r = 0; r < 5; ++r) b.y(r, i) = rng.uniform(-2, 2);
    }
    return b;
}

Eigen::MatrixXd configs(Eigen::Index n) {
    Rng rng(3);
    Eigen::MatrixXd q(5, n);
    for (Eigen::Index i = 0; i < n; ++i) q.col(i) = sample_config(arm(), rng);
    return q;
}

void BM_GradientParallel(benchmark::State& state) {
    const Batch b = make_batch(state.range(0));
    for (auto _ : state) benchmark::DoNotOptimize(batch_gradient(b.model, b.x, b.y).loss);
    state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_GradientReference(benchmark::State& state) {
    const Batch b = make_batch(state.range(0));
    for (auto _ : state) benchmark::DoNotOptimize(reference::batch_gradient(b.model, b.x, b.y).loss);
    state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_ForwardParallel(benchmark::State& state) {
    const Eigen::MatrixXd q = configs(state.range(0));
    for (auto _ : state) benchmark::DoNotOptimize(forward_positions(arm(), q).data());
    state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_ForwardReference(benchmark::State& state) {
    const Eigen::MatrixXd q = configs(state.range(0));
    for (auto _ : state) benchmark::DoNotOptimize(reference::forward_positions(arm(), q).data());
    state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_PredictConfig(benchmark::State& state) {
    const Batch b = make_batch(1);
    const Eigen::Vector3d x(0.2, 0.05, 0.05);
    for (auto _ : state) benchmark::DoNotOptimize(predict_config(b.model, x).data());
}

}  // namespace

BENCHMARK(BM_GradientParallel)->Arg(256)->Arg(2048)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_GradientReference)->Arg(256)->Arg(2048)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_ForwardParallel)->Arg(10000)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_ForwardReference)->Arg(10000)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_PredictConfig)->Unit(benchmark::kMicrosecond);

BENCHMARK_MAIN();
