#include <benchmark/benchmark.h>

#include <vector>

#include "deconf/factor_model.hpp"
#include "deconf/forecaster.hpp"
#include "deconf/numerics.hpp"
#include "deconf/simgen.hpp"

namespace {

using namespace deconf;

Dataset bench_dataset(int n, int T, int k) {
    SimConfig cfg;
    cfg.n_sequences = n;
    cfg.T = T;
    cfg.k = k;
    cfg.p = 5;
    cfg.gamma_a = 0.7;
    cfg.gamma_y = 0.7;
    cfg.seed = 24;
    return generate_dataset(cfg);
}

void BM_SimulateSequence(benchmark::State& state) {
    SimConfig cfg;
    cfg.T = static_cast<int>(state.range(0));
    cfg.k = 3;
    cfg.p = 5;
    Rng rng(1);
    const Coefficients coeffs = draw_coefficients(cfg, rng);
    for (auto _ : state) {
        benchmark::DoNotOptimize(simulate_sequence(cfg, coeffs, rng));
    }
    state.SetItemsProcessed(state.iterations() * cfg.T);
}
BENCHMARK(BM_SimulateSequence)->Arg(60)->Arg(120);

void BM_FactorInference(benchmark::State& state) {
    const Dataset ds = bench_dataset(1, static_cast<int>(state.range(0)), 3);
    FactorModelConfig cfg;
    cfg.seed = 2;
    const FactorModel model(3, cfg);
    for (auto _ : state) {
        benchmark::DoNotOptimize(model.infer_confounders(ds.trajectories[0]));
    }
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_FactorInference)->Arg(60)->Arg(120);

void BM_FactorLossAndGrad(benchmark::State& state) {
    const Dataset ds = bench_dataset(static_cast<int>(state.range(0)), 60, 3);
    FactorModelConfig cfg;
    cfg.seed = 3;
    FactorModel model(3, cfg);
    for (auto _ : state) {
        model.params().zero_grads();
        benchmark::DoNotOptimize(model.loss_and_grad(ds.trajectories));
    }
    state.SetItemsProcessed(state.iterations() * state.range(0) * 60);
}
BENCHMARK(BM_FactorLossAndGrad)->Arg(8)->Arg(32);

void BM_ForecasterLossAndGrad(benchmark::State& state) {
    const Arch arch = static_cast<Arch>(state.range(0));
    const Dataset ds = bench_dataset(8, 120, 3);
    ForecasterConfig cfg;
    cfg.arch = arch;
    cfg.sl = 48;
    cfg.pl = 12;
    cfg.hidden_dim = 16;
    cfg.seed = 4;
    Forecaster model(cfg, 6);
    std::vector<Window> windows = make_windows(ds, nullptr, cfg, 8);
    std::vector<const Window*> batch;
    for (const Window& w : windows) {
        batch.push_back(&w);
    }
    for (auto _ : state) {
        model.params().zero_grads();
        benchmark::DoNotOptimize(
            model.loss_and_grad(std::span<const Window* const>(batch)));
    }
    state.SetItemsProcessed(state.iterations() * static_cast<long>(batch.size()));
    state.SetLabel(arch_name(arch));
}
BENCHMARK(BM_ForecasterLossAndGrad)
    ->Arg(static_cast<int>(Arch::linear))
    ->Arg(static_cast<int>(Arch::mlp))
    ->Arg(static_cast<int>(Arch::attention));

void BM_AdamStep(benchmark::State& state) {
    ParamStore params;
    Rng rng(5);
    params.add("w", state.range(0), state.range(0));
    Eigen::MatrixXd& g = params.at("w").grad;
    for (Eigen::Index c = 0; c < g.cols(); ++c) {
        for (Eigen::Index r = 0; r < g.rows(); ++r) {
            g(r, c) = rng.standard_normal();
        }
    }
    Adam adam;
    for (auto _ : state) {
        adam.step(params);
    }
    state.SetItemsProcessed(state.iterations() * state.range(0) * state.range(0));
}
BENCHMARK(BM_AdamStep)->Arg(32)->Arg(128);

void BM_MakeWindows(benchmark::State& state) {
    const Dataset ds = bench_dataset(32, 120, 3);
    ForecasterConfig cfg;
    cfg.sl = 48;
    cfg.pl = 12;
    for (auto _ : state) {
        benchmark::DoNotOptimize(make_windows(ds, nullptr, cfg));
    }
}
BENCHMARK(BM_MakeWindows);

}  // namespace

BENCHMARK_MAIN();
