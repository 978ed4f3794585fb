#include "plsim/plsim.hpp"

#include <benchmark/benchmark.h>

using namespace plsim;

namespace {

LongitudinalDataset example1_data(Index n) {
  return generate_dataset(example1(n, CorrelationKind::Exchangeable, 7), 0);
}

// ---- smoother ----

void BM_SmootherFitObserved(benchmark::State& state) {
  const SimDesign design = example1(state.range(0), CorrelationKind::Exchangeable, 7);
  const LongitudinalDataset data = generate_dataset(design, 0);
  const LocalLinearSmoother smoother(data, design.beta0, {0.8, 1e-3});
  for (auto _ : state) benchmark::DoNotOptimize(smoother.fit_observed(design.theta0));
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_SmootherFitObserved)->RangeMultiplier(2)->Range(60, 480)->Complexity();

void BM_SelectBandwidth(benchmark::State& state) {
  const SimDesign design = example1(state.range(0), CorrelationKind::Exchangeable, 7);
  const LongitudinalDataset data = generate_dataset(design, 0);
  const IndexParam beta = IndexParam::from_direction(design.beta0);
  const std::vector<double> grid = default_bandwidth_grid(data.x() * design.beta0);
  for (auto _ : state) benchmark::DoNotOptimize(select_bandwidth(data, beta, design.theta0, grid, 1e-3));
}
BENCHMARK(BM_SelectBandwidth)->Arg(60)->Arg(120)->Unit(benchmark::kMillisecond);

// ---- solvers ----

void BM_SolveGee(benchmark::State& state) {
  const LongitudinalDataset data = example1_data(state.range(0));
  const GeeConfig cfg;
  for (auto _ : state) benchmark::DoNotOptimize(solve_gee(data, cfg));
}
BENCHMARK(BM_SolveGee)->Arg(60)->Arg(120)->Unit(benchmark::kMillisecond);

void BM_QifObjective(benchmark::State& state) {
  const SimDesign design = example1(state.range(0), CorrelationKind::Exchangeable, 7);
  const LongitudinalDataset data = generate_dataset(design, 0);
  const QifConfig cfg;
  const KernelConfig kernel{0.8, cfg.kernel_ridge};
  const IndexParam beta = IndexParam::from_direction(design.beta0);
  const EstimatingState st = evaluate_state(data, beta, design.theta0, kernel);
  const std::vector<Vector> variances = qif_variances(data, st, cfg);
  for (auto _ : state) benchmark::DoNotOptimize(qif_objective(data, beta, design.theta0, kernel, variances, cfg));
}
BENCHMARK(BM_QifObjective)->Arg(60)->Arg(120);

void BM_SolveQif(benchmark::State& state) {
  const LongitudinalDataset data = example1_data(state.range(0));
  const QifConfig cfg;
  for (auto _ : state) benchmark::DoNotOptimize(solve_qif(data, cfg));
}
BENCHMARK(BM_SolveQif)->Arg(60)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
