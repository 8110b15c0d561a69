// Microbenchmarks for the hot paths: tree sampling, quantization, the
// generator's forward/backward pass, sampling, and GNN evaluation.

#include <benchmark/benchmark.h>

#include <vector>

#include "cgt/cgt_model.hpp"
#include "cgt/gnn.hpp"
#include "cgt/graph.hpp"
#include "cgt/quantizer.hpp"
#include "cgt/tree.hpp"

using namespace cgt;

namespace {

Graph bench_graph(std::size_t n) {
  SbmOptions o;
  o.num_nodes = n;
  o.p_in = 20.0 / static_cast<double>(n);
  o.p_out = 2.0 / static_cast<double>(n);
  return stochastic_block_model(o, 1);
}

CgtConfig bench_config(CgtVariant variant) {
  CgtConfig c;
  c.vocab = 31;
  c.labels = 4;
  c.dim = 64;
  c.heads = 4;
  c.layers = 3;
  c.shape = TreeShape(3, 2);
  c.variant = variant;
  return c;
}

std::vector<TokenSequence> bench_tokens(const CgtConfig& c, std::size_t n) {
  Rng rng(2);
  std::vector<TokenSequence> out(n);
  for (auto& ts : out) {
    ts.root_label = static_cast<Label>(rng.below(c.labels));
    ts.tokens.assign(c.shape.size(), c.null_token());
    for (std::uint32_t t = 1; t <= c.shape.size(); ++t) {
      if (t > 1 && ts.tokens[c.shape.parent(t) - 1] == c.null_token()) continue;
      if (t == 1 || rng.uniform() < 0.8) ts.tokens[t - 1] = static_cast<std::int32_t>(rng.below(c.vocab - 1));
    }
  }
  return out;
}

void BM_SampleComputationGraphs(benchmark::State& state) {
  const Graph g = bench_graph(static_cast<std::size_t>(state.range(0)));
  const TreeShape shape(3, 2);
  for (auto _ : state) benchmark::DoNotOptimize(sample_computation_graphs(g, shape, 3));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_SampleComputationGraphs)->Arg(1000)->Arg(4000);

void BM_FitKMeans(benchmark::State& state) {
  const Graph g = bench_graph(static_cast<std::size_t>(state.range(0)));
  KMeansOptions o;
  o.clusters = 30;
  o.k_min = 10;
  for (auto _ : state) benchmark::DoNotOptimize(fit_kmeans_min_size(g.features(), o, 4));
}
BENCHMARK(BM_FitKMeans)->Arg(1000)->Arg(4000)->Unit(benchmark::kMillisecond);

void BM_Quantize(benchmark::State& state) {
  const Graph g = bench_graph(2000);
  KMeansOptions o;
  o.clusters = 30;
  const auto q = fit_kmeans_min_size(g.features(), o, 4);
  const auto trees = sample_computation_graphs(g, TreeShape(3, 2), 3);
  for (auto _ : state) {
    for (const auto& cg : trees) benchmark::DoNotOptimize(quantize(cg, q));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(trees.size()));
}
BENCHMARK(BM_Quantize);

void BM_CgtForwardBackward(benchmark::State& state) {
  const auto c = bench_config(static_cast<CgtVariant>(state.range(0)));
  const auto params = init_params<float>(c, 5);
  const auto data = bench_tokens(c, 32);
  const Batch batch = make_batch(c, data);
  for (auto _ : state) benchmark::DoNotOptimize(backward(params, c, batch));
  state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(BM_CgtForwardBackward)
    ->Arg(static_cast<int>(CgtVariant::kFullSequence))
    ->Arg(static_cast<int>(CgtVariant::kCostEfficient))
    ->Unit(benchmark::kMillisecond);

void BM_CgtGenerate(benchmark::State& state) {
  const auto c = bench_config(CgtVariant::kFullSequence);
  const auto params = init_params<float>(c, 5);
  const std::vector<double> weights(c.labels, 1.0);
  for (auto _ : state) benchmark::DoNotOptimize(generate(params, c, 64, weights, 1.0, 6));
  state.SetItemsProcessed(state.iterations() * 64);
}
BENCHMARK(BM_CgtGenerate)->Unit(benchmark::kMillisecond);

void BM_GnnForward(benchmark::State& state) {
  const Graph g = bench_graph(1000);
  const auto trees = sample_computation_graphs(g, TreeShape(3, 2), 3);
  GnnConfig cfg;
  cfg.aggregator = static_cast<Aggregator>(state.range(0));
  const auto params = init_gnn(cfg, g.feature_dim(), static_cast<std::size_t>(g.num_classes()), 7);
  const TreeBatch batch = stack_trees(trees);
  for (auto _ : state) {
    ad::Tape<float> tape;
    benchmark::DoNotOptimize(tape.value(gnn_forward_on_tape(tape, cfg, params, batch, false)));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(trees.size()));
}
BENCHMARK(BM_GnnForward)
    ->Arg(static_cast<int>(Aggregator::kMean))
    ->Arg(static_cast<int>(Aggregator::kSum))
    ->Arg(static_cast<int>(Aggregator::kAttention))
    ->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
