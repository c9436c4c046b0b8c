#include <benchmark/benchmark.h>

#include <random>

#include "impinj/attack.h"
#include "impinj/forest.h"
#include "impinj/synthetic.h"
#include "impinj/tape.h"

namespace {

using namespace impinj;

Matrix random_bits(Eigen::Index rows, Eigen::Index cols, double density, std::uint64_t seed) {
  Rng rng(seed);
  std::bernoulli_distribution b(density);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = b(rng) ? 1.0 : 0.0;
  return m;
}

void BM_DenseFirstLayer(benchmark::State& state) {
  const Matrix x = random_bits(128, state.range(0), 0.02, 1);
  const Matrix w = Matrix::Random(state.range(0), 256);
  for (auto _ : state) {
    nn::Tape tape(false);
    benchmark::DoNotOptimize(nn::matmul(tape.constant(x), tape.constant(w)).value().data());
  }
}
BENCHMARK(BM_DenseFirstLayer)->Arg(1024)->Arg(4096);

void BM_SparseFirstLayer(benchmark::State& state) {
  const SparseMatrix x = to_sparse(random_bits(128, state.range(0), 0.02, 1));
  const Matrix w = Matrix::Random(state.range(0), 256);
  for (auto _ : state) {
    nn::Tape tape(false);
    benchmark::DoNotOptimize(nn::sparse_matmul(x, tape.constant(w)).value().data());
  }
}
BENCHMARK(BM_SparseFirstLayer)->Arg(1024)->Arg(4096);

void BM_ForestPredict(benchmark::State& state) {
  SyntheticSpec spec;
  spec.class_sizes = std::vector<int>(6, 100);
  spec.features = 256;
  spec.seed = 3;
  const LabeledDataset ds = make_synthetic_dataset(spec);
  std::vector<int> y;
  for (ClassId c : ds.labels) y.push_back(c - 1);
  ForestConfig cfg;
  cfg.n_trees = static_cast<int>(state.range(0));
  const ForestModel model = train_forest(ds.features, y, 6, cfg);
  for (auto _ : state) benchmark::DoNotOptimize(predict_proba(model, ds.features).data());
  state.SetItemsProcessed(state.iterations() * static_cast<long>(ds.size()));
}
BENCHMARK(BM_ForestPredict)->Arg(10)->Arg(100);

void BM_CvaeScores(benchmark::State& state) {
  CvaeConfig cfg;
  cfg.enc_hidden1 = 256;
  cfg.enc_hidden2 = 128;
  cfg.dec_hidden1 = 256;
  cfg.dec_hidden2 = 256;
  cfg.dec_hidden3 = 512;
  Rng rng(5);
  CvaeModel model(1024, 5, cfg, rng);
  const Matrix x = random_bits(state.range(0), 1024, 0.03, 2);
  std::vector<ClassId> t(static_cast<std::size_t>(x.rows()));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<ClassId>(1 + i % 5);
  for (auto _ : state) benchmark::DoNotOptimize(cvae_scores(model, x, t).data());
  state.SetItemsProcessed(state.iterations() * x.rows());
}
BENCHMARK(BM_CvaeScores)->Arg(64)->Arg(512);

void BM_TopKAbsent(benchmark::State& state) {
  const Matrix x = random_bits(1, 4096, 0.03, 4);
  const Matrix s = Matrix::Random(1, 4096);
  const std::span<const double> xs(x.data(), 4096), ss(s.data(), 4096);
  for (auto _ : state) benchmark::DoNotOptimize(top_k_absent(ss, xs, static_cast<int>(state.range(0))));
}
BENCHMARK(BM_TopKAbsent)->Arg(5)->Arg(50);

}  // namespace

BENCHMARK_MAIN();
