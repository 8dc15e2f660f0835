#include <benchmark/benchmark.h>

#include <memory>
#include <random>
#include <string>
#include <vector>

#include "wepe/backbone.hpp"
#include "wepe/evaluation.hpp"
#include "wepe/perturbation.hpp"
#include "wepe/scoring.hpp"

namespace {

std::vector<wepe::PreprocessedImage> random_inputs(const wepe::ArchSpec& arch, std::size_t n) {
  std::mt19937_64 eng(1);
  std::normal_distribution<double> normal;
  std::vector<wepe::PreprocessedImage> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& in = out[i];
    in.source_id = "img" + std::to_string(i);
    in.channels = 3;
    in.height = in.width = arch.image_size;
    in.values.resize(static_cast<std::size_t>(3) * arch.image_size * arch.image_size);
    for (auto& v : in.values) v = normal(eng);
  }
  return out;
}

void BM_ExtractFeatures(benchmark::State& state) {
  const wepe::Backbone model = wepe::make_reference_backbone(0);
  const auto inputs = random_inputs(model.arch(), static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(wepe::extract_features(model, inputs));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ExtractFeatures)->Arg(1)->Arg(16);

void BM_PerturbModel(benchmark::State& state) {
  auto model = std::make_shared<const wepe::Backbone>(wepe::make_reference_backbone(0));
  wepe::PerturbationSpec spec;
  spec.block_indices = wepe::default_blocks(model->block_count());
  std::uint64_t seed = 0;
  for (auto _ : state) {
    spec.seed = seed++;
    benchmark::DoNotOptimize(wepe::perturb_model(model, spec, 0).materialize());
  }
}
BENCHMARK(BM_PerturbModel);

void BM_WepeScores(benchmark::State& state) {
  auto model = std::make_shared<const wepe::Backbone>(wepe::make_reference_backbone(0));
  const auto inputs = random_inputs(model->arch(), 16);
  std::vector<std::string> ids;
  for (const auto& in : inputs) ids.push_back(in.source_id);
  wepe::PerturbationSpec spec;
  spec.block_indices = wepe::default_blocks(model->block_count());
  spec.n_draws = static_cast<int>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(wepe::wepe_uncertainty(model, spec, inputs, ids));
  state.SetItemsProcessed(state.iterations() * 16);
}
BENCHMARK(BM_WepeScores)->Arg(1)->Arg(4);

void BM_Auroc(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 eng(2);
  std::uniform_real_distribution<double> u;
  std::vector<double> scores(n);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    scores[i] = u(eng);
    labels[i] = static_cast<int>(i % 2);
  }
  for (auto _ : state) benchmark::DoNotOptimize(wepe::compute_auroc(scores, labels));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Auroc)->Arg(1000)->Arg(100000);

}  // namespace
BENCHMARK_MAIN();
