#include <gtest/gtest.h>

#include <random>

#include "fixtures.hpp"
#include "wepe/error.hpp"
#include "wepe/probe.hpp"
#include "wepe/scoring.hpp"

using namespace wepe;

namespace {

const std::vector<double> kPublishedSimilarity = {99.40, 97.66, 98.83, 99.00, 98.80, 98.70, 99.37, 94.73,
                                                  92.87, 98.44, 97.07, 98.00, 93.46, 96.24, 94.80, 93.85,
                                                  92.40, 87.60, 71.50, 76.00, 80.27, 75.93, 34.81, 47.90};
const std::vector<int> kPublishedRanks = {1,  9,  4,  3,  5,  6,  2,  13, 16, 7,  10, 8,
                                          15, 11, 12, 14, 17, 18, 22, 20, 19, 21, 24, 23};

std::map<std::size_t, double> published_map() {
  std::map<std::size_t, double> m;
  for (std::size_t i = 0; i < kPublishedSimilarity.size(); ++i) m[i] = kPublishedSimilarity[i];
  return m;
}

}  // namespace

TEST(Probe, ReproducesPublishedRanking) {
  const ProbeReport report = make_probe_report(published_map());
  for (std::size_t i = 0; i < kPublishedRanks.size(); ++i) EXPECT_EQ(report.ranks.at(i), kPublishedRanks[i]) << i;
  EXPECT_EQ(select_blocks_topk(report, 8), (std::set<std::size_t>{0, 6, 3, 2, 4, 5, 9, 11}));
  EXPECT_THROW(select_blocks_topk(report, 0), ValidationError);
  EXPECT_THROW(select_blocks_topk(report, 25), ValidationError);
}

TEST(Probe, TiesRankLowerIndexFirst) {
  const auto ranks = rank_blocks({{0, 50.0}, {1, 80.0}, {2, 50.0}, {3, 80.0}});
  EXPECT_EQ(ranks.at(1), 1);
  EXPECT_EQ(ranks.at(3), 2);
  EXPECT_EQ(ranks.at(0), 3);
  EXPECT_EQ(ranks.at(2), 4);
}

TEST(Probe, RanksArePermutationsOnRandomInputs) {
  std::mt19937_64 eng(5);
  std::uniform_int_distribution<int> value(0, 20);
  for (int trial = 0; trial < 100; ++trial) {
    std::map<std::size_t, double> sims;
    for (std::size_t b = 0; b < 12; ++b) sims[b] = value(eng);
    const auto ranks = rank_blocks(sims);
    std::set<int> seen;
    for (const auto& [b, r] : ranks) seen.insert(r);
    EXPECT_EQ(seen.size(), 12u);
    for (const auto& [a, ra] : ranks)
      for (const auto& [b, rb] : ranks)
        if (sims[a] > sims[b] || (sims[a] == sims[b] && a < b)) EXPECT_LT(ra, rb);
  }
}

TEST(Probe, JsonRoundTrip) {
  ProbeReport report = make_probe_report(published_map());
  report.selected_blocks = select_blocks_topk(report, 8);
  const ProbeReport back = ProbeReport::from_json(report.to_json());
  EXPECT_EQ(back.per_block_similarity, report.per_block_similarity);
  EXPECT_EQ(back.ranks, report.ranks);
  EXPECT_EQ(back.selected_blocks, report.selected_blocks);
  EXPECT_EQ(back.method, report.method);
  EXPECT_THROW(ProbeReport::from_json("[]"), ValidationError);
}

TEST(Probe, NaturalProbeMatchesSingleBlockScoring) {
  const ParamSnapshot model = snapshot_params(make_reference_backbone(2));
  const auto inputs = wepe::fixtures::random_inputs(model->arch(), 3, 9);
  const ProbeReport report = probe_blocks_natural(model, inputs, 0.1, 4);
  ASSERT_EQ(report.per_block_similarity.size(), model->block_count());
  std::vector<std::string> ids(inputs.size(), "x");
  for (std::size_t b = 0; b < model->block_count(); ++b) {
    PerturbationSpec spec;
    spec.block_indices = {b};
    spec.seed = 4;
    double mean = 0;
    for (const auto& r : wepe_uncertainty(model, spec, inputs, ids)) mean += r.mean_similarity / inputs.size();
    EXPECT_NEAR(report.per_block_similarity.at(b), 100.0 * mean, 1e-9);
  }
  EXPECT_THROW(probe_blocks_natural(model, {}, 0.1, 4), ValidationError);
}

TEST(Probe, PrefixSweepPicksSmallestArgmax) {
  wepe::fixtures::TempDir dir;
  const auto manifest_path = wepe::fixtures::write_small_manifest(dir.path(), 6, 6);
  const ParamSnapshot model = snapshot_params(make_reference_backbone(0));
  const LoadedDataset data = load_dataset(load_manifest(manifest_path), model->arch());
  const std::vector<std::size_t> ks = {1, 2, 3, 4};
  const PrefixSweep sweep = sweep_prefix_supervised(model, data, 0.1, 0, ks);
  ASSERT_EQ(sweep.curve.size(), 4u);
  double best = -1;
  std::size_t best_k = 0;
  for (const auto& [k, auroc] : sweep.curve) {
    EXPECT_GE(auroc, 0.0);
    EXPECT_LE(auroc, 1.0);
    if (auroc > best) best = auroc, best_k = k;
  }
  EXPECT_EQ(sweep.best_k, best_k);
  const std::vector<std::size_t> bad = {0};
  EXPECT_THROW(sweep_prefix_supervised(model, data, 0.1, 0, bad), ValidationError);
}
