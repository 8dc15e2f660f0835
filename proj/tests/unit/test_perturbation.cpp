#include <gtest/gtest.h>

#include <cmath>

#include "fixtures.hpp"
#include "wepe/error.hpp"
#include "wepe/perturbation.hpp"

using namespace wepe;

namespace {

struct Moments {
  double mean = 0, var = 0, kurtosis = 0;
};

Moments moments(const std::vector<double>& v) {
  Moments m;
  for (double x : v) m.mean += x;
  m.mean /= v.size();
  double m4 = 0;
  for (double x : v) {
    m.var += (x - m.mean) * (x - m.mean);
    m4 += std::pow(x - m.mean, 4);
  }
  m.var /= v.size();
  m4 /= v.size();
  m.kurtosis = m4 / (m.var * m.var);
  return m;
}

double oracle_mean_abs(const ParameterBlock& block) {
  double total = 0;
  std::int64_t n = 0;
  for (const auto& [_, t] : block.tensors)
    for (std::int64_t i = 0; i < t.numel(); ++i, ++n) total += std::abs(t.data()[i]);
  return total / n;
}

PerturbationSpec spec_for(std::set<std::size_t> blocks, std::uint64_t seed = 7) {
  PerturbationSpec spec;
  spec.block_indices = std::move(blocks);
  spec.seed = seed;
  return spec;
}

}  // namespace

TEST(Perturbation, NoiseFamiliesHaveRequestedMoments) {
  const double stddev = 0.3;
  const struct {
    NoiseFamily family;
    double kurtosis;
  } cases[] = {{NoiseFamily::gaussian, 3.0}, {NoiseFamily::uniform, 1.8}, {NoiseFamily::laplace, 6.0}};
  for (const auto& c : cases) {
    std::vector<double> v(400000);
    fill_noise(c.family, stddev, 42, v);
    const Moments m = moments(v);
    EXPECT_NEAR(m.mean, 0.0, 5e-3) << to_string(c.family);
    EXPECT_NEAR(std::sqrt(m.var), stddev, 3e-3) << to_string(c.family);
    EXPECT_NEAR(m.kurtosis, c.kurtosis, 0.15) << to_string(c.family);
  }
  std::vector<double> v(4);
  EXPECT_THROW(fill_noise(NoiseFamily::mc_dropout, 1.0, 0, v), ValidationError);
}

TEST(Perturbation, UniformStaysInsideItsSupport) {
  std::vector<double> v(10000);
  fill_noise(NoiseFamily::uniform, 0.5, 3, v);
  for (double x : v) EXPECT_LE(std::abs(x), 0.5 * std::sqrt(3.0));
}

TEST(Perturbation, BlockSelectionParsing) {
  EXPECT_EQ(parse_block_selection("first:3", 24), (std::set<std::size_t>{0, 1, 2}));
  EXPECT_EQ(parse_block_selection("0,3,5", 24), (std::set<std::size_t>{0, 3, 5}));
  EXPECT_EQ(parse_block_selection("0-3,7", 24), (std::set<std::size_t>{0, 1, 2, 3, 7}));
  EXPECT_EQ(parse_block_selection("2-2", 4), (std::set<std::size_t>{2}));
  for (const char* bad : {"", "first:0", "first:25", "a", "3-1", "1,,2", "24", "-1"})
    EXPECT_THROW(parse_block_selection(bad, 24), ValidationError) << bad;
}

TEST(Perturbation, DefaultBlocks) {
  EXPECT_EQ(default_blocks(24).size(), 19u);
  EXPECT_EQ(*default_blocks(24).rbegin(), 18u);
  EXPECT_EQ(default_blocks(12).size(), 10u);
  EXPECT_EQ(default_blocks(4).size(), 4u);
  EXPECT_EQ(default_blocks(1).size(), 1u);
}

TEST(Perturbation, SpecValidationAndJson) {
  PerturbationSpec spec = spec_for({0, 2});
  spec.family = NoiseFamily::laplace;
  spec.ratio = 0.25;
  spec.n_draws = 3;
  EXPECT_NO_THROW(spec.validate(4));
  EXPECT_EQ(PerturbationSpec::from_json(spec.to_json()), spec);
  EXPECT_EQ(spec.hash(), PerturbationSpec::from_json(spec.to_json()).hash());
  PerturbationSpec other = spec;
  other.seed = 8;
  EXPECT_NE(other.hash(), spec.hash());

  EXPECT_THROW(spec_for({4}).validate(4), ValidationError);
  EXPECT_THROW(spec_for({}).validate(4), ValidationError);
  PerturbationSpec bad = spec_for({0});
  bad.ratio = 0;
  EXPECT_THROW(bad.validate(4), ValidationError);
  bad.ratio = 0.1;
  bad.n_draws = 0;
  EXPECT_THROW(bad.validate(4), ValidationError);
  bad.n_draws = 1;
  bad.dropout_p = 1.0;
  EXPECT_THROW(bad.validate(4), ValidationError);
  EXPECT_THROW(PerturbationSpec::from_json("{\"family\":\"gaussian\"}"), ValidationError);
  EXPECT_THROW(parse_noise_family("cauchy"), ValidationError);
}

TEST(Perturbation, NoiseScaleFollowsBlockMagnitude) {
  const ParamSnapshot model = snapshot_params(make_reference_backbone(1));
  PerturbationSpec spec = spec_for({1});
  spec.ratio = 0.2;
  const PerturbedSnapshot p = perturb_model(model, spec, 0);
  const double expected = 0.2 * oracle_mean_abs(model->block(1));
  EXPECT_NEAR(per_block_noise_std(model->block(1), 0.2), expected, 1e-15);
  std::vector<double> all;
  for (const auto& [_, d] : p.deltas.at(1))
    for (std::int64_t i = 0; i < d.numel(); ++i) all.push_back(d.data()[i]);
  EXPECT_NEAR(std::sqrt(moments(all).var), expected, 0.02 * expected);
}

TEST(Perturbation, OnlySelectedBlocksChange) {
  const ParamSnapshot model = snapshot_params(make_reference_backbone(2));
  const Backbone perturbed = perturb_model(model, spec_for({1, 3}), 0).materialize();
  for (std::size_t b = 0; b < 4; ++b)
    for (const auto& [name, t] : model->block(b).tensors)
      EXPECT_EQ(perturbed.param(name) == t, b == 0 || b == 2) << name;
  for (const auto& [name, t] : model->non_block_params()) EXPECT_TRUE(perturbed.param(name) == t) << name;
}

TEST(Perturbation, DrawsAreKeyedAndReproducible) {
  const ParamSnapshot model = snapshot_params(make_reference_backbone(3));
  PerturbationSpec spec = spec_for({0, 1, 2, 3});
  spec.n_draws = 2;
  const auto a = perturb_model(model, spec, 0);
  const auto b = perturb_model(model, spec, 0);
  const auto c = perturb_model(model, spec, 1);
  const auto& name = "blocks.3.attn.q.weight";
  EXPECT_TRUE(a.deltas.at(3).at(name) == b.deltas.at(3).at(name));
  EXPECT_FALSE(a.deltas.at(3).at(name) == c.deltas.at(3).at(name));

  // Selecting a subset leaves the other blocks' noise unchanged, apart from
  // the scale, which depends only on the block itself.
  PerturbationSpec only3 = spec_for({3});
  only3.n_draws = 2;
  EXPECT_TRUE(perturb_model(model, only3, 0).deltas.at(3).at(name) == a.deltas.at(3).at(name));

  EXPECT_THROW(perturb_model(model, spec, 2), ValidationError);
  spec.family = NoiseFamily::mc_dropout;
  EXPECT_THROW(perturb_model(model, spec, 0), ValidationError);
}

TEST(Perturbation, DropoutMasksAreInvertedAndFixed) {
  const ArchSpec& arch = find_arch("ref-tiny");
  const auto masks = dropout_masks(arch, {0, 2}, 0.25, 5, 0);
  ASSERT_EQ(masks.size(), 2u);
  std::size_t dropped = 0, total = 0;
  for (const auto& [_, m] : masks) {
    EXPECT_EQ(m.rows(), arch.tokens());
    EXPECT_EQ(m.cols(), arch.mlp_hidden);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const double v = m.data()[i];
      EXPECT_TRUE(v == 0.0 || std::abs(v - 1.0 / 0.75) < 1e-15);
      dropped += v == 0.0;
      ++total;
    }
  }
  EXPECT_NEAR(static_cast<double>(dropped) / total, 0.25, 0.02);
  EXPECT_EQ(masks.at(2), dropout_masks(arch, {0, 2}, 0.25, 5, 0).at(2));
  EXPECT_NE(masks.at(2), dropout_masks(arch, {0, 2}, 0.25, 5, 1).at(2));
  EXPECT_THROW(dropout_masks(arch, {0}, 0.0, 0), ValidationError);
  EXPECT_THROW(dropout_masks(arch, {4}, 0.1, 0), ValidationError);
}

TEST(Perturbation, DropoutFeaturesDifferFromCleanAndAreUnitNorm) {
  const Backbone model = make_reference_backbone(4);
  const auto inputs = wepe::fixtures::random_inputs(model.arch(), 2, 1);
  const auto clean = extract_features(model, inputs);
  const auto dropped = mc_dropout_features(model, inputs, 0.1, 9);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    EXPECT_NEAR(dropped[i].norm(), 1.0, 1e-12);
    EXPECT_GT((dropped[i] - clean[i]).norm(), 1e-6);
  }
  const auto again = mc_dropout_features(model, inputs, 0.1, 9, {}, 0, 2);
  EXPECT_EQ(again[1], dropped[1]);
}
