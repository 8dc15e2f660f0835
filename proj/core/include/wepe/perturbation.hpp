#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "wepe/backbone.hpp"

namespace wepe {

enum class NoiseFamily { gaussian, uniform, laplace, mc_dropout };

std::string_view to_string(NoiseFamily family);
NoiseFamily parse_noise_family(std::string_view text);

/// What to perturb and how: the family, the per-block std ratio, the target
/// blocks, the number of independent draws and the seed.
struct PerturbationSpec {
  NoiseFamily family = NoiseFamily::gaussian;
  double ratio = 0.1;
  std::set<std::size_t> block_indices;
  int n_draws = 1;
  std::uint64_t seed = 0;
  double dropout_p = 0.1;

  /// Throws ValidationError unless ratio > 0, n_draws >= 1, dropout_p in (0,1)
  /// and every block index is below `block_count`.
  void validate(std::size_t block_count) const;

  /// {"family","ratio","blocks","n_draws","seed","dropout_p"}
  std::string to_json() const;
  static PerturbationSpec from_json(std::string_view text);
  /// Stable hex digest of to_json().
  std::string hash() const;

  friend bool operator==(const PerturbationSpec&, const PerturbationSpec&) = default;
};

/// Parses "first:K", "0,3,5", "0-18" and mixtures such as "0-3,7".
std::set<std::size_t> parse_block_selection(std::string_view text, std::size_t block_count);

/// Default target set: the first 19 of 24 blocks, else the first ceil(0.8 * B).
std::set<std::size_t> default_blocks(std::size_t block_count);

/// Noise standard deviation for a block: ratio * mean |theta_b|.
double per_block_noise_std(const ParameterBlock& block, double ratio);

/// Zero-mean noise with standard deviation `stddev` from `family`
/// (uniform on +-sqrt(3)*std, Laplace with scale std/sqrt(2)).
void fill_noise(NoiseFamily family, double stddev, std::uint64_t stream, std::span<double> out);

/// A base snapshot plus additive deltas on the selected blocks.
struct PerturbedSnapshot {
  ParamSnapshot base;
  int draw_index = 0;
  std::map<std::size_t, TensorMap> deltas;

  /// Base parameters with deltas applied.
  Backbone materialize() const;
};

/// Draws one perturbation. Deltas are reproducible from (seed, draw_index,
/// block, tensor name); unselected blocks and non-block tensors are untouched.
PerturbedSnapshot perturb_model(const ParamSnapshot& snapshot, const PerturbationSpec& spec, int draw_index);

/// Inverted-dropout masks on each selected block's MLP hidden units, fixed for
/// a (seed, draw) so every image sees the same dropped units.
std::map<std::size_t, RowMatrix> dropout_masks(const ArchSpec& arch, const std::set<std::size_t>& blocks, double p,
                                               std::uint64_t seed, int draw_index = 0);

/// Unit-norm features under MC dropout on the MLP hidden activations.
/// An empty `blocks` set means every block.
std::vector<FeatureVector> mc_dropout_features(const Backbone& model, std::span<const PreprocessedImage> images,
                                               double p, std::uint64_t seed, std::set<std::size_t> blocks = {},
                                               int draw_index = 0, int workers = 1);

}  // namespace wepe
