#pragma once

#include <map>
#include <string>

#include "wepe/autograd.hpp"
#include "wepe/backbone.hpp"

namespace wepe {

/// Low-rank update W + scale * B * A attached to one projection weight.
struct LowRankVars {
  ag::Var a;  // [rank, in]
  ag::Var b;  // [out, rank]
  double scale = 1.0;
};

/// Hooks for building a differentiable or modified forward pass.
struct GraphOptions {
  /// Replaces the borrowed constant for a tensor (e.g. with a trainable leaf).
  const std::map<std::string, ag::Var>* param_vars = nullptr;
  /// Low-rank adapters keyed by the full weight name they modify.
  const std::map<std::string, LowRankVars>* adapters = nullptr;
  /// Per-block multiplicative masks on the MLP hidden activations [tokens, hidden].
  const std::map<std::size_t, RowMatrix>* mlp_masks = nullptr;
};

/// Patch matrix [num_patches, channels * patch * patch] in (c, ky, kx) order,
/// matching a convolutional patch-embedding weight of shape [dim, c, p, p].
RowMatrix image_to_patches(const PreprocessedImage& image, int patch);

/// Throws ValidationError when `image` does not match the arch's input contract.
void check_input(const ArchSpec& arch, const PreprocessedImage& image);

/// Positional embedding resampled (bilinear, half-pixel centres) to the input grid.
RowMatrix positional_embedding(const Backbone& model);

/// Builds the forward graph and returns the 1 x dim class-token feature after
/// the final norm (not L2-normalised).
ag::Var vit_forward(const Backbone& model, const PreprocessedImage& image, const GraphOptions& options = {});

}  // namespace wepe
