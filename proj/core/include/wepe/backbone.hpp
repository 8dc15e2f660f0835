#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "wepe/image.hpp"
#include "wepe/tensor.hpp"

namespace wepe {

/// Static description of a supported vision-transformer architecture.
struct ArchSpec {
  std::string id;
  int depth = 0;
  int dim = 0;
  int heads = 0;
  int mlp_hidden = 0;
  int patch = 0;
  int image_size = 0;  // expected preprocessed input side length
  int pos_grid = 0;    // side of the positional-embedding grid stored in checkpoints
  double ln_eps = 1e-6;
  std::array<double, 3> mean{};
  std::array<double, 3> stddev{};

  int grid() const { return image_size / patch; }
  int tokens() const { return grid() * grid() + 1; }
};

/// Looks up a registered architecture; throws ValidationError for unknown ids.
const ArchSpec& find_arch(std::string_view id);
std::vector<std::string> registered_archs();

/// Canonical tensor names and shapes an architecture declares, in load order
/// (non-block tensors first, then blocks in forward order).
std::vector<std::pair<std::string, std::vector<std::int64_t>>> declared_tensors(const ArchSpec& arch);

/// Name prefix of every tensor owned by block `index`.
std::string block_prefix(std::size_t index);

/// One transformer layer's parameters (attention, MLP, norms, layer scales).
struct ParameterBlock {
  std::size_t index = 0;
  TensorMap tensors;
  double mean_abs_param = 0.0;

  std::int64_t parameter_count() const;
  /// Recomputes mean_abs_param; must follow any parameter change.
  void refresh_stats();
};

/// A feature extractor viewed as ordered parameter blocks plus the remaining
/// (patch embedding, positional embedding, class token, final norm) tensors.
class Backbone {
 public:
  Backbone(ArchSpec arch, std::vector<ParameterBlock> blocks, TensorMap non_block_params);

  /// Builds a backbone from a flat name → tensor map, validating names and shapes.
  static Backbone from_tensors(const ArchSpec& arch, TensorMap tensors);

  const ArchSpec& arch() const { return arch_; }
  const std::string& arch_id() const { return arch_.id; }
  int feature_dim() const { return arch_.dim; }
  std::size_t block_count() const { return blocks_.size(); }

  const std::vector<ParameterBlock>& blocks() const { return blocks_; }
  const ParameterBlock& block(std::size_t i) const { return blocks_.at(i); }
  const TensorMap& non_block_params() const { return non_block_; }

  bool has_param(const std::string& name) const;
  const Tensor& param(const std::string& name) const;
  /// Replaces a tensor (shape must match) and refreshes the owning block's stats.
  void set_param(const std::string& name, Tensor value);
  /// Adds `delta` in place to a block tensor and refreshes that block's stats.
  void add_to_param(const std::string& name, const RowMatrix& delta);

  TensorMap all_params() const;
  std::int64_t parameter_count() const;
  /// Content fingerprint over arch id and every parameter's bytes.
  std::uint64_t fingerprint() const;

  friend bool operator==(const Backbone& a, const Backbone& b);

 private:
  ParameterBlock* owning_block(const std::string& name);

  ArchSpec arch_;
  std::vector<ParameterBlock> blocks_;
  TensorMap non_block_;
};

using FeatureVector = Eigen::VectorXd;

/// Immutable deep copy of a backbone's parameters.
using ParamSnapshot = std::shared_ptr<const Backbone>;

ParamSnapshot snapshot_params(const Backbone& model);

/// Loads a named-tensor checkpoint for `arch_id`. Errors: missing file,
/// unknown arch, missing/unexpected tensor, or shape mismatch naming the first
/// offending tensor in declared order.
Backbone load_backbone(const std::filesystem::path& checkpoint, std::string_view arch_id);

void save_backbone(const Backbone& model, const std::filesystem::path& checkpoint);

/// Randomly initialised backbone (weights N(0, 0.02^2), zero biases, unit
/// norms and layer scales) from a fixed seed.
Backbone make_reference_backbone(std::uint64_t seed, std::string_view arch_id = "ref-tiny");

/// Copy keeping only the first `depth` blocks; the arch id gets a ":<depth>" suffix.
Backbone truncate_blocks(const Backbone& model, std::size_t depth);

/// Unit-norm class-token features, one per image, in input order.
std::vector<FeatureVector> extract_features(const Backbone& model, std::span<const PreprocessedImage> images,
                                            int workers = 1);

/// Class-token features after the final norm, before L2 normalisation.
std::vector<FeatureVector> extract_raw_features(const Backbone& model, std::span<const PreprocessedImage> images,
                                                int workers = 1);

/// Converts a public DINOv2 checkpoint (safetensors layout; either Hugging Face
/// "embeddings.* / encoder.layer.*" names or the original "blocks.*" names with
/// fused qkv) into this library's canonical archive for `arch_id`.
void convert_dinov2_checkpoint(const std::filesystem::path& source, const std::filesystem::path& destination,
                               std::string_view arch_id);

/// Directory for downloaded/converted checkpoints and caches: $WEPE_CACHE_DIR,
/// else $HOME/.cache/wepe.
std::filesystem::path cache_dir();

}  // namespace wepe
