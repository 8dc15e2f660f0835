#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <utility>
#include <string>
#include <vector>

#include "wepe/backbone.hpp"
#include "wepe/image.hpp"

namespace wepe {

/// Label convention: 1 = natural, 0 = generated.
inline constexpr int kNatural = 1;
inline constexpr int kGenerated = 0;

struct ManifestEntry {
  std::string path;  // absolute after load_manifest
  int label = kNatural;
  std::optional<std::string> generator;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct DatasetManifest {
  std::string name;
  std::vector<ManifestEntry> entries;

  std::size_t count(int label) const;
  bool has_both_labels() const { return count(kNatural) > 0 && count(kGenerated) > 0; }
  /// Generator tags of the generated entries, sorted and unique.
  std::vector<std::string> generators() const;

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

/// Parses {"name": str, "entries": [{"path": str, "label": 0|1, "generator": str?}]}.
/// Relative paths resolve against the manifest's directory. Errors name the
/// offending entry/field; duplicate paths are rejected.
DatasetManifest load_manifest(const std::filesystem::path& path);

/// Writes a manifest; paths under the manifest's directory are stored relative.
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

/// Decodes PNG/JPEG/WebP to RGB in [0,1] (grayscale replicated, alpha dropped),
/// resizes the shorter side to ceil(target * 256 / 224), then centre-crops
/// target x target.
Image load_rgb(const std::filesystem::path& path, int target_size);

/// Writes an RGB image as 8-bit PNG (values rounded after clipping to [0, 1]).
void save_png(const Image& image, const std::filesystem::path& path);

/// Per-channel standardisation with the architecture's registered statistics.
PreprocessedImage standardize(const Image& image, const ArchSpec& arch, std::string source_id);

/// load_rgb at the architecture's input size followed by standardize.
PreprocessedImage load_image(const std::filesystem::path& path, const ArchSpec& arch);

/// Images of a manifest decoded and preprocessed for one architecture.
/// Entries that fail to decode are listed in `errors` and skipped.
struct LoadedDataset {
  std::vector<std::string> ids;
  std::vector<int> labels;
  std::vector<std::string> generators;  // "" for natural images
  std::vector<Image> pixels;            // [0,1] crops before standardisation
  std::vector<PreprocessedImage> inputs;
  std::vector<std::pair<std::string, std::string>> errors;  // (path, message)

  std::size_t size() const { return ids.size(); }
  /// Subset by position.
  LoadedDataset select(const std::vector<std::size_t>& positions) const;
};

LoadedDataset load_dataset(const DatasetManifest& manifest, const ArchSpec& arch);

/// Hash of a preprocessed tensor's values (used as the feature-cache key).
std::uint64_t content_hash(const PreprocessedImage& image);

/// On-disk clean-feature cache: flat little-endian double file plus a JSON
/// index {image_hash: offset}. One cache directory per (arch id, model
/// fingerprint). Lookups may run concurrently; appends are serialised.
class FeatureCache {
 public:
  FeatureCache(std::filesystem::path root, const Backbone& model);

  std::optional<FeatureVector> get(std::uint64_t image_hash) const;
  void put(std::uint64_t image_hash, const FeatureVector& feature);
  std::size_t size() const;
  const std::filesystem::path& directory() const { return dir_; }

 private:
  void save_index() const;

  std::filesystem::path dir_;
  int dim_;
  std::map<std::uint64_t, std::uint64_t> index_;
  mutable std::mutex mu_;
};

/// Clean unit-norm features with cache lookups; misses are computed and stored.
std::vector<FeatureVector> cached_features(const Backbone& model, std::span<const PreprocessedImage> images,
                                           FeatureCache* cache, int workers = 1);

}  // namespace wepe
