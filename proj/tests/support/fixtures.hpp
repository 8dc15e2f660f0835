#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "wepe/backbone.hpp"
#include "wepe/data.hpp"
#include "wepe/image.hpp"

namespace wepe::fixtures {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "wepe");
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// Uniform [0,1] RGB image.
Image random_image(std::uint64_t seed, int size);

/// Standardised random input for `arch`.
PreprocessedImage random_input(const ArchSpec& arch, std::uint64_t seed);
std::vector<PreprocessedImage> random_inputs(const ArchSpec& arch, std::size_t n, std::uint64_t seed);

/// Writes PNGs and a manifest with `n_natural` smooth and `n_generated` noisy images.
std::filesystem::path write_small_manifest(const std::filesystem::path& dir, int n_natural, int n_generated,
                                           int size = 37);

std::string read_file(const std::filesystem::path& path);

// Brute-force metric oracles, written independently of the library.

/// Fraction of (natural, generated) pairs ranked correctly, ties counted half.
double oracle_auroc(const std::vector<double>& scores, const std::vector<int>& labels);
/// Precision at every distinct threshold, weighted by the recall gained there.
double oracle_ap(const std::vector<double>& scores, const std::vector<int>& labels);
/// Best accuracy of "generated iff score < t" over every candidate t.
double oracle_best_accuracy(const std::vector<double>& scores, const std::vector<int>& labels);

}  // namespace wepe::fixtures
