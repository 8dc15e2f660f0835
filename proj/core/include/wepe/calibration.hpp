#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "wepe/backbone.hpp"
#include "wepe/data.hpp"
#include "wepe/perturbation.hpp"

namespace wepe {

/// Which way the similarity gap is pushed. `widen` minimises
/// mean(sim_generated) - mean(sim_natural); `literal` minimises its negation.
enum class GapDirection { widen, literal };

struct AdapterConfig {
  int rank = 8;
  double alpha = 8.0;
  std::vector<std::string> targets = {"attn.q", "attn.v"};
  double learning_rate = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double weight_decay = 0.01;
  double adam_eps = 1e-8;
  int epochs = 2;
  int batch_size = 8;  // half natural, half generated

  // Perturbation used to build the frozen target each step.
  NoiseFamily family = NoiseFamily::gaussian;
  double ratio = 0.1;
  std::set<std::size_t> blocks;  // empty: default_blocks(B)

  bool augment = true;
  double augment_prob = 0.5;
  int jpeg_quality_min = 30;
  int jpeg_quality_max = 100;
  double blur_sigma_max = 3.0;

  GapDirection direction = GapDirection::widen;

  void validate() const;
  std::string to_json() const;
  static AdapterConfig from_json(std::string_view text);
  std::string hash() const;
};

/// Low-rank factors for one projection weight W [out, in]: W + scale * B * A.
struct Adapter {
  RowMatrix a;  // [rank, in]
  RowMatrix b;  // [out, rank]
};

struct AdapterSet {
  double scale = 1.0;  // alpha / rank
  std::map<std::string, Adapter> by_weight;  // keyed by the full weight name

  std::int64_t parameter_count() const;
};

/// Fresh adapters on every block's target projections: A ~ N(0, 1/in), B = 0.
/// Throws ValidationError if a target tensor does not exist.
AdapterSet attach_adapters(const Backbone& model, const AdapterConfig& config, std::uint64_t seed);

/// Copy of `base` with every adapted weight replaced by W + scale * B * A.
/// The base itself is never modified, so dropping the adapters is exact.
Backbone merge_adapters(const Backbone& base, const AdapterSet& adapters);

/// mean(sim_generated) - mean(sim_natural). Throws on an empty batch.
double calibration_gap_loss(std::span<const double> sim_natural, std::span<const double> sim_generated);

struct CalibrationCheckpoint {
  AdapterConfig config;
  AdapterSet adapters;
  std::uint64_t seed = 0;
  std::string arch_id;
  std::string base_fingerprint;
  std::vector<double> loss_curve;  // one value per optimisation step

  void save(const std::filesystem::path& path) const;
  static CalibrationCheckpoint load(const std::filesystem::path& path);
};

/// Trains adapters on a labelled set. Each step resamples the perturbation,
/// compares the adapted features against the perturbed adapted model's
/// features (held fixed) and takes one AdamW step on the adapters only.
/// `max_steps` < 0 means no limit beyond the epoch count.
CalibrationCheckpoint train_calibration(const ParamSnapshot& model, const LoadedDataset& train,
                                        const AdapterConfig& config, std::uint64_t seed, int max_steps = -1);

}  // namespace wepe
