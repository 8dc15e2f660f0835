#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "wepe/backbone.hpp"
#include "wepe/perturbation.hpp"

namespace wepe {

/// Per-image detection score. mean_similarity is the decision score S(x);
/// uncertainty = 2 - 2 * mean_similarity.
struct ScoreRecord {
  std::string image_id;
  double mean_similarity = 1.0;
  double uncertainty = 0.0;
  int n_draws = 1;
  std::string spec_hash;

  friend bool operator==(const ScoreRecord&, const ScoreRecord&) = default;
};

/// Builds a record from a mean cosine similarity (clamped to [-1, 1]).
ScoreRecord make_score_record(std::string image_id, double mean_similarity, int n_draws, std::string spec_hash);

/// Feature sources for one scoring run: the clean model and the fixed
/// perturbed models (or dropout draws) shared by every image.
class WepeScorer {
 public:
  WepeScorer(ParamSnapshot model, PerturbationSpec spec, int workers = 1);

  const PerturbationSpec& spec() const { return spec_; }
  const Backbone& clean_model() const { return *model_; }

  std::vector<FeatureVector> clean_features(std::span<const PreprocessedImage> images) const;
  /// Features under draw k (0 <= k < n_draws).
  std::vector<FeatureVector> perturbed_features(std::span<const PreprocessedImage> images, int draw) const;

  /// Scores given precomputed clean features (e.g. from a cache).
  std::vector<ScoreRecord> score(std::span<const PreprocessedImage> images, std::span<const std::string> image_ids,
                                 std::span<const FeatureVector> clean) const;
  std::vector<ScoreRecord> score(std::span<const PreprocessedImage> images, std::span<const std::string> image_ids) const;

 private:
  ParamSnapshot model_;
  PerturbationSpec spec_;
  int workers_;
  std::vector<Backbone> perturbed_;
};

/// WePe scores: each image's mean clean-vs-perturbed cosine similarity over
/// n_draws perturbed models that are drawn once and shared across images.
std::vector<ScoreRecord> wepe_uncertainty(const ParamSnapshot& model, const PerturbationSpec& spec,
                                          std::span<const PreprocessedImage> images,
                                          std::span<const std::string> image_ids, int workers = 1);

/// Score from features: mean_k <perturbed_k, clean>.
double mean_similarity(const FeatureVector& clean, std::span<const FeatureVector> perturbed);

/// Population variance (1/n) * sum (y - mean)^2.
double ensemble_variance(std::span<const double> predictions);

struct BoundGap {
  double delta = 0.0;        // ||g||^2 ||t||^2 - (g . t)^2
  double delta_sine = 0.0;   // ||g||^2 ||t||^2 sin^2(angle(g, t))
};

/// Per-draw slack of the Cauchy-Schwarz step, where g_k is draw k's deviation
/// from the mean perturbed feature and t the teacher (or any surrogate) feature.
std::vector<BoundGap> bound_gap(std::span<const FeatureVector> perturbed, const FeatureVector& teacher);

/// Right-hand side of the variance bound: (1/n) sum_k ||f_k - mean f||^2 * ||t||^2.
double variance_upper_bound(std::span<const FeatureVector> perturbed, const FeatureVector& teacher);

enum class Decision { natural, generated };

/// generated iff mean_similarity < threshold; ties are natural.
Decision decide(const ScoreRecord& record, double threshold);

/// JSON-lines score cache: one {"image_id","mean_similarity","uncertainty"} per line.
void write_score_cache(const std::filesystem::path& path, std::span<const ScoreRecord> records);
std::vector<ScoreRecord> read_score_cache(const std::filesystem::path& path);

}  // namespace wepe
