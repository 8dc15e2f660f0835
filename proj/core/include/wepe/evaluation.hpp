#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "wepe/backbone.hpp"
#include "wepe/data.hpp"
#include "wepe/perturbation.hpp"
#include "wepe/scoring.hpp"
#include "wepe/transforms.hpp"

namespace wepe {

// Metrics take detector scores (higher = more natural) and labels with
// 1 = natural (positive class) and 0 = generated. Both classes must be present.

/// Mann-Whitney AUROC: P(s_natural > s_generated) + 0.5 P(tie).
double compute_auroc(std::span<const double> scores, std::span<const int> labels);

/// Average precision with natural as the positive class:
/// sum over descending distinct thresholds of (R_i - R_{i-1}) * P_i.
double compute_ap(std::span<const double> scores, std::span<const int> labels);

struct ThresholdAccuracy {
  double accuracy = 0.0;
  double threshold = 0.0;  // may be +-infinity
};

/// Best accuracy of "generated iff score < threshold" over thresholds at
/// midpoints between adjacent distinct scores plus +-infinity; ties on
/// accuracy resolve to the smallest threshold.
ThresholdAccuracy best_threshold_accuracy(std::span<const double> scores, std::span<const int> labels);

/// Accuracy of the decision rule at a fixed threshold.
double accuracy_at(std::span<const double> scores, std::span<const int> labels, double threshold);

struct FidResult {
  double value = 0.0;
  std::size_t n_a = 0;
  std::size_t n_b = 0;
  std::size_t feature_dim = 0;
};

/// Frechet distance between Gaussian fits of two feature sets:
/// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a^{1/2} S_b S_a^{1/2})^{1/2}).
/// Each set needs at least 2 finite samples; singular covariances are fine.
FidResult compute_fid(std::span<const FeatureVector> a, std::span<const FeatureVector> b);

/// Symmetric PSD square root by eigendecomposition, clamping negative eigenvalues to 0.
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m);

struct MetricSet {
  double auroc = 0.0;
  double ap = 0.0;
  double acc = 0.0;
  double threshold = 0.0;
};

/// Metrics for one scored set: overall and per generator (each generator's
/// images against all natural images, accuracy at the shared overall threshold).
struct SeedResult {
  std::uint64_t seed = 0;
  MetricSet overall;
  std::map<std::string, MetricSet> per_generator;
};

SeedResult evaluate_scores(std::span<const double> scores, std::span<const int> labels,
                           std::span<const std::string> generators, std::uint64_t seed = 0);

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // population std over seeds
};

struct ScoredImage {
  std::string image_id;
  int label = 0;
  std::string generator;
  double mean_similarity = 0.0;
};

struct EvalReport {
  int schema = 1;
  std::string spec_json;  // spec with the first seed
  std::string spec_hash;
  std::string arch_id;
  std::string manifest_name;
  std::optional<std::string> degradation;
  std::vector<std::uint64_t> seeds;
  std::vector<SeedResult> per_seed;
  std::map<std::string, Summary> overall;  // auroc, ap, acc, threshold
  std::map<std::string, std::map<std::string, Summary>> per_generator;
  std::vector<std::pair<std::string, std::string>> errors;
  std::size_t n_images = 0;
  std::string started_at;
  std::string finished_at;
  std::vector<ScoredImage> first_seed_scores;  // for plots; not serialised
};

struct BenchmarkOptions {
  int workers = 1;
  std::optional<DegradationSpec> degradation;
  std::uint64_t degradation_seed = 0;
  std::optional<std::filesystem::path> feature_cache_dir;
  std::optional<std::filesystem::path> score_cache_dir;
  bool timestamps = true;
};

/// Applies a degradation to every eligible image of a loaded dataset and
/// re-standardises; natural images stay byte-identical for generated-only kinds.
LoadedDataset degrade_dataset(const LoadedDataset& data, const DegradationSpec& spec, const ArchSpec& arch,
                              std::uint64_t seed);

/// Scores every image under each seed's perturbation and aggregates metrics.
EvalReport run_benchmark(const LoadedDataset& data, const Backbone& model, const PerturbationSpec& spec,
                         std::span<const std::uint64_t> seeds, const BenchmarkOptions& options = {},
                         std::string manifest_name = {});

EvalReport run_benchmark(const DatasetManifest& manifest, const Backbone& model, const PerturbationSpec& spec,
                         std::span<const std::uint64_t> seeds, const BenchmarkOptions& options = {});

enum class ReportFormat { json, csv };

/// Report JSON (schema 1):
/// {"schema","spec","seeds","per_seed","overall","per_generator","errors",...}.
std::string report_to_json(const EvalReport& report);
EvalReport report_from_json(std::string_view text);
/// Columns generator,seed,auroc,ap,acc,threshold; one row per (generator, seed),
/// with generator "all" for the overall metrics.
std::string report_to_csv(const EvalReport& report);

/// Writes report.json or report.csv into `out_dir`; with `plots`, also one
/// score histogram PNG per generator. Returns the written paths.
std::vector<std::filesystem::path> emit_report(const EvalReport& report, const std::filesystem::path& out_dir,
                                               ReportFormat format, bool plots);

/// Bar/line chart helpers rendered to PNG.
void plot_histograms(const std::filesystem::path& path, std::span<const double> natural,
                     std::span<const double> generated, const std::string& title);
void plot_curve(const std::filesystem::path& path, std::span<const double> xs, std::span<const double> ys,
                const std::string& title);
void plot_bars(const std::filesystem::path& path, std::span<const double> values, const std::string& title);

}  // namespace wepe
