#include "wepe/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <limits>
#include <numeric>

#include <Eigen/Eigenvalues>

#include "wepe/error.hpp"
#include "wepe/rng.hpp"

namespace wepe {
namespace {

struct ClassCounts {
  std::size_t positives = 0;
  std::size_t negatives = 0;
};

ClassCounts check_inputs(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ValidationError("scores and labels differ in length");
  ClassCounts c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1) {
      ++c.positives;
    } else if (labels[i] == 0) {
      ++c.negatives;
    } else {
      throw ValidationError("labels must be 0 or 1");
    }
    if (std::isnan(scores[i])) throw ValidationError("scores must not be NaN");
  }
  if (c.positives == 0 || c.negatives == 0) throw ValidationError("metrics need both natural and generated samples");
  return c;
}

std::vector<std::size_t> argsort(std::span<const double> scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  return idx;
}

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

double compute_auroc(std::span<const double> scores, std::span<const int> labels) {
  const ClassCounts c = check_inputs(scores, labels);
  const auto idx = argsort(scores);
  // Rank sum of positives with mid-ranks for ties.
  double rank_sum = 0.0;
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j + 1 < idx.size() && scores[idx[j + 1]] == scores[idx[i]]) ++j;
    const double mid_rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k)
      if (labels[idx[k]] == 1) rank_sum += mid_rank;
    i = j + 1;
  }
  const double n1 = static_cast<double>(c.positives);
  const double n0 = static_cast<double>(c.negatives);
  return (rank_sum - n1 * (n1 + 1.0) / 2.0) / (n1 * n0);
}

double compute_ap(std::span<const double> scores, std::span<const int> labels) {
  const ClassCounts c = check_inputs(scores, labels);
  auto idx = argsort(scores);
  std::reverse(idx.begin(), idx.end());
  double ap = 0.0;
  double prev_recall = 0.0;
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      (labels[idx[j]] == 1 ? tp : fp) += 1;
      ++j;
    }
    const double recall = static_cast<double>(tp) / static_cast<double>(c.positives);
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return ap;
}

double accuracy_at(std::span<const double> scores, std::span<const int> labels, double threshold) {
  if (scores.size() != labels.size() || scores.empty()) throw ValidationError("accuracy_at: bad input sizes");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const int predicted = scores[i] < threshold ? 0 : 1;
    correct += predicted == labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(scores.size());
}

ThresholdAccuracy best_threshold_accuracy(std::span<const double> scores, std::span<const int> labels) {
  const ClassCounts c = check_inputs(scores, labels);
  const auto idx = argsort(scores);
  const double n = static_cast<double>(scores.size());

  // Threshold -inf: everything is called natural.
  std::size_t correct = c.positives;
  ThresholdAccuracy best{static_cast<double>(correct) / n, -std::numeric_limits<double>::infinity()};
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      // Moving the threshold above this value flips these samples to "generated".
      if (labels[idx[j]] == 0) {
        ++correct;
      } else {
        --correct;
      }
      ++j;
    }
    const double threshold = j < idx.size() ? 0.5 * (scores[idx[i]] + scores[idx[j]])
                                            : std::numeric_limits<double>::infinity();
    const double acc = static_cast<double>(correct) / n;
    if (acc > best.accuracy) best = {acc, threshold};
    i = j;
  }
  return best;
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (m + m.transpose()));
  if (eig.info() != Eigen::Success) throw RuntimeFailure("eigendecomposition failed");
  const Eigen::VectorXd roots = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * roots.asDiagonal() * eig.eigenvectors().transpose();
}

namespace {

void moments(std::span<const FeatureVector> xs, Eigen::VectorXd& mean, Eigen::MatrixXd& cov) {
  const Eigen::Index d = xs.front().size();
  mean = Eigen::VectorXd::Zero(d);
  for (const auto& x : xs) {
    if (x.size() != d) throw ValidationError("compute_fid: feature dimension mismatch");
    if (!x.allFinite()) throw ValidationError("compute_fid: non-finite feature");
    mean += x;
  }
  mean /= static_cast<double>(xs.size());
  cov = Eigen::MatrixXd::Zero(d, d);
  for (const auto& x : xs) {
    const Eigen::VectorXd c = x - mean;
    cov.selfadjointView<Eigen::Lower>().rankUpdate(c);
  }
  cov = cov.selfadjointView<Eigen::Lower>();
  cov /= static_cast<double>(xs.size() - 1);
}

}  // namespace

FidResult compute_fid(std::span<const FeatureVector> a, std::span<const FeatureVector> b) {
  if (a.empty() || b.empty()) throw ValidationError("compute_fid: empty feature set");
  const std::size_t d = static_cast<std::size_t>(a.front().size());
  if (a.size() < 2 || b.size() < 2) throw ValidationError("compute_fid: each set needs at least 2 samples");
  Eigen::VectorXd mu_a, mu_b;
  Eigen::MatrixXd cov_a, cov_b;
  moments(a, mu_a, cov_a);
  moments(b, mu_b, cov_b);
  if (mu_b.size() != mu_a.size()) throw ValidationError("compute_fid: feature dimension mismatch");

  const Eigen::MatrixXd root_a = psd_sqrt(cov_a);
  const Eigen::MatrixXd cross = psd_sqrt(root_a * cov_b * root_a);
  const double value = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * cross.trace();
  return {std::max(0.0, value), a.size(), b.size(), d};
}

SeedResult evaluate_scores(std::span<const double> scores, std::span<const int> labels,
                           std::span<const std::string> generators, std::uint64_t seed) {
  SeedResult r;
  r.seed = seed;
  const auto best = best_threshold_accuracy(scores, labels);
  r.overall = {compute_auroc(scores, labels), compute_ap(scores, labels), best.accuracy, best.threshold};

  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == 0) groups[generators.empty() ? "unknown" : generators[i]].push_back(i);
  for (const auto& [gen, members] : groups) {
    std::vector<double> s;
    std::vector<int> l;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == 1) {
        s.push_back(scores[i]);
        l.push_back(1);
      }
    }
    for (std::size_t i : members) {
      s.push_back(scores[i]);
      l.push_back(0);
    }
    r.per_generator[gen] = {compute_auroc(s, l), compute_ap(s, l), accuracy_at(s, l, best.threshold), best.threshold};
  }
  return r;
}

LoadedDataset degrade_dataset(const LoadedDataset& data, const DegradationSpec& spec, const ArchSpec& arch,
                              std::uint64_t seed) {
  LoadedDataset out = data;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!spec.applies_to(data.labels[i])) continue;
    out.pixels[i] = apply_degradation(data.pixels[i], spec, stream_seed({seed, i}));
    out.inputs[i] = standardize(out.pixels[i], arch, data.ids[i]);
  }
  return out;
}

namespace {

Summary summarize(const std::vector<double>& xs) {
  Summary s;
  std::vector<double> finite;
  for (double x : xs)
    if (std::isfinite(x)) finite.push_back(x);
  if (finite.empty()) {
    s.mean = xs.empty() ? 0.0 : xs.front();
    return s;
  }
  for (double x : finite) s.mean += x;
  s.mean /= static_cast<double>(finite.size());
  for (double x : finite) s.std += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(s.std / static_cast<double>(finite.size()));
  return s;
}

}  // namespace

EvalReport run_benchmark(const LoadedDataset& loaded, const Backbone& model, const PerturbationSpec& spec,
                         std::span<const std::uint64_t> seeds, const BenchmarkOptions& options,
                         std::string manifest_name) {
  if (seeds.empty()) throw ValidationError("run_benchmark needs at least one seed");
  EvalReport report;
  if (options.timestamps) report.started_at = utc_now();
  report.arch_id = model.arch_id();
  report.manifest_name = std::move(manifest_name);
  report.seeds.assign(seeds.begin(), seeds.end());
  report.errors = loaded.errors;

  const LoadedDataset data = options.degradation
                                 ? degrade_dataset(loaded, *options.degradation, model.arch(), options.degradation_seed)
                                 : loaded;
  if (options.degradation) report.degradation = options.degradation->to_string();
  report.n_images = data.size();
  {
    int nat = 0, gen = 0;
    for (int l : data.labels) (l == 1 ? nat : gen)++;
    if (nat == 0 || gen == 0) throw ValidationError("benchmark needs readable natural and generated images");
  }

  const ParamSnapshot snapshot = snapshot_params(model);
  std::optional<FeatureCache> cache;
  if (options.feature_cache_dir) cache.emplace(*options.feature_cache_dir, model);
  const auto clean = cached_features(model, data.inputs, cache ? &*cache : nullptr, options.workers);

  std::map<std::string, std::vector<double>> overall_values;
  std::map<std::string, std::map<std::string, std::vector<double>>> generator_values;
  for (std::size_t s = 0; s < seeds.size(); ++s) {
    PerturbationSpec seeded = spec;
    seeded.seed = seeds[s];
    if (s == 0) {
      report.spec_json = seeded.to_json();
      report.spec_hash = seeded.hash();
    }
    const WepeScorer scorer(snapshot, seeded, options.workers);
    const auto records = scorer.score(data.inputs, data.ids, clean);
    if (options.score_cache_dir) {
      write_score_cache(*options.score_cache_dir / (report.manifest_name.empty() ? "scores" : report.manifest_name) /
                            (seeded.hash() + ".jsonl"),
                        records);
    }
    std::vector<double> scores;
    scores.reserve(records.size());
    for (const auto& r : records) scores.push_back(r.mean_similarity);
    if (s == 0) {
      for (std::size_t i = 0; i < records.size(); ++i)
        report.first_seed_scores.push_back({data.ids[i], data.labels[i], data.generators[i], scores[i]});
    }

    SeedResult result = evaluate_scores(scores, data.labels, data.generators, seeds[s]);
    overall_values["auroc"].push_back(result.overall.auroc);
    overall_values["ap"].push_back(result.overall.ap);
    overall_values["acc"].push_back(result.overall.acc);
    overall_values["threshold"].push_back(result.overall.threshold);
    for (const auto& [gen, m] : result.per_generator) {
      generator_values[gen]["auroc"].push_back(m.auroc);
      generator_values[gen]["ap"].push_back(m.ap);
      generator_values[gen]["acc"].push_back(m.acc);
    }
    report.per_seed.push_back(std::move(result));
  }
  for (const auto& [k, v] : overall_values) report.overall[k] = summarize(v);
  for (const auto& [gen, metrics] : generator_values)
    for (const auto& [k, v] : metrics) report.per_generator[gen][k] = summarize(v);
  if (options.timestamps) report.finished_at = utc_now();
  return report;
}

EvalReport run_benchmark(const DatasetManifest& manifest, const Backbone& model, const PerturbationSpec& spec,
                         std::span<const std::uint64_t> seeds, const BenchmarkOptions& options) {
  if (manifest.entries.empty()) throw ValidationError("manifest is empty");
  if (!manifest.has_both_labels()) throw ValidationError("benchmark manifest needs both labels");
  return run_benchmark(load_dataset(manifest, model.arch()), model, spec, seeds, options, manifest.name);
}

}  // namespace wepe
