#include "wepe/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "wepe/error.hpp"

namespace wepe {

ScoreRecord make_score_record(std::string image_id, double mean_similarity, int n_draws, std::string spec_hash) {
  ScoreRecord r;
  r.image_id = std::move(image_id);
  r.mean_similarity = std::clamp(mean_similarity, -1.0, 1.0);
  r.uncertainty = 2.0 - 2.0 * r.mean_similarity;
  r.n_draws = n_draws;
  r.spec_hash = std::move(spec_hash);
  return r;
}

WepeScorer::WepeScorer(ParamSnapshot model, PerturbationSpec spec, int workers)
    : model_(std::move(model)), spec_(std::move(spec)), workers_(workers) {
  spec_.validate(model_->block_count());
  if (spec_.family != NoiseFamily::mc_dropout) {
    perturbed_.reserve(static_cast<std::size_t>(spec_.n_draws));
    for (int k = 0; k < spec_.n_draws; ++k) perturbed_.push_back(perturb_model(model_, spec_, k).materialize());
  }
}

std::vector<FeatureVector> WepeScorer::clean_features(std::span<const PreprocessedImage> images) const {
  return extract_features(*model_, images, workers_);
}

std::vector<FeatureVector> WepeScorer::perturbed_features(std::span<const PreprocessedImage> images, int draw) const {
  if (draw < 0 || draw >= spec_.n_draws) throw ValidationError("draw index out of range");
  if (spec_.family == NoiseFamily::mc_dropout) {
    return mc_dropout_features(*model_, images, spec_.dropout_p, spec_.seed, spec_.block_indices, draw, workers_);
  }
  return extract_features(perturbed_[static_cast<std::size_t>(draw)], images, workers_);
}

std::vector<ScoreRecord> WepeScorer::score(std::span<const PreprocessedImage> images,
                                           std::span<const std::string> image_ids,
                                           std::span<const FeatureVector> clean) const {
  if (images.size() != image_ids.size() || images.size() != clean.size()) {
    throw ValidationError("images, ids and clean features must have equal length");
  }
  if (images.empty()) return {};
  std::vector<double> total(images.size(), 0.0);
  for (int k = 0; k < spec_.n_draws; ++k) {
    const auto feats = perturbed_features(images, k);
    for (std::size_t i = 0; i < images.size(); ++i) total[i] += feats[i].dot(clean[i]);
  }
  const std::string hash = spec_.hash();
  std::vector<ScoreRecord> out;
  out.reserve(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    out.push_back(make_score_record(image_ids[i], total[i] / spec_.n_draws, spec_.n_draws, hash));
  }
  return out;
}

std::vector<ScoreRecord> WepeScorer::score(std::span<const PreprocessedImage> images,
                                           std::span<const std::string> image_ids) const {
  if (images.empty()) return {};
  const auto clean = clean_features(images);
  return score(images, image_ids, clean);
}

std::vector<ScoreRecord> wepe_uncertainty(const ParamSnapshot& model, const PerturbationSpec& spec,
                                          std::span<const PreprocessedImage> images,
                                          std::span<const std::string> image_ids, int workers) {
  return WepeScorer(model, spec, workers).score(images, image_ids);
}

double mean_similarity(const FeatureVector& clean, std::span<const FeatureVector> perturbed) {
  if (perturbed.empty()) throw ValidationError("mean_similarity needs at least one perturbed feature");
  double s = 0.0;
  for (const auto& f : perturbed) s += f.dot(clean);
  return s / static_cast<double>(perturbed.size());
}

double ensemble_variance(std::span<const double> predictions) {
  if (predictions.empty()) throw ValidationError("ensemble_variance needs at least one prediction");
  const double n = static_cast<double>(predictions.size());
  double mean = 0.0;
  for (double y : predictions) mean += y;
  mean /= n;
  double ss = 0.0;
  for (double y : predictions) ss += (y - mean) * (y - mean);
  return ss / n;
}

namespace {

FeatureVector mean_feature(std::span<const FeatureVector> feats, Eigen::Index dim) {
  FeatureVector mean = FeatureVector::Zero(dim);
  for (const auto& f : feats) {
    if (f.size() != dim) throw ValidationError("feature dimension mismatch");
    mean += f;
  }
  return mean / static_cast<double>(feats.size());
}

}  // namespace

std::vector<BoundGap> bound_gap(std::span<const FeatureVector> perturbed, const FeatureVector& teacher) {
  if (perturbed.size() < 2) throw ValidationError("bound_gap needs at least two perturbed features");
  const FeatureVector mean = mean_feature(perturbed, teacher.size());
  const double tt = teacher.squaredNorm();
  std::vector<BoundGap> out;
  out.reserve(perturbed.size());
  for (const auto& f : perturbed) {
    const FeatureVector g = f - mean;
    const double gg = g.squaredNorm();
    const double gt = g.dot(teacher);
    BoundGap gap;
    // Below this relative size the slack is round-off of parallel vectors.
    const double roundoff = 64.0 * std::numeric_limits<double>::epsilon() * gg * tt;
    const double delta = gg * tt - gt * gt;
    if (delta > roundoff) {
      gap.delta = delta;
      const double cosine = std::clamp(gt / (std::sqrt(gg) * std::sqrt(tt)), -1.0, 1.0);
      const double s = std::sin(std::acos(cosine));
      gap.delta_sine = gg * tt * s * s;
    }
    out.push_back(gap);
  }
  return out;
}

double variance_upper_bound(std::span<const FeatureVector> perturbed, const FeatureVector& teacher) {
  if (perturbed.empty()) throw ValidationError("variance_upper_bound needs at least one feature");
  const FeatureVector mean = mean_feature(perturbed, teacher.size());
  double s = 0.0;
  for (const auto& f : perturbed) s += (f - mean).squaredNorm();
  return s / static_cast<double>(perturbed.size()) * teacher.squaredNorm();
}

Decision decide(const ScoreRecord& record, double threshold) {
  return record.mean_similarity < threshold ? Decision::generated : Decision::natural;
}

void write_score_cache(const std::filesystem::path& path, std::span<const ScoreRecord> records) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw RuntimeFailure("cannot write score cache: " + path.string());
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["image_id"] = r.image_id;
    j["mean_similarity"] = r.mean_similarity;
    j["uncertainty"] = r.uncertainty;
    out << j.dump() << '\n';
  }
}

std::vector<ScoreRecord> read_score_cache(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingFileError(path.string());
  std::vector<ScoreRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ScoreRecord r;
      r.image_id = j.at("image_id").get<std::string>();
      r.mean_similarity = j.at("mean_similarity").get<double>();
      r.uncertainty = j.at("uncertainty").get<double>();
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace wepe
