#include "wepe/probe.hpp"

#include <algorithm>
#include <numeric>

#include <json.hpp>

#include "wepe/error.hpp"
#include "wepe/evaluation.hpp"
#include "wepe/scoring.hpp"

namespace wepe {

std::string_view to_string(ProbeMethod method) {
  return method == ProbeMethod::natural_topk ? "natural_topk" : "supervised_prefix";
}

std::map<std::size_t, int> rank_blocks(const std::map<std::size_t, double>& similarity) {
  std::vector<std::pair<std::size_t, double>> order(similarity.begin(), similarity.end());
  // Map iteration is already ascending by index, so a stable sort keeps the tie-break.
  std::stable_sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::map<std::size_t, int> ranks;
  for (std::size_t i = 0; i < order.size(); ++i) ranks[order[i].first] = static_cast<int>(i + 1);
  return ranks;
}

ProbeReport make_probe_report(std::map<std::size_t, double> similarity) {
  ProbeReport report;
  report.ranks = rank_blocks(similarity);
  report.per_block_similarity = std::move(similarity);
  return report;
}

ProbeReport probe_blocks_natural(const ParamSnapshot& model, std::span<const PreprocessedImage> natural_images,
                                 double ratio, std::uint64_t seed, int workers) {
  if (natural_images.empty()) throw ValidationError("probe needs at least one natural image");
  const auto clean = extract_features(*model, natural_images, workers);
  std::map<std::size_t, double> similarity;
  for (std::size_t b = 0; b < model->block_count(); ++b) {
    PerturbationSpec spec;
    spec.ratio = ratio;
    spec.seed = seed;
    spec.block_indices = {b};
    spec.validate(model->block_count());
    const Backbone perturbed = perturb_model(model, spec, 0).materialize();
    const auto feats = extract_features(perturbed, natural_images, workers);
    double total = 0.0;
    for (std::size_t i = 0; i < feats.size(); ++i) total += std::clamp(clean[i].dot(feats[i]), -1.0, 1.0);
    similarity[b] = 100.0 * total / static_cast<double>(feats.size());
  }
  return make_probe_report(std::move(similarity));
}

std::set<std::size_t> select_blocks_topk(const ProbeReport& report, std::size_t k) {
  if (k < 1 || k > report.ranks.size())
    throw ValidationError("top-k must lie in [1, " + std::to_string(report.ranks.size()) + "], got " +
                          std::to_string(k));
  std::set<std::size_t> chosen;
  for (const auto& [block, rank] : report.ranks)
    if (static_cast<std::size_t>(rank) <= k) chosen.insert(block);
  return chosen;
}

PrefixSweep sweep_prefix_supervised(const ParamSnapshot& model, const LoadedDataset& validation, double ratio,
                                    std::uint64_t seed, std::span<const std::size_t> k_range, int workers) {
  const bool has_natural = std::ranges::count(validation.labels, kNatural) > 0;
  const bool has_generated = std::ranges::count(validation.labels, kGenerated) > 0;
  if (!has_natural || !has_generated) throw ValidationError("prefix sweep needs both natural and generated images");
  if (k_range.empty()) throw ValidationError("prefix sweep needs at least one k");

  const auto clean = extract_features(*model, validation.inputs, workers);

  PrefixSweep sweep;
  double best = -1.0;
  for (std::size_t k : k_range) {
    if (k < 1 || k > model->block_count()) throw ValidationError("prefix length out of range: " + std::to_string(k));
    PerturbationSpec spec;
    spec.ratio = ratio;
    spec.seed = seed;
    for (std::size_t b = 0; b < k; ++b) spec.block_indices.insert(b);
    WepeScorer scorer(model, spec, workers);
    const auto records = scorer.score(validation.inputs, validation.ids, clean);
    std::vector<double> scores;
    for (const auto& r : records) scores.push_back(r.mean_similarity);
    const double auroc = compute_auroc(scores, validation.labels);
    sweep.curve.emplace_back(k, auroc);
    if (auroc > best || (auroc == best && k < sweep.best_k)) {
      best = auroc;
      sweep.best_k = k;
    }
  }
  return sweep;
}

std::string ProbeReport::to_json() const {
  nlohmann::ordered_json j;
  j["method"] = std::string(to_string(method));
  nlohmann::ordered_json sims = nlohmann::ordered_json::object();
  nlohmann::ordered_json rk = nlohmann::ordered_json::object();
  for (const auto& [b, s] : per_block_similarity) sims[std::to_string(b)] = s;
  for (const auto& [b, r] : ranks) rk[std::to_string(b)] = r;
  j["per_block_similarity"] = sims;
  j["ranks"] = rk;
  j["selected_blocks"] = std::vector<std::size_t>(selected_blocks.begin(), selected_blocks.end());
  return j.dump(2);
}

ProbeReport ProbeReport::from_json(std::string_view text) {
  ProbeReport r;
  try {
    const auto j = nlohmann::json::parse(text);
    const auto m = j.at("method").get<std::string>();
    if (m == "natural_topk") {
      r.method = ProbeMethod::natural_topk;
    } else if (m == "supervised_prefix") {
      r.method = ProbeMethod::supervised_prefix;
    } else {
      throw ValidationError("unknown probe method: " + m);
    }
    for (auto it = j.at("per_block_similarity").begin(); it != j.at("per_block_similarity").end(); ++it)
      r.per_block_similarity[std::stoul(it.key())] = it->get<double>();
    for (auto it = j.at("ranks").begin(); it != j.at("ranks").end(); ++it) r.ranks[std::stoul(it.key())] = it->get<int>();
    for (const auto& b : j.at("selected_blocks")) r.selected_blocks.insert(b.get<std::size_t>());
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("invalid probe report: ") + e.what());
  }
  return r;
}

}  // namespace wepe
