#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "wepe/backbone.hpp"
#include "wepe/data.hpp"
#include "wepe/perturbation.hpp"

namespace wepe {

enum class ProbeMethod { natural_topk, supervised_prefix };

std::string_view to_string(ProbeMethod method);

struct ProbeReport {
  std::map<std::size_t, double> per_block_similarity;  // mean cosine x 100
  std::map<std::size_t, int> ranks;                    // 1 = most stable
  std::set<std::size_t> selected_blocks;
  ProbeMethod method = ProbeMethod::natural_topk;

  std::string to_json() const;
  static ProbeReport from_json(std::string_view text);
};

/// Ranks 1..B by descending similarity; equal values rank the lower index first.
std::map<std::size_t, int> rank_blocks(const std::map<std::size_t, double>& similarity);

/// Report from externally measured per-block similarities (no selection).
ProbeReport make_probe_report(std::map<std::size_t, double> similarity);

/// Perturbs each block on its own (same std rule as scoring) and records the
/// mean clean-vs-perturbed similarity over natural images only.
ProbeReport probe_blocks_natural(const ParamSnapshot& model, std::span<const PreprocessedImage> natural_images,
                                 double ratio, std::uint64_t seed, int workers = 1);

/// The k blocks ranked 1..k. Throws ValidationError unless 1 <= k <= B.
std::set<std::size_t> select_blocks_topk(const ProbeReport& report, std::size_t k);

struct PrefixSweep {
  std::size_t best_k = 0;
  std::vector<std::pair<std::size_t, double>> curve;  // (k, AUROC) in k order
};

/// Scores a labelled validation set with blocks {0..k-1} perturbed for each k
/// and returns the AUROC curve; the best k is the smallest argmax.
PrefixSweep sweep_prefix_supervised(const ParamSnapshot& model, const LoadedDataset& validation, double ratio,
                                    std::uint64_t seed, std::span<const std::size_t> k_range, int workers = 1);

}  // namespace wepe
