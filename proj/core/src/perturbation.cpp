#include "wepe/perturbation.hpp"

#include <cmath>
#include <random>

#include <json.hpp>

#include "parallel.hpp"
#include "wepe/error.hpp"
#include "wepe/rng.hpp"
#include "wepe/vit.hpp"

namespace wepe {

std::string_view to_string(NoiseFamily family) {
  switch (family) {
    case NoiseFamily::gaussian: return "gaussian";
    case NoiseFamily::uniform: return "uniform";
    case NoiseFamily::laplace: return "laplace";
    case NoiseFamily::mc_dropout: return "mc_dropout";
  }
  return "gaussian";
}

NoiseFamily parse_noise_family(std::string_view text) {
  if (text == "gaussian") return NoiseFamily::gaussian;
  if (text == "uniform") return NoiseFamily::uniform;
  if (text == "laplace") return NoiseFamily::laplace;
  if (text == "mc_dropout" || text == "mc-dropout") return NoiseFamily::mc_dropout;
  throw ValidationError("unknown noise family '" + std::string(text) + "'");
}

void PerturbationSpec::validate(std::size_t block_count) const {
  if (!(ratio > 0.0) || !std::isfinite(ratio)) throw ValidationError("perturbation ratio must be > 0");
  if (n_draws < 1) throw ValidationError("n_draws must be >= 1");
  if (!(dropout_p > 0.0 && dropout_p < 1.0)) throw ValidationError("dropout_p must lie in (0, 1)");
  if (block_indices.empty()) throw ValidationError("perturbation needs at least one target block");
  for (std::size_t b : block_indices) {
    if (b >= block_count) {
      throw ValidationError("block index " + std::to_string(b) + " out of range (model has " +
                            std::to_string(block_count) + " blocks)");
    }
  }
}

std::string PerturbationSpec::to_json() const {
  nlohmann::ordered_json j;
  j["family"] = std::string(to_string(family));
  j["ratio"] = ratio;
  j["blocks"] = std::vector<std::size_t>(block_indices.begin(), block_indices.end());
  j["n_draws"] = n_draws;
  j["seed"] = seed;
  j["dropout_p"] = dropout_p;
  return j.dump();
}

PerturbationSpec PerturbationSpec::from_json(std::string_view text) {
  PerturbationSpec spec;
  try {
    const auto j = nlohmann::json::parse(text);
    spec.family = parse_noise_family(j.value("family", std::string("gaussian")));
    spec.ratio = j.value("ratio", 0.1);
    for (std::size_t b : j.at("blocks").get<std::vector<std::size_t>>()) spec.block_indices.insert(b);
    spec.n_draws = j.value("n_draws", 1);
    spec.seed = j.value("seed", std::uint64_t{0});
    spec.dropout_p = j.value("dropout_p", 0.1);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("invalid perturbation spec JSON: ") + e.what());
  }
  return spec;
}

std::string PerturbationSpec::hash() const { return hex64(fnv1a64(to_json())); }

std::set<std::size_t> parse_block_selection(std::string_view text, std::size_t block_count) {
  auto to_index = [&](std::string_view s) -> std::size_t {
    if (s.empty() || s.find_first_not_of("0123456789") != std::string_view::npos) {
      throw ValidationError("invalid block selection '" + std::string(text) + "'");
    }
    const std::size_t v = std::stoul(std::string(s));
    if (v >= block_count) {
      throw ValidationError("block index " + std::to_string(v) + " out of range (model has " +
                            std::to_string(block_count) + " blocks)");
    }
    return v;
  };

  std::set<std::size_t> out;
  if (text.starts_with("first:")) {
    const std::string_view k = text.substr(6);
    if (k.empty() || k.find_first_not_of("0123456789") != std::string_view::npos) {
      throw ValidationError("invalid block selection '" + std::string(text) + "'");
    }
    const std::size_t count = std::stoul(std::string(k));
    if (count == 0 || count > block_count) throw ValidationError("first:K needs 1 <= K <= " + std::to_string(block_count));
    for (std::size_t i = 0; i < count; ++i) out.insert(i);
    return out;
  }
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t comma = text.find(',', start);
    const std::string_view item = text.substr(start, comma == std::string_view::npos ? text.size() - start : comma - start);
    if (const auto dash = item.find('-'); dash != std::string_view::npos) {
      const std::size_t lo = to_index(item.substr(0, dash));
      const std::size_t hi = to_index(item.substr(dash + 1));
      if (hi < lo) throw ValidationError("descending block range '" + std::string(item) + "'");
      for (std::size_t i = lo; i <= hi; ++i) out.insert(i);
    } else {
      out.insert(to_index(item));
    }
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

std::set<std::size_t> default_blocks(std::size_t block_count) {
  const std::size_t k = block_count == 24 ? 19 : static_cast<std::size_t>(std::ceil(0.8 * static_cast<double>(block_count)));
  std::set<std::size_t> out;
  for (std::size_t i = 0; i < std::max<std::size_t>(k, 1); ++i) out.insert(i);
  return out;
}

double per_block_noise_std(const ParameterBlock& block, double ratio) {
  if (block.parameter_count() == 0) throw ValidationError("block " + std::to_string(block.index) + " has no parameters");
  return ratio * block.mean_abs_param;
}

void fill_noise(NoiseFamily family, double stddev, std::uint64_t stream, std::span<double> out) {
  Engine eng(stream);
  switch (family) {
    case NoiseFamily::gaussian: {
      std::normal_distribution<double> d(0.0, 1.0);
      for (double& v : out) v = stddev * d(eng);
      break;
    }
    case NoiseFamily::uniform: {
      const double half = std::sqrt(3.0);
      std::uniform_real_distribution<double> d(-half, half);
      for (double& v : out) v = stddev * d(eng);
      break;
    }
    case NoiseFamily::laplace: {
      // Inverse CDF with unit variance: scale 1/sqrt(2).
      const double b = 1.0 / std::sqrt(2.0);
      std::uniform_real_distribution<double> d(-0.5, 0.5);
      for (double& v : out) {
        double u = d(eng);
        while (std::abs(u) >= 0.5) u = d(eng);
        v = -stddev * b * std::copysign(1.0, u) * std::log1p(-2.0 * std::abs(u));
      }
      break;
    }
    case NoiseFamily::mc_dropout:
      throw ValidationError("mc_dropout is not a weight-noise family");
  }
}

Backbone PerturbedSnapshot::materialize() const {
  Backbone model = *base;
  for (const auto& [_, tensors] : deltas)
    for (const auto& [name, delta] : tensors) model.add_to_param(name, delta.values);
  return model;
}

PerturbedSnapshot perturb_model(const ParamSnapshot& snapshot, const PerturbationSpec& spec, int draw_index) {
  if (spec.family == NoiseFamily::mc_dropout) {
    throw ValidationError("mc_dropout perturbs activations, not weights; use mc_dropout_features");
  }
  spec.validate(snapshot->block_count());
  if (draw_index < 0 || draw_index >= spec.n_draws) {
    throw ValidationError("draw_index " + std::to_string(draw_index) + " outside [0, " + std::to_string(spec.n_draws) + ")");
  }

  PerturbedSnapshot out;
  out.base = snapshot;
  out.draw_index = draw_index;
  for (std::size_t b : spec.block_indices) {
    const ParameterBlock& block = snapshot->block(b);
    const double stddev = per_block_noise_std(block, spec.ratio);
    TensorMap& deltas = out.deltas[b];
    for (const auto& [name, t] : block.tensors) {
      Tensor delta(t.shape);
      const std::uint64_t stream = stream_seed({spec.seed, static_cast<std::uint64_t>(draw_index), b, fnv1a64(name)});
      fill_noise(spec.family, stddev, stream, std::span(delta.data(), static_cast<std::size_t>(delta.numel())));
      deltas.emplace(name, std::move(delta));
    }
  }
  return out;
}

std::map<std::size_t, RowMatrix> dropout_masks(const ArchSpec& arch, const std::set<std::size_t>& blocks, double p,
                                               std::uint64_t seed, int draw_index) {
  if (!(p > 0.0 && p < 1.0)) throw ValidationError("dropout p must lie in (0, 1)");
  std::map<std::size_t, RowMatrix> masks;
  const double keep_scale = 1.0 / (1.0 - p);
  for (std::size_t b : blocks) {
    if (b >= static_cast<std::size_t>(arch.depth)) throw ValidationError("dropout block index out of range");
    Engine eng = make_engine({seed, static_cast<std::uint64_t>(draw_index), b, 0x6d61736bULL});
    std::bernoulli_distribution drop(p);
    RowMatrix m(arch.tokens(), arch.mlp_hidden);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = drop(eng) ? 0.0 : keep_scale;
    masks.emplace(b, std::move(m));
  }
  return masks;
}

std::vector<FeatureVector> mc_dropout_features(const Backbone& model, std::span<const PreprocessedImage> images,
                                               double p, std::uint64_t seed, std::set<std::size_t> blocks,
                                               int draw_index, int workers) {
  if (images.empty()) throw ValidationError("mc_dropout_features needs a nonempty batch");
  if (blocks.empty())
    for (std::size_t b = 0; b < model.block_count(); ++b) blocks.insert(b);
  const auto masks = dropout_masks(model.arch(), blocks, p, seed, draw_index);
  GraphOptions options;
  options.mlp_masks = &masks;
  std::vector<FeatureVector> out(images.size());
  detail::parallel_for(images.size(), workers, [&](std::size_t i) {
    ag::Var f = vit_forward(model, images[i], options);
    out[i] = f->val().row(0).transpose();
    out[i] /= out[i].norm();
  });
  return out;
}

}  // namespace wepe
