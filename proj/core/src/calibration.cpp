#include "wepe/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "wepe/archive.hpp"
#include "wepe/autograd.hpp"
#include "wepe/error.hpp"
#include "wepe/rng.hpp"
#include "wepe/transforms.hpp"
#include "wepe/vit.hpp"

namespace wepe {

void AdapterConfig::validate() const {
  if (rank < 1) throw ValidationError("adapter rank must be >= 1");
  if (!(alpha > 0)) throw ValidationError("adapter alpha must be positive");
  if (targets.empty()) throw ValidationError("adapter targets must not be empty");
  if (!(learning_rate > 0)) throw ValidationError("learning rate must be positive");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ValidationError("betas must lie in [0, 1)");
  if (weight_decay < 0) throw ValidationError("weight decay must be >= 0");
  if (epochs < 0) throw ValidationError("epochs must be >= 0");
  if (batch_size < 2) throw ValidationError("batch size must be >= 2");
  if (!(ratio > 0)) throw ValidationError("perturbation ratio must be positive");
  if (family == NoiseFamily::mc_dropout) throw ValidationError("calibration needs a weight-noise family");
  if (!(augment_prob >= 0 && augment_prob <= 1)) throw ValidationError("augment probability must lie in [0, 1]");
  if (jpeg_quality_min < 1 || jpeg_quality_max > 100 || jpeg_quality_min > jpeg_quality_max)
    throw ValidationError("jpeg quality range must lie in [1, 100]");
  if (blur_sigma_max < 0) throw ValidationError("blur sigma must be >= 0");
}

std::string AdapterConfig::to_json() const {
  nlohmann::ordered_json j;
  j["rank"] = rank;
  j["alpha"] = alpha;
  j["targets"] = targets;
  j["learning_rate"] = learning_rate;
  j["betas"] = {beta1, beta2};
  j["weight_decay"] = weight_decay;
  j["adam_eps"] = adam_eps;
  j["epochs"] = epochs;
  j["batch_size"] = batch_size;
  j["family"] = std::string(to_string(family));
  j["ratio"] = ratio;
  j["blocks"] = std::vector<std::size_t>(blocks.begin(), blocks.end());
  j["augment"] = augment;
  j["augment_prob"] = augment_prob;
  j["jpeg_quality"] = {jpeg_quality_min, jpeg_quality_max};
  j["blur_sigma_max"] = blur_sigma_max;
  j["direction"] = direction == GapDirection::widen ? "widen" : "literal";
  return j.dump();
}

AdapterConfig AdapterConfig::from_json(std::string_view text) {
  AdapterConfig c;
  try {
    const auto j = nlohmann::json::parse(text);
    c.rank = j.value("rank", c.rank);
    c.alpha = j.value("alpha", c.alpha);
    c.targets = j.value("targets", c.targets);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    if (j.contains("betas")) {
      c.beta1 = j["betas"].at(0).get<double>();
      c.beta2 = j["betas"].at(1).get<double>();
    }
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    if (j.contains("family")) c.family = parse_noise_family(j["family"].get<std::string>());
    c.ratio = j.value("ratio", c.ratio);
    if (j.contains("blocks")) {
      const auto blocks = j["blocks"].get<std::vector<std::size_t>>();
      c.blocks = {blocks.begin(), blocks.end()};
    }
    c.augment = j.value("augment", c.augment);
    c.augment_prob = j.value("augment_prob", c.augment_prob);
    if (j.contains("jpeg_quality")) {
      c.jpeg_quality_min = j["jpeg_quality"].at(0).get<int>();
      c.jpeg_quality_max = j["jpeg_quality"].at(1).get<int>();
    }
    c.blur_sigma_max = j.value("blur_sigma_max", c.blur_sigma_max);
    const std::string dir = j.value("direction", std::string("widen"));
    if (dir != "widen" && dir != "literal") throw ValidationError("unknown gap direction: " + dir);
    c.direction = dir == "widen" ? GapDirection::widen : GapDirection::literal;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("invalid adapter config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string AdapterConfig::hash() const { return hex64(fnv1a64(to_json())); }

std::int64_t AdapterSet::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& [name, ad] : by_weight) n += ad.a.size() + ad.b.size();
  return n;
}

AdapterSet attach_adapters(const Backbone& model, const AdapterConfig& config, std::uint64_t seed) {
  config.validate();
  AdapterSet set;
  set.scale = config.alpha / config.rank;
  for (std::size_t blk = 0; blk < model.block_count(); ++blk) {
    for (const auto& target : config.targets) {
      const std::string name = block_prefix(blk) + target + ".weight";
      if (!model.has_param(name)) throw ValidationError("architecture has no adapter target tensor " + name);
      const Tensor& w = model.param(name);
      const auto out = w.values.rows();
      const auto in = w.values.cols();
      Engine eng = make_engine({seed, fnv1a64(name)});
      std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(in)));
      Adapter ad;
      ad.a.resize(config.rank, in);
      for (Eigen::Index i = 0; i < ad.a.size(); ++i) ad.a.data()[i] = normal(eng);
      ad.b = RowMatrix::Zero(out, config.rank);
      set.by_weight.emplace(name, std::move(ad));
    }
  }
  return set;
}

Backbone merge_adapters(const Backbone& base, const AdapterSet& adapters) {
  Backbone merged = base;
  for (const auto& [name, ad] : adapters.by_weight) {
    if (!merged.has_param(name)) throw ValidationError("adapter targets unknown tensor " + name);
    const Tensor& w = merged.param(name);
    if (ad.b.rows() != w.values.rows() || ad.a.cols() != w.values.cols() || ad.a.rows() != ad.b.cols())
      throw ShapeMismatchError(name, "adapter factors do not match the weight");
    merged.add_to_param(name, adapters.scale * (ad.b * ad.a));
  }
  return merged;
}

double calibration_gap_loss(std::span<const double> sim_natural, std::span<const double> sim_generated) {
  if (sim_natural.empty() || sim_generated.empty()) throw ValidationError("calibration loss needs two nonempty batches");
  const double nat = std::accumulate(sim_natural.begin(), sim_natural.end(), 0.0) / sim_natural.size();
  const double gen = std::accumulate(sim_generated.begin(), sim_generated.end(), 0.0) / sim_generated.size();
  return gen - nat;
}

namespace {

constexpr std::uint64_t kStepStream = 0x57e9;
constexpr std::uint64_t kAugmentStream = 0xa06;
constexpr std::uint64_t kShuffleStream = 0x5f1e;

Image augment_image(const Image& img, const AdapterConfig& c, Engine& eng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Image out = img;
  if (unit(eng) < c.augment_prob) {
    std::uniform_int_distribution<int> quality(c.jpeg_quality_min, c.jpeg_quality_max);
    out = jpeg_degrade(out, quality(eng));
  }
  if (unit(eng) < c.augment_prob) {
    std::uniform_real_distribution<double> sigma(0.0, c.blur_sigma_max);
    out = gaussian_blur(out, sigma(eng));
  }
  return out;
}

struct AdamState {
  RowMatrix m;
  RowMatrix v;
};

void adamw_step(RowMatrix& p, const RowMatrix& g, AdamState& s, const AdapterConfig& c, int t) {
  if (s.m.size() == 0) {
    s.m = RowMatrix::Zero(p.rows(), p.cols());
    s.v = RowMatrix::Zero(p.rows(), p.cols());
  }
  s.m = c.beta1 * s.m + (1 - c.beta1) * g;
  s.v = c.beta2 * s.v + (1 - c.beta2) * g.cwiseProduct(g);
  const double bc1 = 1 - std::pow(c.beta1, t);
  const double bc2 = 1 - std::pow(c.beta2, t);
  p *= 1 - c.learning_rate * c.weight_decay;
  p.array() -= c.learning_rate * (s.m.array() / bc1) / ((s.v.array() / bc2).sqrt() + c.adam_eps);
}

}  // namespace

CalibrationCheckpoint train_calibration(const ParamSnapshot& model, const LoadedDataset& train,
                                        const AdapterConfig& config, std::uint64_t seed, int max_steps) {
  config.validate();
  std::vector<std::size_t> natural, generated;
  for (std::size_t i = 0; i < train.size(); ++i) (train.labels[i] == kNatural ? natural : generated).push_back(i);
  if (natural.empty() || generated.empty()) throw ValidationError("calibration needs both natural and generated images");
  if (train.pixels.size() != train.size()) throw ValidationError("calibration needs decoded pixels for augmentation");

  const Backbone& base = *model;
  CalibrationCheckpoint ckpt;
  ckpt.config = config;
  ckpt.seed = seed;
  ckpt.arch_id = base.arch_id();
  ckpt.base_fingerprint = hex64(base.fingerprint());
  ckpt.adapters = attach_adapters(base, config, seed);

  PerturbationSpec spec;
  spec.family = config.family;
  spec.ratio = config.ratio;
  spec.block_indices = config.blocks.empty() ? default_blocks(base.block_count()) : config.blocks;
  spec.validate(base.block_count());

  const std::size_t half = static_cast<std::size_t>(config.batch_size / 2);
  const std::size_t steps_per_epoch = (std::max(natural.size(), generated.size()) + half - 1) / half;
  std::map<std::string, std::pair<AdamState, AdamState>> adam;
  int step = 0;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    Engine shuffle = make_engine({seed, kShuffleStream, static_cast<std::uint64_t>(epoch)});
    std::ranges::shuffle(natural, shuffle);
    std::ranges::shuffle(generated, shuffle);
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      if (max_steps >= 0 && step >= max_steps) return ckpt;
      const auto step_key = static_cast<std::uint64_t>(step);

      // Frozen target: the current adapted model plus a fresh perturbation.
      spec.seed = stream_seed({seed, kStepStream, step_key});
      const Backbone adapted = merge_adapters(base, ckpt.adapters);
      const Backbone target = perturb_model(std::make_shared<const Backbone>(adapted), spec, 0).materialize();

      std::map<std::string, LowRankVars> vars;
      for (auto& [name, ad] : ckpt.adapters.by_weight)
        vars.emplace(name, LowRankVars{ag::borrow_parameter(ad.a), ag::borrow_parameter(ad.b), ckpt.adapters.scale});
      GraphOptions options;
      options.adapters = &vars;

      Engine aug = make_engine({seed, kAugmentStream, step_key});
      std::vector<ag::Var> nat_terms, gen_terms;
      std::vector<double> sim_nat, sim_gen;
      for (int part = 0; part < 2; ++part) {
        const auto& pool = part == 0 ? natural : generated;
        for (std::size_t j = 0; j < half; ++j) {
          const std::size_t idx = pool[(s * half + j) % pool.size()];
          const Image pixels = config.augment ? augment_image(train.pixels[idx], config, aug) : train.pixels[idx];
          const PreprocessedImage input = standardize(pixels, base.arch(), train.ids[idx]);
          const FeatureVector fixed = extract_features(target, std::span(&input, 1))[0];
          ag::Var feat = ag::l2_normalize_rows(vit_forward(base, input, options));
          ag::Var sim = ag::dot(feat, ag::constant(RowMatrix(fixed.transpose())));
          (part == 0 ? sim_nat : sim_gen).push_back(sim->val()(0, 0));
          (part == 0 ? nat_terms : gen_terms).push_back(sim);
        }
      }

      double loss = calibration_gap_loss(sim_nat, sim_gen);
      const double sign = config.direction == GapDirection::widen ? 1.0 : -1.0;
      loss *= sign;
      if (!std::isfinite(loss))
        throw RuntimeFailure("calibration diverged at step " + std::to_string(step) + " (loss is not finite)");
      ckpt.loss_curve.push_back(loss);

      ag::Var total = ag::add(ag::scale(ag::sum(ag::vcat(gen_terms)), sign / gen_terms.size()),
                              ag::scale(ag::sum(ag::vcat(nat_terms)), -sign / nat_terms.size()));
      ag::backward(total);

      ++step;
      for (auto& [name, ad] : ckpt.adapters.by_weight) {
        const LowRankVars& v = vars.at(name);
        auto& [sa, sb] = adam[name];
        const RowMatrix ga = v.a->grad.size() ? v.a->grad : RowMatrix::Zero(ad.a.rows(), ad.a.cols());
        const RowMatrix gb = v.b->grad.size() ? v.b->grad : RowMatrix::Zero(ad.b.rows(), ad.b.cols());
        if (!ga.allFinite() || !gb.allFinite())
          throw RuntimeFailure("calibration diverged at step " + std::to_string(step - 1) + " (non-finite gradient)");
        adamw_step(ad.a, ga, sa, config, step);
        adamw_step(ad.b, gb, sb, config, step);
      }
    }
  }
  return ckpt;
}

void CalibrationCheckpoint::save(const std::filesystem::path& path) const {
  TensorMap tensors;
  for (const auto& [name, ad] : adapters.by_weight) {
    Tensor ta({ad.a.rows(), ad.a.cols()});
    ta.values = ad.a;
    tensors[name + ".lora_a"] = std::move(ta);
    Tensor tb({ad.b.rows(), ad.b.cols()});
    tb.values = ad.b;
    tensors[name + ".lora_b"] = std::move(tb);
  }
  nlohmann::ordered_json curve = loss_curve;
  std::map<std::string, std::string> meta{{"kind", "wepe-calibration"},
                                          {"config", config.to_json()},
                                          {"config_hash", config.hash()},
                                          {"seed", std::to_string(seed)},
                                          {"arch_id", arch_id},
                                          {"base_fingerprint", base_fingerprint},
                                          {"scale", nlohmann::json(adapters.scale).dump()},
                                          {"loss_curve", curve.dump()}};
  write_archive(path, tensors, meta, DType::f64);
}

CalibrationCheckpoint CalibrationCheckpoint::load(const std::filesystem::path& path) {
  const TensorArchive archive = read_archive(path);
  const auto& meta = archive.metadata;
  auto field = [&](const std::string& key) -> const std::string& {
    auto it = meta.find(key);
    if (it == meta.end()) throw ValidationError("calibration checkpoint lacks metadata '" + key + "': " + path.string());
    return it->second;
  };
  if (field("kind") != "wepe-calibration") throw ValidationError("not a calibration checkpoint: " + path.string());
  CalibrationCheckpoint c;
  c.config = AdapterConfig::from_json(field("config"));
  c.seed = std::stoull(field("seed"));
  c.arch_id = field("arch_id");
  c.base_fingerprint = field("base_fingerprint");
  c.adapters.scale = nlohmann::json::parse(field("scale")).get<double>();
  c.loss_curve = nlohmann::json::parse(field("loss_curve")).get<std::vector<double>>();
  for (const auto& [name, t] : archive.tensors) {
    const auto dot = name.rfind('.');
    const std::string weight = name.substr(0, dot);
    const std::string part = name.substr(dot + 1);
    if (part == "lora_a") {
      c.adapters.by_weight[weight].a = t.values;
    } else if (part == "lora_b") {
      c.adapters.by_weight[weight].b = t.values;
    } else {
      throw ValidationError("unexpected tensor in calibration checkpoint: " + name);
    }
  }
  return c;
}

}  // namespace wepe
