#include "wepe/toy.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>

#include <opencv2/imgproc.hpp>

#include "wepe/autograd.hpp"
#include "wepe/data.hpp"
#include "wepe/error.hpp"
#include "wepe/perturbation.hpp"
#include "wepe/rng.hpp"
#include "wepe/vit.hpp"

namespace wepe {
namespace {

constexpr int kSize = kToyImageSize;

// Zero-mean, unit-std Gaussian-filtered white noise.
cv::Mat smooth_field(Engine& eng, double sigma) {
  std::normal_distribution<double> normal(0.0, 1.0);
  cv::Mat field(kSize, kSize, CV_64F);
  for (int y = 0; y < kSize; ++y)
    for (int x = 0; x < kSize; ++x) field.at<double>(y, x) = normal(eng);
  cv::GaussianBlur(field, field, cv::Size(0, 0), sigma, sigma, cv::BORDER_REFLECT_101);
  cv::Scalar mean, stddev;
  cv::meanStdDev(field, mean, stddev);
  field = (field - mean[0]) / std::max(stddev[0], 1e-12);
  return field;
}

double smoothstep(double edge, double v) { return std::clamp(0.5 + v / edge, 0.0, 1.0); }

struct Canvas {
  double px[3][kSize][kSize];
};

void paint_natural(Canvas& canvas, Engine& eng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const cv::Mat lum = smooth_field(eng, 3.0);
  double base[3];
  for (double& b : base) b = 0.3 + 0.4 * unit(eng);
  for (int c = 0; c < 3; ++c) {
    const cv::Mat chroma = smooth_field(eng, 5.0);
    for (int y = 0; y < kSize; ++y)
      for (int x = 0; x < kSize; ++x)
        canvas.px[c][y][x] = base[c] + 0.12 * lum.at<double>(y, x) + 0.05 * chroma.at<double>(y, x);
  }

  // One soft-edged disc or rectangle.
  double colour[3];
  for (double& v : colour) v = 0.1 + 0.8 * unit(eng);
  const bool disc = unit(eng) < 0.5;
  const double cx = 8 + unit(eng) * (kSize - 16);
  const double cy = 8 + unit(eng) * (kSize - 16);
  const double r = 5 + unit(eng) * 7;
  const double hw = 4 + unit(eng) * 8;
  const double hh = 4 + unit(eng) * 8;
  for (int y = 0; y < kSize; ++y)
    for (int x = 0; x < kSize; ++x) {
      const double inside = disc ? r - std::hypot(x - cx, y - cy)
                                 : std::min(hw - std::abs(x - cx), hh - std::abs(y - cy));
      const double a = smoothstep(1.5, inside);
      for (int c = 0; c < 3; ++c) canvas.px[c][y][x] = (1 - a) * canvas.px[c][y][x] + a * colour[c];
    }
}

Image to_image(const Canvas& canvas) {
  Image img(3, kSize, kSize);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < kSize; ++y)
      for (int x = 0; x < kSize; ++x) img.at(c, y, x) = static_cast<float>(std::clamp(canvas.px[c][y][x], 0.0, 1.0));
  return img;
}

struct ArtifactMix {
  double noise;
  double checker;
};

// Graded synthesis artifacts: per-pixel noise and an upsampling checkerboard.
ArtifactMix generator_artifacts(const std::string& generator) {
  static const ArtifactMix mixes[] = {{0.35, 0.0}, {0.2, 0.3}, {0.55, 0.1}};
  for (std::size_t i = 0; i < kToyGenerators.size(); ++i)
    if (kToyGenerators[i] == generator) return mixes[i];
  throw ValidationError("unknown toy generator: " + generator);
}

}  // namespace

Image toy_natural_image(std::uint64_t seed, std::uint64_t index) {
  Engine eng = make_engine({seed, 0x7a7, index});
  Canvas canvas;
  paint_natural(canvas, eng);
  return to_image(canvas);
}

Image toy_generated_image(const std::string& generator, std::uint64_t seed, std::uint64_t index) {
  const ArtifactMix mix = generator_artifacts(generator);
  Engine eng = make_engine({seed, fnv1a64(generator), index});
  Canvas canvas;
  paint_natural(canvas, eng);
  std::normal_distribution<double> noise(0.0, mix.noise);
  const double phase = (eng() & 1) != 0 ? 1.0 : -1.0;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < kSize; ++y)
      for (int x = 0; x < kSize; ++x) {
        const double checker = ((x + y) % 2 == 0 ? 1.0 : -1.0) * phase;
        canvas.px[c][y][x] += mix.checker * checker + noise(eng);
      }
  return to_image(canvas);
}

namespace {

Image random_view(const Image& src, int target, Engine& eng) {
  std::uniform_int_distribution<int> offset(0, src.width - target);
  std::uniform_real_distribution<double> jitter(-0.05, 0.05);
  const int ox = offset(eng);
  const int oy = offset(eng);
  const bool flip = (eng() & 1) != 0;
  const double shift = jitter(eng);
  Image out(3, target, target);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < target; ++y)
      for (int x = 0; x < target; ++x) {
        const int sx = ox + (flip ? target - 1 - x : x);
        out.at(c, y, x) = std::clamp(static_cast<float>(src.at(c, oy + y, sx) + shift), 0.0f, 1.0f);
      }
  return out;
}

}  // namespace

Backbone self_train_backbone(Backbone model, std::uint64_t seed, const SelfTrainConfig& config,
                             std::vector<double>* losses) {
  if (config.pretrain_images < config.batch_size || config.batch_size < 2 || config.steps < 0)
    throw ValidationError("invalid self-training configuration");
  const ArchSpec arch = model.arch();
  std::vector<Image> pool;
  for (int i = 0; i < config.pretrain_images; ++i)
    pool.push_back(toy_natural_image(stream_seed({seed, 0x9e}), static_cast<std::uint64_t>(i)));

  TensorMap params = model.all_params();
  std::map<std::string, std::pair<RowMatrix, RowMatrix>> moments;
  for (const auto& [name, t] : params)
    moments[name] = {RowMatrix::Zero(t.values.rows(), t.values.cols()), RowMatrix::Zero(t.values.rows(), t.values.cols())};
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;

  PerturbationSpec spec;
  spec.ratio = config.perturb_ratio;
  spec.block_indices = default_blocks(model.block_count());
  const int B = config.batch_size;

  for (int step = 0; step < config.steps; ++step) {
    const auto key = static_cast<std::uint64_t>(step);
    const Backbone current = Backbone::from_tensors(arch, params);
    spec.seed = stream_seed({seed, 0xa11, key});
    const PerturbedSnapshot noise = perturb_model(std::make_shared<const Backbone>(current), spec, 0);

    // The perturbed branch shares the leaves, so the stability term flattens
    // the objective around theta instead of chasing one noisy copy of it.
    std::map<std::string, ag::Var> leaves, noisy;
    for (auto& [name, t] : params) leaves.emplace(name, ag::borrow_parameter(t.values));
    noisy = leaves;
    for (const auto& [block, deltas] : noise.deltas)
      for (const auto& [name, delta] : deltas) noisy[name] = ag::add(leaves.at(name), ag::borrow(delta.values));
    GraphOptions options;
    options.param_vars = &leaves;
    GraphOptions noisy_options;
    noisy_options.param_vars = &noisy;

    Engine eng = make_engine({seed, 0xb47c, key});
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    std::vector<ag::Var> z1, z2, zn;
    for (int i = 0; i < B; ++i) {
      const Image& src = pool[pick(eng)];
      const PreprocessedImage v1 = standardize(random_view(src, arch.image_size, eng), arch, "");
      const PreprocessedImage v2 = standardize(random_view(src, arch.image_size, eng), arch, "");
      z1.push_back(ag::l2_normalize_rows(vit_forward(current, v1, options)));
      z2.push_back(ag::l2_normalize_rows(vit_forward(current, v2, options)));
      zn.push_back(ag::l2_normalize_rows(vit_forward(current, v1, noisy_options)));
    }
    const ag::Var Z1 = ag::vcat(z1);
    const ag::Var Z2 = ag::vcat(z2);
    const ag::Var logits = ag::scale(ag::matmul(Z1, ag::transpose(Z2)), 1.0 / config.temperature);
    const ag::Var eye = ag::constant(RowMatrix::Identity(B, B));
    const ag::Var nce = ag::scale(ag::add(ag::sum(ag::mul(ag::log_softmax_rows(logits), eye)),
                                          ag::sum(ag::mul(ag::log_softmax_rows(ag::transpose(logits)), eye))),
                                  -0.5 / B);
    const ag::Var stability = ag::scale(ag::sum(ag::mul(Z1, ag::vcat(zn))), -1.0 / B);
    const ag::Var loss = ag::add(nce, ag::scale(stability, config.stability_weight));
    const double value = loss->val()(0, 0) + config.stability_weight;
    if (!std::isfinite(value)) throw RuntimeFailure("self-training diverged at step " + std::to_string(step));
    if (losses) losses->push_back(value);
    ag::backward(loss);

    const int t = step + 1;
    for (auto& [name, tensor] : params) {
      const RowMatrix& g = leaves.at(name)->grad;
      if (g.size() == 0) continue;
      auto& [m, v] = moments[name];
      if (tensor.values.rows() > 1) tensor.values *= 1.0 - config.learning_rate * config.weight_decay;
      m = b1 * m + (1 - b1) * g;
      v = b2 * v + (1 - b2) * g.cwiseProduct(g);
      tensor.values.array() -= config.learning_rate * (m.array() / (1 - std::pow(b1, t))) /
                               ((v.array() / (1 - std::pow(b2, t))).sqrt() + eps);
    }
  }
  return Backbone::from_tensors(arch, std::move(params));
}

ToyBenchmark make_toy_benchmark(const std::filesystem::path& work_dir, std::uint64_t seed, int n_per_class,
                                const SelfTrainConfig& config) {
  namespace fs = std::filesystem;
  if (n_per_class < 16) throw ValidationError("toy benchmark needs at least 16 images per class");
  std::error_code ec;
  fs::create_directories(work_dir, ec);
  if (ec || !fs::is_directory(work_dir)) throw RuntimeFailure("cannot create toy directory: " + work_dir.string());

  ToyBenchmark out;
  out.train_manifest = work_dir / "train.json";
  out.test_manifest = work_dir / "test.json";
  out.checkpoint = work_dir / "ref-tiny-toy.safetensors";

  const std::pair<std::string, std::uint64_t> splits[] = {{"train", 1}, {"test", 2}};
  for (const auto& [split, split_key] : splits) {
    DatasetManifest manifest;
    manifest.name = "toy-" + split;
    const std::uint64_t split_seed = stream_seed({seed, split_key});
    char name[32];
    for (int i = 0; i < n_per_class; ++i) {
      std::snprintf(name, sizeof(name), "%04d.png", i);
      const fs::path path = work_dir / split / "natural" / name;
      save_png(toy_natural_image(split_seed, static_cast<std::uint64_t>(i)), path);
      manifest.entries.push_back({path.string(), kNatural, std::nullopt});
    }
    for (int i = 0; i < n_per_class; ++i) {
      const std::string& gen = kToyGenerators[i % kToyGenerators.size()];
      std::snprintf(name, sizeof(name), "%04d.png", i);
      const fs::path path = work_dir / split / gen / name;
      save_png(toy_generated_image(gen, split_seed, static_cast<std::uint64_t>(i)), path);
      manifest.entries.push_back({path.string(), kGenerated, gen});
    }
    save_manifest(manifest, split == "train" ? out.train_manifest : out.test_manifest);
  }

  Backbone model = self_train_backbone(make_reference_backbone(seed), seed, config);
  save_backbone(model, out.checkpoint);
  return out;
}

}  // namespace wepe
