#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "wepe/backbone.hpp"
#include "wepe/image.hpp"

namespace wepe {

/// Side length of toy images on disk; preprocessing for ref-tiny resizes the
/// shorter side to 37, so toy images pass through unchanged before the crop.
inline constexpr int kToyImageSize = 37;

/// Generated-image families, ordered by increasing distance from the natural family.
inline const std::vector<std::string> kToyGenerators = {"gen-a", "gen-b", "gen-c"};

/// Natural family: smooth colour noise fields with one soft geometric shape.
Image toy_natural_image(std::uint64_t seed, std::uint64_t index);

/// Generated family `generator`: a natural-family image carrying synthesis-style
/// artifacts, per-pixel noise plus an upsampling checkerboard, in a mix fixed
/// per generator.
Image toy_generated_image(const std::string& generator, std::uint64_t seed, std::uint64_t index);

struct SelfTrainConfig {
  int pretrain_images = 256;
  int steps = 300;
  int batch_size = 16;
  double learning_rate = 1e-3;
  double temperature = 0.1;
  double stability_weight = 1.0;
  double perturb_ratio = 0.1;
  double weight_decay = 1.0;  // decoupled, on weight matrices only
};

/// Self-supervised training of a reference backbone on natural-family images:
/// a contrastive term between two augmented views plus a term pulling each
/// view's feature toward the same image's feature under randomly perturbed
/// weights. Returns the trained model and appends per-step losses to `losses`.
Backbone self_train_backbone(Backbone model, std::uint64_t seed, const SelfTrainConfig& config,
                             std::vector<double>* losses = nullptr);

struct ToyBenchmark {
  std::filesystem::path train_manifest;
  std::filesystem::path test_manifest;
  std::filesystem::path checkpoint;
};

/// Writes a fully seeded toy benchmark under `work_dir`: PNG images, a train
/// and a test manifest (n_per_class natural and n_per_class generated images
/// each, generators split evenly) and the self-trained ref-tiny checkpoint.
/// Reruns with the same arguments produce byte-identical files.
ToyBenchmark make_toy_benchmark(const std::filesystem::path& work_dir, std::uint64_t seed, int n_per_class = 64,
                                const SelfTrainConfig& config = {});

}  // namespace wepe
