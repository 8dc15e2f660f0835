#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "fixtures.hpp"
#include "wepe/data.hpp"
#include "wepe/error.hpp"
#include "wepe/toy.hpp"

using namespace wepe;
using namespace wepe::fixtures;
namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& path, const std::string& text) { std::ofstream(path) << text; }

// Rounds to the 8-bit grid the PNG stores.
Image quantised(const Image& img) {
  Image out = img;
  for (float& v : out.pixels) v = std::round(std::clamp(v, 0.0f, 1.0f) * 255.0f) / 255.0f;
  return out;
}

}  // namespace

TEST(Data, ManifestRoundTripResolvesRelativePaths) {
  TempDir dir;
  fs::create_directories(dir / "imgs");
  DatasetManifest m;
  m.name = "demo";
  m.entries = {{(dir / "imgs" / "a.png").string(), kNatural, std::nullopt},
               {(dir / "imgs" / "b.png").string(), kGenerated, std::string("gen-x")},
               {(dir / "imgs" / "c.png").string(), kGenerated, std::string("gen-a")}};
  save_manifest(m, dir / "m.json");
  EXPECT_NE(read_file(dir / "m.json").find("\"imgs/a.png\""), std::string::npos);
  const DatasetManifest back = load_manifest(dir / "m.json");
  EXPECT_EQ(back, m);
  EXPECT_EQ(back.count(kGenerated), 2u);
  EXPECT_EQ(back.generators(), (std::vector<std::string>{"gen-a", "gen-x"}));
  EXPECT_TRUE(back.has_both_labels());
}

TEST(Data, ManifestErrorsNameTheField) {
  TempDir dir;
  EXPECT_THROW(load_manifest(dir / "none.json"), MissingFileError);
  const std::pair<const char*, const char*> cases[] = {
      {"{not json", "invalid JSON"},
      {"[]", "<root>"},
      {"{\"entries\": []}", "no entries"},
      {"{\"entries\": [{\"label\": 1}]}", "entries[0].path"},
      {"{\"entries\": [{\"path\": \"a.png\", \"label\": 2}]}", "entries[0].label"},
      {"{\"entries\": [{\"path\": \"a.png\", \"label\": 1}, {\"path\": \"a.png\", \"label\": 0}]}", "duplicate"},
      {"{\"entries\": [{\"path\": \"a.png\", \"label\": 0, \"generator\": 3}]}", "entries[0].generator"},
  };
  for (const auto& [text, needle] : cases) {
    write_text(dir / "bad.json", text);
    try {
      load_manifest(dir / "bad.json");
      ADD_FAILURE() << "accepted " << text;
    } catch (const ValidationError& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  }
}

TEST(Data, PngRoundTripAndCentreCrop) {
  TempDir dir;
  const Image img = random_image(3, 37);
  save_png(img, dir / "x.png");
  const Image loaded = load_rgb(dir / "x.png", 32);  // 37 = ceil(32 * 256 / 224): crop only
  ASSERT_EQ(loaded.height, 32);
  const Image q = quantised(img);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) ASSERT_NEAR(loaded.at(c, y, x), q.at(c, y + 2, x + 2), 1e-6);

  const Image wide = load_rgb(dir / "x.png", 16);
  EXPECT_EQ(wide.width, 16);
  EXPECT_EQ(wide.channels, 3);
  EXPECT_THROW(load_rgb(dir / "absent.png", 32), MissingFileError);
  write_text(dir / "junk.png", "not an image");
  EXPECT_THROW(load_rgb(dir / "junk.png", 32), ValidationError);
}

TEST(Data, StandardizeUsesArchStatistics) {
  const ArchSpec& arch = find_arch("ref-tiny");
  Image img(3, 32, 32, 0.75f);
  const PreprocessedImage p = standardize(img, arch, "id");
  EXPECT_EQ(p.source_id, "id");
  for (double v : p.values) EXPECT_NEAR(v, (0.75 - 0.5) / 0.25, 1e-12);
}

TEST(Data, DatasetSkipsUndecodableEntries) {
  TempDir dir;
  const auto path = write_small_manifest(dir.path(), 2, 2);
  DatasetManifest m = load_manifest(path);
  write_text(dir / "broken.png", "xx");
  m.entries.push_back({(dir / "broken.png").string(), kGenerated, std::string("g1")});
  const LoadedDataset data = load_dataset(m, find_arch("ref-tiny"));
  EXPECT_EQ(data.size(), 4u);
  ASSERT_EQ(data.errors.size(), 1u);
  EXPECT_EQ(data.errors[0].first, (dir / "broken.png").string());
  const LoadedDataset sub = data.select({3, 0});
  EXPECT_EQ(sub.ids[0], data.ids[3]);
  EXPECT_EQ(sub.labels[1], data.labels[0]);
}

TEST(Data, FeatureCacheStoresAndReloads) {
  TempDir dir;
  const Backbone model = make_reference_backbone(0);
  const auto inputs = random_inputs(model.arch(), 3, 2);
  const auto direct = extract_features(model, inputs);
  {
    FeatureCache cache(dir.path(), model);
    const auto first = cached_features(model, inputs, &cache);
    EXPECT_EQ(cache.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(first[i], direct[i]);
  }
  FeatureCache reopened(dir.path(), model);
  EXPECT_EQ(reopened.size(), 3u);
  const auto hit = reopened.get(content_hash(inputs[1]));
  ASSERT_TRUE(hit.has_value());
  EXPECT_EQ(*hit, direct[1]);
  EXPECT_FALSE(reopened.get(content_hash(random_input(model.arch(), 99))).has_value());

  // A different model gets its own cache directory.
  FeatureCache other(dir.path(), make_reference_backbone(1));
  EXPECT_NE(other.directory(), reopened.directory());
  EXPECT_EQ(other.size(), 0u);
  EXPECT_THROW(other.put(1, FeatureVector::Zero(3)), ValidationError);
}

TEST(Data, ContentHashTracksValues) {
  const ArchSpec& arch = find_arch("ref-tiny");
  PreprocessedImage a = random_input(arch, 1);
  PreprocessedImage b = a;
  b.source_id = "renamed";
  EXPECT_EQ(content_hash(a), content_hash(b));
  b.values[5] += 1e-9;
  EXPECT_NE(content_hash(a), content_hash(b));
}

TEST(Toy, ImagesAreSeededAndDistinct) {
  const Image a = toy_natural_image(0, 1);
  EXPECT_EQ(a.height, kToyImageSize);
  EXPECT_EQ(a, toy_natural_image(0, 1));
  EXPECT_NE(a, toy_natural_image(0, 2));
  EXPECT_NE(a, toy_natural_image(1, 1));
  for (const auto& gen : kToyGenerators) {
    const Image g = toy_generated_image(gen, 0, 1);
    EXPECT_EQ(g, toy_generated_image(gen, 0, 1));
    for (float v : g.pixels) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
  EXPECT_THROW(toy_generated_image("gen-z", 0, 0), ValidationError);
}

TEST(Toy, SelfTrainingReducesLossAndIsDeterministic) {
  SelfTrainConfig config;
  config.pretrain_images = 16;
  config.batch_size = 4;
  config.steps = 6;
  std::vector<double> la, lb;
  const Backbone a = self_train_backbone(make_reference_backbone(0), 1, config, &la);
  const Backbone b = self_train_backbone(make_reference_backbone(0), 1, config, &lb);
  EXPECT_EQ(la.size(), 6u);
  EXPECT_EQ(la, lb);
  EXPECT_TRUE(a == b);
  EXPECT_FALSE(a == make_reference_backbone(0));
  config.batch_size = 1;
  EXPECT_THROW(self_train_backbone(make_reference_backbone(0), 1, config), ValidationError);
}

TEST(Toy, BenchmarkLayoutIsReproducible) {
  TempDir d1, d2;
  SelfTrainConfig config;
  config.pretrain_images = 16;
  config.batch_size = 4;
  config.steps = 2;
  const ToyBenchmark a = make_toy_benchmark(d1.path(), 0, 16, config);
  const ToyBenchmark b = make_toy_benchmark(d2.path(), 0, 16, config);
  const DatasetManifest test = load_manifest(a.test_manifest);
  EXPECT_EQ(test.count(kNatural), 16u);
  EXPECT_EQ(test.count(kGenerated), 16u);
  EXPECT_EQ(test.generators(), (std::vector<std::string>(kToyGenerators.begin(), kToyGenerators.end())));
  EXPECT_EQ(read_file(a.checkpoint), read_file(b.checkpoint));
  EXPECT_EQ(read_file(test.entries[20].path),
            read_file(d2.path() / fs::relative(test.entries[20].path, d1.path())));
  EXPECT_NE(read_file(a.train_manifest), read_file(a.test_manifest));
  EXPECT_THROW(make_toy_benchmark(d1.path(), 0, 4, config), ValidationError);
}
