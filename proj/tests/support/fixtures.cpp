#include "fixtures.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <random>
#include <set>
#include <sstream>

namespace wepe::fixtures {

namespace fs = std::filesystem;

TempDir::TempDir(const std::string& tag) {
  static int counter = 0;
  std::random_device rd;
  path_ = fs::temp_directory_path() / (tag + "-" + std::to_string(rd()) + "-" + std::to_string(counter++));
  fs::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

Image random_image(std::uint64_t seed, int size) {
  std::mt19937_64 eng(seed);
  std::uniform_real_distribution<float> unit(0.0f, 1.0f);
  Image img(3, size, size);
  for (auto& p : img.pixels) p = unit(eng);
  return img;
}

PreprocessedImage random_input(const ArchSpec& arch, std::uint64_t seed) {
  return standardize(random_image(seed, arch.image_size), arch, "random-" + std::to_string(seed));
}

std::vector<PreprocessedImage> random_inputs(const ArchSpec& arch, std::size_t n, std::uint64_t seed) {
  std::vector<PreprocessedImage> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(random_input(arch, seed * 1000 + i));
  return out;
}

fs::path write_small_manifest(const fs::path& dir, int n_natural, int n_generated, int size) {
  DatasetManifest m;
  m.name = "small";
  for (int i = 0; i < n_natural + n_generated; ++i) {
    const bool natural = i < n_natural;
    Image img(3, size, size);
    std::mt19937_64 eng(1000 + i);
    std::uniform_real_distribution<float> unit(0.0f, 1.0f);
    const float base = unit(eng);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
          img.at(c, y, x) = natural ? 0.25f + 0.5f * base * static_cast<float>(x + y) / (2.0f * size) : unit(eng);
    const fs::path p = dir / ((natural ? "nat_" : "gen_") + std::to_string(i) + ".png");
    save_png(img, p);
    ManifestEntry e;
    e.path = p.string();
    e.label = natural ? kNatural : kGenerated;
    if (!natural) e.generator = i % 2 ? "g1" : "g2";
    m.entries.push_back(e);
  }
  const fs::path manifest = dir / "manifest.json";
  save_manifest(m, manifest);
  return manifest;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double oracle_auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  double wins = 0.0;
  double pairs = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      pairs += 1.0;
      if (scores[i] > scores[j]) wins += 1.0;
      if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  return wins / pairs;
}

double oracle_ap(const std::vector<double>& scores, const std::vector<int>& labels) {
  const std::set<double, std::greater<>> thresholds(scores.begin(), scores.end());
  double positives = 0.0;
  for (int l : labels) positives += l == 1;
  double ap = 0.0;
  double prev_recall = 0.0;
  for (double t : thresholds) {
    double tp = 0.0;
    double predicted = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (scores[i] >= t) {
        predicted += 1.0;
        tp += labels[i] == 1;
      }
    }
    const double recall = tp / positives;
    ap += (recall - prev_recall) * (tp / predicted);
    prev_recall = recall;
  }
  return ap;
}

double oracle_best_accuracy(const std::vector<double>& scores, const std::vector<int>& labels) {
  std::vector<double> candidates = {-std::numeric_limits<double>::infinity(),
                                    std::numeric_limits<double>::infinity()};
  for (double s : scores) {
    candidates.push_back(s);
    candidates.push_back(std::nextafter(s, std::numeric_limits<double>::infinity()));
  }
  double best = 0.0;
  for (double t : candidates) {
    double correct = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      const int predicted = scores[i] < t ? 0 : 1;
      correct += predicted == labels[i];
    }
    best = std::max(best, correct / scores.size());
  }
  return best;
}

}  // namespace wepe::fixtures
