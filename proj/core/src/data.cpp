#include "wepe/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "wepe/error.hpp"
#include "wepe/rng.hpp"

namespace wepe {

namespace fs = std::filesystem;
using nlohmann::json;

std::size_t DatasetManifest::count(int label) const {
  std::size_t n = 0;
  for (const auto& e : entries) n += e.label == label;
  return n;
}

std::vector<std::string> DatasetManifest::generators() const {
  std::set<std::string> tags;
  for (const auto& e : entries)
    if (e.label == kGenerated) tags.insert(e.generator.value_or("unknown"));
  return {tags.begin(), tags.end()};
}

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingFileError(path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError(path.string() + ": invalid JSON: " + e.what());
  }
  const fs::path base = fs::absolute(path).parent_path();
  auto fail = [&](const std::string& where, const std::string& what) -> ValidationError {
    return ValidationError(path.string() + ": " + where + ": " + what);
  };

  if (!j.is_object()) throw fail("<root>", "expected an object");
  DatasetManifest m;
  if (j.contains("name")) {
    if (!j["name"].is_string()) throw fail("name", "must be a string");
    m.name = j["name"].get<std::string>();
  }
  if (!j.contains("entries") || !j["entries"].is_array()) throw fail("entries", "missing or not an array");
  if (j["entries"].empty()) throw fail("entries", "manifest has no entries");

  std::set<std::string> seen;
  std::size_t i = 0;
  for (const auto& e : j["entries"]) {
    const std::string where = "entries[" + std::to_string(i++) + "]";
    if (!e.is_object()) throw fail(where, "expected an object");
    if (!e.contains("path") || !e["path"].is_string()) throw fail(where + ".path", "missing or not a string");
    if (!e.contains("label") || !e["label"].is_number_integer()) throw fail(where + ".label", "missing or not an integer");
    const int label = e["label"].get<int>();
    if (label != 0 && label != 1) throw fail(where + ".label", "must be 0 (generated) or 1 (natural), got " + std::to_string(label));
    ManifestEntry entry;
    fs::path p = e["path"].get<std::string>();
    entry.path = (p.is_absolute() ? p : base / p).lexically_normal().string();
    entry.label = label;
    if (e.contains("generator") && !e["generator"].is_null()) {
      if (!e["generator"].is_string()) throw fail(where + ".generator", "must be a string");
      entry.generator = e["generator"].get<std::string>();
    }
    if (!seen.insert(entry.path).second) throw fail(where + ".path", "duplicate path " + entry.path);
    m.entries.push_back(std::move(entry));
  }
  return m;
}

void save_manifest(const DatasetManifest& manifest, const fs::path& path) {
  const fs::path base = fs::absolute(path).parent_path();
  nlohmann::ordered_json j;
  j["name"] = manifest.name;
  j["entries"] = json::array();
  for (const auto& e : manifest.entries) {
    fs::path p = e.path;
    const fs::path rel = fs::absolute(p).lexically_relative(base);
    if (!rel.empty() && *rel.begin() != "..") p = rel;
    nlohmann::ordered_json item;
    item["path"] = p.generic_string();
    item["label"] = e.label;
    if (e.generator) item["generator"] = *e.generator;
    j["entries"].push_back(item);
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw RuntimeFailure("cannot write manifest: " + path.string());
  out << j.dump(2) << '\n';
}

Image load_rgb(const fs::path& path, int target_size) {
  if (target_size <= 0) throw ValidationError("target size must be positive");
  if (!fs::exists(path)) throw MissingFileError(path.string());
  cv::Mat raw = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (raw.empty()) throw ValidationError("cannot decode image: " + path.string());
  if (raw.rows == 0 || raw.cols == 0) throw ValidationError("zero-size image: " + path.string());

  const double scale = raw.depth() == CV_16U ? 1.0 / 65535.0 : raw.depth() == CV_8U ? 1.0 / 255.0 : 1.0;
  cv::Mat rgb;
  switch (raw.channels()) {
    case 1: cv::cvtColor(raw, rgb, cv::COLOR_GRAY2RGB); break;
    case 3: cv::cvtColor(raw, rgb, cv::COLOR_BGR2RGB); break;
    case 4: cv::cvtColor(raw, rgb, cv::COLOR_BGRA2RGB); break;
    default: throw ValidationError("unsupported channel count in " + path.string());
  }
  rgb.convertTo(rgb, CV_32FC3, scale);

  const int resize_to = static_cast<int>(std::ceil(target_size * 256.0 / 224.0));
  const int shorter = std::min(rgb.rows, rgb.cols);
  if (shorter != resize_to) {
    const double f = static_cast<double>(resize_to) / shorter;
    const int h = rgb.rows == shorter ? resize_to : static_cast<int>(std::lround(rgb.rows * f));
    const int w = rgb.cols == shorter ? resize_to : static_cast<int>(std::lround(rgb.cols * f));
    cv::Mat resized;
    cv::resize(rgb, resized, cv::Size(w, h), 0, 0, f < 1.0 ? cv::INTER_AREA : cv::INTER_CUBIC);
    rgb = resized;
  }
  const int top = (rgb.rows - target_size) / 2;
  const int left = (rgb.cols - target_size) / 2;
  cv::Mat crop = rgb(cv::Rect(left, top, target_size, target_size));

  Image out(3, target_size, target_size);
  for (int y = 0; y < target_size; ++y)
    for (int x = 0; x < target_size; ++x) {
      const auto px = crop.at<cv::Vec3f>(y, x);
      for (int c = 0; c < 3; ++c) out.at(c, y, x) = std::clamp(px[c], 0.0f, 1.0f);
    }
  return out;
}

void save_png(const Image& image, const fs::path& path) {
  if (image.channels != 3) throw ValidationError("save_png expects a 3-channel image");
  cv::Mat bgr(image.height, image.width, CV_8UC3);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      for (int c = 0; c < 3; ++c)
        bgr.at<cv::Vec3b>(y, x)[2 - c] =
            static_cast<std::uint8_t>(std::lround(std::clamp(image.at(c, y, x), 0.0f, 1.0f) * 255.0f));
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), bgr)) throw RuntimeFailure("cannot write image: " + path.string());
}

PreprocessedImage standardize(const Image& image, const ArchSpec& arch, std::string source_id) {
  if (image.channels != 3) throw ValidationError("standardize expects a 3-channel image");
  PreprocessedImage out;
  out.source_id = std::move(source_id);
  out.channels = 3;
  out.height = image.height;
  out.width = image.width;
  out.values.resize(image.pixels.size());
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < image.height; ++y)
      for (int x = 0; x < image.width; ++x) {
        const std::size_t i = image.index(c, y, x);
        out.values[i] = (static_cast<double>(image.pixels[i]) - arch.mean[c]) / arch.stddev[c];
      }
  return out;
}

PreprocessedImage load_image(const fs::path& path, const ArchSpec& arch) {
  return standardize(load_rgb(path, arch.image_size), arch, path.string());
}

LoadedDataset LoadedDataset::select(const std::vector<std::size_t>& positions) const {
  LoadedDataset out;
  for (std::size_t i : positions) {
    out.ids.push_back(ids.at(i));
    out.labels.push_back(labels.at(i));
    out.generators.push_back(generators.at(i));
    out.pixels.push_back(pixels.at(i));
    out.inputs.push_back(inputs.at(i));
  }
  return out;
}

LoadedDataset load_dataset(const DatasetManifest& manifest, const ArchSpec& arch) {
  LoadedDataset ds;
  for (const auto& e : manifest.entries) {
    try {
      Image rgb = load_rgb(e.path, arch.image_size);
      ds.inputs.push_back(standardize(rgb, arch, e.path));
      ds.pixels.push_back(std::move(rgb));
      ds.ids.push_back(e.path);
      ds.labels.push_back(e.label);
      ds.generators.push_back(e.label == kGenerated ? e.generator.value_or("unknown") : "");
    } catch (const std::exception& err) {
      ds.errors.emplace_back(e.path, err.what());
    }
  }
  return ds;
}

std::uint64_t content_hash(const PreprocessedImage& image) {
  std::uint64_t h = fnv1a64(std::to_string(image.channels) + "x" + std::to_string(image.height) + "x" +
                            std::to_string(image.width));
  return fnv1a64(std::as_bytes(std::span(image.values)), h);
}

FeatureCache::FeatureCache(fs::path root, const Backbone& model)
    : dir_(std::move(root) / (model.arch_id() + "-" + hex64(model.fingerprint()))), dim_(model.feature_dim()) {
  fs::create_directories(dir_);
  std::ifstream in(dir_ / "index.json");
  if (in) {
    try {
      const json j = json::parse(in);
      for (auto it = j.begin(); it != j.end(); ++it)
        index_[std::stoull(it.key(), nullptr, 16)] = it->get<std::uint64_t>();
    } catch (const std::exception&) {
      index_.clear();  // corrupt index: start over
    }
  }
}

std::optional<FeatureVector> FeatureCache::get(std::uint64_t image_hash) const {
  std::lock_guard lock(mu_);
  auto it = index_.find(image_hash);
  if (it == index_.end()) return std::nullopt;
  std::ifstream in(dir_ / "features.bin", std::ios::binary);
  if (!in) return std::nullopt;
  FeatureVector v(dim_);
  in.seekg(static_cast<std::streamoff>(it->second));
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(sizeof(double) * dim_));
  if (!in) return std::nullopt;
  return v;
}

void FeatureCache::put(std::uint64_t image_hash, const FeatureVector& feature) {
  if (feature.size() != dim_) throw ValidationError("feature cache: dimension mismatch");
  std::lock_guard lock(mu_);
  if (index_.count(image_hash)) return;
  std::ofstream out(dir_ / "features.bin", std::ios::binary | std::ios::app);
  if (!out) throw RuntimeFailure("cannot append to feature cache in " + dir_.string());
  out.seekp(0, std::ios::end);
  const auto offset = static_cast<std::uint64_t>(out.tellp());
  out.write(reinterpret_cast<const char*>(feature.data()), static_cast<std::streamsize>(sizeof(double) * dim_));
  out.close();
  index_[image_hash] = offset;
  save_index();
}

std::size_t FeatureCache::size() const {
  std::lock_guard lock(mu_);
  return index_.size();
}

void FeatureCache::save_index() const {
  json j = json::object();
  for (const auto& [h, off] : index_) j[hex64(h)] = off;
  std::ofstream out(dir_ / "index.json", std::ios::trunc);
  out << j.dump();
}

std::vector<FeatureVector> cached_features(const Backbone& model, std::span<const PreprocessedImage> images,
                                           FeatureCache* cache, int workers) {
  if (!cache) return extract_features(model, images, workers);
  std::vector<FeatureVector> out(images.size());
  std::vector<std::uint64_t> hashes(images.size());
  std::vector<PreprocessedImage> missing;
  std::vector<std::size_t> missing_at;
  for (std::size_t i = 0; i < images.size(); ++i) {
    hashes[i] = content_hash(images[i]);
    if (auto hit = cache->get(hashes[i])) {
      out[i] = *hit;
    } else {
      missing.push_back(images[i]);
      missing_at.push_back(i);
    }
  }
  if (!missing.empty()) {
    const auto fresh = extract_features(model, missing, workers);
    for (std::size_t k = 0; k < fresh.size(); ++k) {
      out[missing_at[k]] = fresh[k];
      cache->put(hashes[missing_at[k]], fresh[k]);
    }
  }
  return out;
}

}  // namespace wepe
