#include "wepe/backbone.hpp"

#include <cmath>
#include <cstdlib>
#include <random>
#include <regex>
#include <set>

#include "parallel.hpp"
#include "wepe/archive.hpp"
#include "wepe/error.hpp"
#include "wepe/rng.hpp"
#include "wepe/vit.hpp"

namespace wepe {
namespace {

const std::vector<ArchSpec>& registry() {
  static const std::vector<ArchSpec> archs = [] {
    const std::array<double, 3> imagenet_mean{0.485, 0.456, 0.406};
    const std::array<double, 3> imagenet_std{0.229, 0.224, 0.225};
    std::vector<ArchSpec> v;
    v.push_back({"ref-tiny", 4, 32, 4, 128, 4, 32, 8, 1e-6, {0.5, 0.5, 0.5}, {0.25, 0.25, 0.25}});
    v.push_back({"vit-s-14", 12, 384, 6, 1536, 14, 224, 37, 1e-6, imagenet_mean, imagenet_std});
    v.push_back({"vit-b-14", 12, 768, 12, 3072, 14, 224, 37, 1e-6, imagenet_mean, imagenet_std});
    v.push_back({"vit-l-14", 24, 1024, 16, 4096, 14, 224, 37, 1e-6, imagenet_mean, imagenet_std});
    return v;
  }();
  return archs;
}

const char* const kBlockTensors[] = {
    "norm1.weight", "norm1.bias", "attn.q.weight", "attn.q.bias", "attn.k.weight", "attn.k.bias",
    "attn.v.weight", "attn.v.bias", "attn.proj.weight", "attn.proj.bias", "ls1", "norm2.weight",
    "norm2.bias", "mlp.fc1.weight", "mlp.fc1.bias", "mlp.fc2.weight", "mlp.fc2.bias", "ls2"};

std::vector<std::int64_t> block_tensor_shape(const ArchSpec& a, std::string_view local) {
  const std::int64_t d = a.dim;
  const std::int64_t h = a.mlp_hidden;
  if (local == "mlp.fc1.weight") return {h, d};
  if (local == "mlp.fc1.bias") return {h};
  if (local == "mlp.fc2.weight") return {d, h};
  if (local.ends_with(".weight") && local.starts_with("attn.")) return {d, d};
  return {d};
}

int block_of(const std::string& name) {
  if (!name.starts_with("blocks.")) return -1;
  const auto dot = name.find('.', 7);
  return std::stoi(name.substr(7, dot - 7));
}

}  // namespace

const ArchSpec& find_arch(std::string_view id) {
  for (const auto& a : registry())
    if (a.id == id) return a;
  std::string known;
  for (const auto& a : registry()) known += (known.empty() ? "" : ", ") + a.id;
  throw ValidationError("unknown arch_id '" + std::string(id) + "' (known: " + known + ")");
}

std::vector<std::string> registered_archs() {
  std::vector<std::string> ids;
  for (const auto& a : registry()) ids.push_back(a.id);
  return ids;
}

std::string block_prefix(std::size_t index) { return "blocks." + std::to_string(index) + "."; }

std::vector<std::pair<std::string, std::vector<std::int64_t>>> declared_tensors(const ArchSpec& a) {
  const std::int64_t d = a.dim;
  std::vector<std::pair<std::string, std::vector<std::int64_t>>> out = {
      {"cls_token", {1, 1, d}},
      {"pos_embed", {1, 1 + static_cast<std::int64_t>(a.pos_grid) * a.pos_grid, d}},
      {"patch_embed.weight", {d, 3, a.patch, a.patch}},
      {"patch_embed.bias", {d}},
      {"norm.weight", {d}},
      {"norm.bias", {d}},
  };
  for (int b = 0; b < a.depth; ++b)
    for (const char* local : kBlockTensors) out.emplace_back(block_prefix(b) + local, block_tensor_shape(a, local));
  return out;
}

std::int64_t ParameterBlock::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& [_, t] : tensors) n += t.numel();
  return n;
}

void ParameterBlock::refresh_stats() {
  double total = 0.0;
  std::int64_t n = 0;
  for (const auto& [_, t] : tensors) {
    total += t.values.cwiseAbs().sum();
    n += t.numel();
  }
  mean_abs_param = n ? total / static_cast<double>(n) : 0.0;
}

Backbone::Backbone(ArchSpec arch, std::vector<ParameterBlock> blocks, TensorMap non_block_params)
    : arch_(std::move(arch)), blocks_(std::move(blocks)), non_block_(std::move(non_block_params)) {
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    if (blocks_[i].index != i) throw ValidationError("block indices must be contiguous from 0");
    blocks_[i].refresh_stats();
  }
}

Backbone Backbone::from_tensors(const ArchSpec& arch, TensorMap tensors) {
  std::vector<ParameterBlock> blocks(static_cast<std::size_t>(arch.depth));
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].index = i;
  TensorMap non_block;

  for (const auto& [name, shape] : declared_tensors(arch)) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ShapeMismatchError(name, "missing from checkpoint (expected " + shape_string(shape) + ")");
    if (it->second.shape != shape) {
      throw ShapeMismatchError(name, "checkpoint has " + shape_string(it->second.shape) + ", " + arch.id +
                                         " expects " + shape_string(shape));
    }
    const int b = block_of(name);
    if (b >= 0) {
      blocks[static_cast<std::size_t>(b)].tensors.emplace(name, std::move(it->second));
    } else {
      non_block.emplace(name, std::move(it->second));
    }
    tensors.erase(it);
  }
  if (!tensors.empty()) {
    throw ValidationError("checkpoint has unexpected tensor '" + tensors.begin()->first + "' for arch " + arch.id);
  }
  return Backbone(arch, std::move(blocks), std::move(non_block));
}

bool Backbone::has_param(const std::string& name) const {
  const int b = block_of(name);
  if (b >= 0) return static_cast<std::size_t>(b) < blocks_.size() && blocks_[b].tensors.count(name);
  return non_block_.count(name) > 0;
}

const Tensor& Backbone::param(const std::string& name) const {
  const int b = block_of(name);
  if (b >= 0 && static_cast<std::size_t>(b) < blocks_.size()) {
    auto it = blocks_[b].tensors.find(name);
    if (it != blocks_[b].tensors.end()) return it->second;
  } else {
    auto it = non_block_.find(name);
    if (it != non_block_.end()) return it->second;
  }
  throw ValidationError("no parameter named '" + name + "'");
}

ParameterBlock* Backbone::owning_block(const std::string& name) {
  const int b = block_of(name);
  if (b < 0 || static_cast<std::size_t>(b) >= blocks_.size()) return nullptr;
  return &blocks_[b];
}

void Backbone::set_param(const std::string& name, Tensor value) {
  const Tensor& current = param(name);
  if (current.shape != value.shape) {
    throw ShapeMismatchError(name, "cannot replace " + shape_string(current.shape) + " with " + shape_string(value.shape));
  }
  if (ParameterBlock* blk = owning_block(name)) {
    blk->tensors[name] = std::move(value);
    blk->refresh_stats();
  } else {
    non_block_[name] = std::move(value);
  }
}

void Backbone::add_to_param(const std::string& name, const RowMatrix& delta) {
  const Tensor& current = param(name);
  if (current.values.rows() != delta.rows() || current.values.cols() != delta.cols()) {
    throw ShapeMismatchError(name, "delta has wrong shape");
  }
  if (ParameterBlock* blk = owning_block(name)) {
    blk->tensors[name].values += delta;
    blk->refresh_stats();
  } else {
    non_block_[name].values += delta;
  }
}

TensorMap Backbone::all_params() const {
  TensorMap out = non_block_;
  for (const auto& blk : blocks_) out.insert(blk.tensors.begin(), blk.tensors.end());
  return out;
}

std::int64_t Backbone::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& [_, t] : non_block_) n += t.numel();
  for (const auto& blk : blocks_) n += blk.parameter_count();
  return n;
}

std::uint64_t Backbone::fingerprint() const {
  std::uint64_t h = fnv1a64(arch_.id);
  for (const auto& [name, t] : all_params()) {
    h = fnv1a64(name, h);
    h = fnv1a64(std::as_bytes(std::span(t.data(), static_cast<std::size_t>(t.numel()))), h);
  }
  return h;
}

bool operator==(const Backbone& a, const Backbone& b) {
  if (a.arch_.id != b.arch_.id || a.blocks_.size() != b.blocks_.size() || a.non_block_ != b.non_block_) return false;
  for (std::size_t i = 0; i < a.blocks_.size(); ++i)
    if (a.blocks_[i].tensors != b.blocks_[i].tensors) return false;
  return true;
}

ParamSnapshot snapshot_params(const Backbone& model) { return std::make_shared<const Backbone>(model); }

Backbone load_backbone(const std::filesystem::path& checkpoint, std::string_view arch_id) {
  const ArchSpec& arch = find_arch(arch_id);
  if (!std::filesystem::exists(checkpoint)) throw MissingFileError(checkpoint.string());
  TensorArchive archive = read_archive(checkpoint);
  return Backbone::from_tensors(arch, std::move(archive.tensors));
}

void save_backbone(const Backbone& model, const std::filesystem::path& checkpoint) {
  write_archive(checkpoint, model.all_params(), {{"arch_id", model.arch_id()}}, DType::f64);
}

Backbone make_reference_backbone(std::uint64_t seed, std::string_view arch_id) {
  const ArchSpec& arch = find_arch(arch_id);
  TensorMap tensors;
  for (const auto& [name, shape] : declared_tensors(arch)) {
    Tensor t(shape);
    const bool unit = name.ends_with("norm1.weight") || name.ends_with("norm2.weight") || name == "norm.weight" ||
                      name.ends_with("ls1") || name.ends_with("ls2");
    const bool zero = name.ends_with(".bias");
    if (unit) {
      t.values.setOnes();
    } else if (!zero) {
      Engine eng = make_engine({seed, fnv1a64(name)});
      std::normal_distribution<double> normal(0.0, 0.02);
      for (std::int64_t i = 0; i < t.numel(); ++i) t.data()[i] = normal(eng);
    }
    tensors.emplace(name, std::move(t));
  }
  return Backbone::from_tensors(arch, std::move(tensors));
}

Backbone truncate_blocks(const Backbone& model, std::size_t depth) {
  if (depth == 0 || depth > model.block_count()) throw ValidationError("truncation depth out of range");
  ArchSpec arch = model.arch();
  arch.depth = static_cast<int>(depth);
  arch.id += ":" + std::to_string(depth);
  std::vector<ParameterBlock> blocks(model.blocks().begin(), model.blocks().begin() + static_cast<std::ptrdiff_t>(depth));
  return Backbone(arch, std::move(blocks), model.non_block_params());
}

std::vector<FeatureVector> extract_raw_features(const Backbone& model, std::span<const PreprocessedImage> images,
                                                int workers) {
  if (images.empty()) throw ValidationError("extract_features needs a nonempty batch");
  for (const auto& img : images) check_input(model.arch(), img);
  std::vector<FeatureVector> out(images.size());
  detail::parallel_for(images.size(), workers, [&](std::size_t i) {
    ag::Var f = vit_forward(model, images[i]);
    out[i] = f->val().row(0).transpose();
  });
  return out;
}

std::vector<FeatureVector> extract_features(const Backbone& model, std::span<const PreprocessedImage> images,
                                            int workers) {
  auto feats = extract_raw_features(model, images, workers);
  for (auto& f : feats) f /= f.norm();
  return feats;
}

namespace {

// Maps a Hugging Face / original DINOv2 tensor name onto the canonical one.
// Returns an empty string for tensors that are intentionally dropped.
std::string canonical_name(const std::string& name) {
  static const std::vector<std::pair<std::regex, std::string>> rules = {
      {std::regex(R"(^embeddings\.cls_token$)"), "cls_token"},
      {std::regex(R"(^embeddings\.mask_token$)"), ""},
      {std::regex(R"(^embeddings\.position_embeddings$)"), "pos_embed"},
      {std::regex(R"(^embeddings\.patch_embeddings\.projection\.(weight|bias)$)"), "patch_embed.$1"},
      {std::regex(R"(^layernorm\.(weight|bias)$)"), "norm.$1"},
      {std::regex(R"(^encoder\.layer\.(\d+)\.norm([12])\.(weight|bias)$)"), "blocks.$1.norm$2.$3"},
      {std::regex(R"(^encoder\.layer\.(\d+)\.attention\.attention\.query\.(weight|bias)$)"), "blocks.$1.attn.q.$2"},
      {std::regex(R"(^encoder\.layer\.(\d+)\.attention\.attention\.key\.(weight|bias)$)"), "blocks.$1.attn.k.$2"},
      {std::regex(R"(^encoder\.layer\.(\d+)\.attention\.attention\.value\.(weight|bias)$)"), "blocks.$1.attn.v.$2"},
      {std::regex(R"(^encoder\.layer\.(\d+)\.attention\.output\.dense\.(weight|bias)$)"), "blocks.$1.attn.proj.$2"},
      {std::regex(R"(^encoder\.layer\.(\d+)\.layer_scale([12])\.lambda1$)"), "blocks.$1.ls$2"},
      {std::regex(R"(^encoder\.layer\.(\d+)\.mlp\.(fc[12])\.(weight|bias)$)"), "blocks.$1.mlp.$2.$3"},
      {std::regex(R"(^mask_token$)"), ""},
      {std::regex(R"(^patch_embed\.proj\.(weight|bias)$)"), "patch_embed.$1"},
      {std::regex(R"(^blocks\.(\d+)\.ls([12])\.gamma$)"), "blocks.$1.ls$2"},
      {std::regex(R"(^(cls_token|pos_embed|norm\.weight|norm\.bias)$)"), "$1"},
      {std::regex(R"(^blocks\.(\d+)\.(norm[12]\.(weight|bias)|attn\.proj\.(weight|bias)|mlp\.fc[12]\.(weight|bias))$)"),
       "blocks.$1.$2"},
  };
  for (const auto& [re, replacement] : rules)
    if (std::regex_match(name, re)) return std::regex_replace(name, re, replacement);
  throw ValidationError("convert-checkpoint: unrecognised tensor '" + name + "'");
}

}  // namespace

void convert_dinov2_checkpoint(const std::filesystem::path& source, const std::filesystem::path& destination,
                               std::string_view arch_id) {
  const ArchSpec& arch = find_arch(arch_id);
  TensorArchive in = read_archive(source);
  TensorMap out;
  static const std::regex fused(R"(^blocks\.(\d+)\.attn\.qkv\.(weight|bias)$)");
  for (auto& [name, t] : in.tensors) {
    std::smatch m;
    if (std::regex_match(name, m, fused)) {
      // Fused [3*dim, ...] projection: rows are q, then k, then v.
      const std::int64_t d = t.shape.front() / 3;
      const char* parts[] = {"q", "k", "v"};
      for (int p = 0; p < 3; ++p) {
        std::vector<std::int64_t> shape = t.shape;
        shape.front() = d;
        Tensor piece(shape);
        if (t.shape.size() == 1) {
          piece.values = t.values.middleCols(p * d, d);
        } else {
          piece.values = t.values.middleRows(p * d, d);
        }
        out.emplace("blocks." + m[1].str() + ".attn." + parts[p] + "." + m[2].str(), std::move(piece));
      }
      continue;
    }
    std::string canon = canonical_name(name);
    if (canon.empty()) continue;
    if (canon == "cls_token" && t.shape.size() == 2) t.shape = {1, 1, t.shape.back()};
    out.emplace(canon, std::move(t));
  }
  // Validates names and shapes before anything is written.
  Backbone model = Backbone::from_tensors(arch, std::move(out));
  write_archive(destination, model.all_params(), {{"arch_id", std::string(arch_id)}, {"source", source.filename().string()}},
                DType::f32);
}

std::filesystem::path cache_dir() {
  if (const char* env = std::getenv("WEPE_CACHE_DIR"); env && *env) return env;
  if (const char* home = std::getenv("HOME"); home && *home) return std::filesystem::path(home) / ".cache" / "wepe";
  return std::filesystem::temp_directory_path() / "wepe";
}

}  // namespace wepe
