#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fixtures.hpp"
#include "wepe/archive.hpp"
#include "wepe/backbone.hpp"
#include "wepe/error.hpp"
#include "wepe/vit.hpp"

using namespace wepe;
using wepe::fixtures::TempDir;

namespace {

// Every tensor random (including biases, norms and layer scales) so the
// oracle exercises each term of the forward pass.
Backbone fully_random_backbone(std::uint64_t seed, const ArchSpec& arch) {
  std::mt19937_64 eng(seed);
  std::normal_distribution<double> normal(0.0, 0.1);
  TensorMap tensors;
  for (const auto& [name, shape] : declared_tensors(arch)) {
    Tensor t(shape);
    for (std::int64_t i = 0; i < t.numel(); ++i) t.data()[i] = normal(eng);
    if (name.ends_with("norm1.weight") || name.ends_with("norm2.weight") || name == "norm.weight")
      t.values.array() += 1.0;
    tensors.emplace(name, std::move(t));
  }
  return Backbone::from_tensors(arch, std::move(tensors));
}

using Mat = std::vector<std::vector<double>>;

Mat mat(const Tensor& t) {
  Mat m(t.values.rows(), std::vector<double>(t.values.cols()));
  for (Eigen::Index i = 0; i < t.values.rows(); ++i)
    for (Eigen::Index j = 0; j < t.values.cols(); ++j) m[i][j] = t.values(i, j);
  return m;
}

std::vector<double> vec(const Tensor& t) { return std::vector<double>(t.data(), t.data() + t.numel()); }

// y = x W^T + b, row by row.
Mat affine(const Mat& x, const Mat& w, const std::vector<double>& b) {
  Mat y(x.size(), std::vector<double>(w.size()));
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t o = 0; o < w.size(); ++o) {
      double s = b[o];
      for (std::size_t k = 0; k < x[i].size(); ++k) s += x[i][k] * w[o][k];
      y[i][o] = s;
    }
  return y;
}

std::vector<double> norm_row(const std::vector<double>& x, const std::vector<double>& g, const std::vector<double>& b,
                             double eps) {
  double mu = 0, var = 0;
  for (double v : x) mu += v;
  mu /= x.size();
  for (double v : x) var += (v - mu) * (v - mu);
  var /= x.size();
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - mu) / std::sqrt(var + eps) * g[i] + b[i];
  return y;
}

// Straightforward pre-norm ViT with exact GELU, written from scratch.
std::vector<double> naive_forward(const Backbone& m, const PreprocessedImage& img) {
  const ArchSpec& a = m.arch();
  const int D = a.dim, P = a.patch, G = a.grid(), H = a.heads, dh = D / H;
  const auto p = [&](const std::string& n) { return m.param(n); };
  const Mat pw = mat(p("patch_embed.weight"));
  const auto pb = vec(p("patch_embed.bias"));
  const auto pos = vec(p("pos_embed"));
  Mat x(1 + G * G, std::vector<double>(D));
  for (int d = 0; d < D; ++d) x[0][d] = p("cls_token").values(0, d) + pos[d];
  for (int gy = 0; gy < G; ++gy)
    for (int gx = 0; gx < G; ++gx) {
      const int t = 1 + gy * G + gx;
      for (int d = 0; d < D; ++d) {
        double s = pb[d];
        for (int c = 0; c < 3; ++c)
          for (int ky = 0; ky < P; ++ky)
            for (int kx = 0; kx < P; ++kx) s += pw[d][(c * P + ky) * P + kx] * img.at(c, gy * P + ky, gx * P + kx);
        x[t][d] = s + pos[t * D + d];
      }
    }
  const double eps = a.ln_eps;
  for (int b = 0; b < a.depth; ++b) {
    const std::string pre = "blocks." + std::to_string(b) + ".";
    Mat h(x.size());
    for (std::size_t t = 0; t < x.size(); ++t) h[t] = norm_row(x[t], vec(p(pre + "norm1.weight")), vec(p(pre + "norm1.bias")), eps);
    const Mat q = affine(h, mat(p(pre + "attn.q.weight")), vec(p(pre + "attn.q.bias")));
    const Mat k = affine(h, mat(p(pre + "attn.k.weight")), vec(p(pre + "attn.k.bias")));
    const Mat v = affine(h, mat(p(pre + "attn.v.weight")), vec(p(pre + "attn.v.bias")));
    Mat att(x.size(), std::vector<double>(D, 0.0));
    for (int hd = 0; hd < H; ++hd)
      for (std::size_t i = 0; i < x.size(); ++i) {
        std::vector<double> w(x.size());
        double mx = -1e300;
        for (std::size_t j = 0; j < x.size(); ++j) {
          double s = 0;
          for (int e = 0; e < dh; ++e) s += q[i][hd * dh + e] * k[j][hd * dh + e];
          w[j] = s / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, w[j]);
        }
        double z = 0;
        for (double& wj : w) z += (wj = std::exp(wj - mx));
        for (std::size_t j = 0; j < x.size(); ++j)
          for (int e = 0; e < dh; ++e) att[i][hd * dh + e] += w[j] / z * v[j][hd * dh + e];
      }
    const Mat o = affine(att, mat(p(pre + "attn.proj.weight")), vec(p(pre + "attn.proj.bias")));
    const auto ls1 = vec(p(pre + "ls1"));
    for (std::size_t t = 0; t < x.size(); ++t)
      for (int d = 0; d < D; ++d) x[t][d] += ls1[d] * o[t][d];
    for (std::size_t t = 0; t < x.size(); ++t) h[t] = norm_row(x[t], vec(p(pre + "norm2.weight")), vec(p(pre + "norm2.bias")), eps);
    Mat f = affine(h, mat(p(pre + "mlp.fc1.weight")), vec(p(pre + "mlp.fc1.bias")));
    for (auto& row : f)
      for (double& u : row) u = 0.5 * u * std::erfc(-u / std::sqrt(2.0));
    const Mat y = affine(f, mat(p(pre + "mlp.fc2.weight")), vec(p(pre + "mlp.fc2.bias")));
    const auto ls2 = vec(p(pre + "ls2"));
    for (std::size_t t = 0; t < x.size(); ++t)
      for (int d = 0; d < D; ++d) x[t][d] += ls2[d] * y[t][d];
  }
  return norm_row(x[0], vec(p("norm.weight")), vec(p("norm.bias")), eps);
}

}  // namespace

TEST(Backbone, RegisteredArchitectures) {
  const ArchSpec& tiny = find_arch("ref-tiny");
  EXPECT_EQ(tiny.depth, 4);
  EXPECT_EQ(tiny.dim, 32);
  EXPECT_EQ(tiny.tokens(), 65);
  EXPECT_EQ(find_arch("vit-l-14").depth, 24);
  EXPECT_EQ(find_arch("vit-l-14").dim, 1024);
  EXPECT_THROW(find_arch("resnet"), ValidationError);
}

TEST(Backbone, ForwardMatchesNaiveOracle) {
  const ArchSpec& arch = find_arch("ref-tiny");
  const Backbone model = fully_random_backbone(3, arch);
  const auto inputs = wepe::fixtures::random_inputs(arch, 3, 11);
  const auto raw = extract_raw_features(model, inputs);
  const auto unit = extract_features(model, inputs);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto ref = naive_forward(model, inputs[i]);
    ASSERT_EQ(raw[i].size(), static_cast<Eigen::Index>(ref.size()));
    for (std::size_t d = 0; d < ref.size(); ++d) EXPECT_NEAR(raw[i](d), ref[d], 1e-9);
    EXPECT_NEAR(unit[i].norm(), 1.0, 1e-12);
    EXPECT_NEAR(unit[i].dot(raw[i]), raw[i].norm(), 1e-9);
  }
}

TEST(Backbone, ParallelExtractionIsOrderStable) {
  const Backbone model = make_reference_backbone(1);
  const auto inputs = wepe::fixtures::random_inputs(model.arch(), 5, 4);
  const auto a = extract_features(model, inputs, 1);
  const auto b = extract_features(model, inputs, 3);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Backbone, PositionalResamplingIsExactOnAffineFields) {
  ArchSpec arch = find_arch("ref-tiny");
  arch.id = "ref-tiny-24";
  arch.image_size = 24;  // 6x6 grid against the stored 8x8
  Backbone model = fully_random_backbone(5, arch);
  Tensor pos = model.param("pos_embed");
  const int G = arch.pos_grid, D = arch.dim;
  for (int y = 0; y < G; ++y)
    for (int x = 0; x < G; ++x)
      for (int d = 0; d < D; ++d) pos.values(0, (1 + y * G + x) * D + d) = 0.3 * y - 0.7 * x + 0.01 * d;
  model.set_param("pos_embed", pos);
  const RowMatrix out = positional_embedding(model);
  ASSERT_EQ(out.rows(), 37);
  const double ratio = static_cast<double>(G) / arch.grid();
  for (int y = 0; y < arch.grid(); ++y)
    for (int x = 0; x < arch.grid(); ++x) {
      const double sy = std::clamp((y + 0.5) * ratio - 0.5, 0.0, G - 1.0);
      const double sx = std::clamp((x + 0.5) * ratio - 0.5, 0.0, G - 1.0);
      for (int d = 0; d < D; ++d) EXPECT_NEAR(out(1 + y * arch.grid() + x, d), 0.3 * sy - 0.7 * sx + 0.01 * d, 1e-12);
    }
  EXPECT_EQ(out.row(0), pos.values.block(0, 0, 1, D));
}

TEST(Backbone, SaveLoadRoundTrip) {
  TempDir dir;
  const Backbone model = make_reference_backbone(9);
  save_backbone(model, dir / "m.safetensors");
  const Backbone loaded = load_backbone(dir / "m.safetensors", "ref-tiny");
  EXPECT_TRUE(loaded == model);
  EXPECT_EQ(loaded.fingerprint(), model.fingerprint());
  EXPECT_NE(make_reference_backbone(10).fingerprint(), model.fingerprint());
}

TEST(Backbone, LoadErrorsNameTheProblem) {
  TempDir dir;
  EXPECT_THROW(load_backbone(dir / "absent.safetensors", "ref-tiny"), MissingFileError);

  TensorMap tensors = make_reference_backbone(0).all_params();
  tensors.at("blocks.2.mlp.fc1.weight") = Tensor({64, 32});
  write_archive(dir / "bad.safetensors", tensors);
  try {
    load_backbone(dir / "bad.safetensors", "ref-tiny");
    FAIL() << "expected a shape mismatch";
  } catch (const ShapeMismatchError& e) {
    EXPECT_EQ(e.tensor(), "blocks.2.mlp.fc1.weight");
  }

  tensors = make_reference_backbone(0).all_params();
  tensors.erase("norm.bias");
  write_archive(dir / "missing.safetensors", tensors);
  EXPECT_THROW(load_backbone(dir / "missing.safetensors", "ref-tiny"), ShapeMismatchError);

  tensors = make_reference_backbone(0).all_params();
  tensors.emplace("extra", Tensor({2}));
  write_archive(dir / "extra.safetensors", tensors);
  EXPECT_THROW(load_backbone(dir / "extra.safetensors", "ref-tiny"), ValidationError);

  save_backbone(make_reference_backbone(0), dir / "ok.safetensors");
  EXPECT_THROW(load_backbone(dir / "ok.safetensors", "vit-s-14"), ShapeMismatchError);
}

TEST(Backbone, RejectsWrongInputSize) {
  const Backbone model = make_reference_backbone(0);
  PreprocessedImage img{"x", 3, 16, 16, std::vector<double>(3 * 16 * 16, 0.0)};
  EXPECT_THROW(extract_features(model, std::span<const PreprocessedImage>(&img, 1)), ValidationError);
  EXPECT_THROW(extract_features(model, std::span<const PreprocessedImage>()), ValidationError);
}

TEST(Backbone, SetParamRefreshesBlockStatistics) {
  Backbone model = make_reference_backbone(0);
  const double before = model.block(1).mean_abs_param;
  Tensor w = model.param("blocks.1.attn.q.weight");
  w.values *= 10.0;
  model.set_param("blocks.1.attn.q.weight", w);
  EXPECT_GT(model.block(1).mean_abs_param, before);
  EXPECT_THROW(model.set_param("blocks.1.attn.q.weight", Tensor({3})), ShapeMismatchError);
}

TEST(Backbone, TruncationKeepsLeadingBlocks) {
  const Backbone model = make_reference_backbone(0);
  const Backbone cut = truncate_blocks(model, 2);
  EXPECT_EQ(cut.block_count(), 2u);
  EXPECT_EQ(cut.arch_id(), "ref-tiny:2");
  EXPECT_TRUE(cut.param("blocks.1.mlp.fc2.weight") == model.param("blocks.1.mlp.fc2.weight"));
  EXPECT_THROW(truncate_blocks(model, 0), ValidationError);
  EXPECT_THROW(truncate_blocks(model, 5), ValidationError);
}

namespace {

// Renames canonical tensors into the Hugging Face layout.
TensorMap to_hf_names(const TensorMap& canon) {
  TensorMap out;
  for (const auto& [name, t] : canon) {
    std::string n = name;
    if (n == "cls_token") n = "embeddings.cls_token";
    else if (n == "pos_embed") n = "embeddings.position_embeddings";
    else if (n.starts_with("patch_embed.")) n = "embeddings.patch_embeddings.projection." + n.substr(12);
    else if (n.starts_with("norm.")) n = "layernorm." + n.substr(5);
    else {
      const std::size_t dot = n.find('.', 7);
      const std::string idx = n.substr(7, dot - 7);
      std::string local = n.substr(dot + 1);
      const std::string stem = "encoder.layer." + idx + ".";
      if (local.starts_with("attn.q.")) local = "attention.attention.query." + local.substr(7);
      else if (local.starts_with("attn.k.")) local = "attention.attention.key." + local.substr(7);
      else if (local.starts_with("attn.v.")) local = "attention.attention.value." + local.substr(7);
      else if (local.starts_with("attn.proj.")) local = "attention.output.dense." + local.substr(10);
      else if (local == "ls1") local = "layer_scale1.lambda1";
      else if (local == "ls2") local = "layer_scale2.lambda1";
      n = stem + local;
    }
    out.emplace(n, t);
  }
  out.emplace("embeddings.mask_token", Tensor({1, 32}));
  return out;
}

// Original layout: fused qkv and ".gamma" layer scales.
TensorMap to_fused_names(const TensorMap& canon, int depth) {
  TensorMap out;
  for (const auto& [name, t] : canon) {
    if (name.find(".attn.q.") != std::string::npos || name.find(".attn.k.") != std::string::npos ||
        name.find(".attn.v.") != std::string::npos)
      continue;
    std::string n = name;
    if (n.starts_with("patch_embed.")) n = "patch_embed.proj." + n.substr(12);
    if (n.ends_with(".ls1") || n.ends_with(".ls2")) n += ".gamma";
    out.emplace(n, t);
  }
  for (int b = 0; b < depth; ++b) {
    const std::string p = "blocks." + std::to_string(b) + ".attn.";
    const Tensor& q = canon.at(p + "q.weight");
    Tensor w({3 * q.shape[0], q.shape[1]});
    w.values << q.values, canon.at(p + "k.weight").values, canon.at(p + "v.weight").values;
    Tensor bias({3 * q.shape[0]});
    bias.values << canon.at(p + "q.bias").values, canon.at(p + "k.bias").values, canon.at(p + "v.bias").values;
    out.emplace(p + "qkv.weight", w);
    out.emplace(p + "qkv.bias", bias);
  }
  return out;
}

}  // namespace

TEST(Backbone, ConvertsHuggingFaceAndFusedLayouts) {
  TempDir dir;
  const ArchSpec& arch = find_arch("ref-tiny");
  const Backbone model = fully_random_backbone(2, arch);
  const auto inputs = wepe::fixtures::random_inputs(arch, 2, 8);
  const auto expected = extract_features(model, inputs);

  for (const auto& [tag, tensors] : {std::pair{"hf", to_hf_names(model.all_params())},
                                     std::pair{"fused", to_fused_names(model.all_params(), arch.depth)}}) {
    write_archive(dir / (std::string(tag) + ".src"), tensors, {}, DType::f32);
    convert_dinov2_checkpoint(dir / (std::string(tag) + ".src"), dir / (std::string(tag) + ".dst"), "ref-tiny");
    const Backbone converted = load_backbone(dir / (std::string(tag) + ".dst"), "ref-tiny");
    const auto got = extract_features(converted, inputs);
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR((got[i] - expected[i]).norm(), 0.0, 1e-5) << tag;
  }

  TensorMap bad = to_hf_names(model.all_params());
  bad.emplace("encoder.layer.0.mystery.weight", Tensor({2}));
  write_archive(dir / "bad.src", bad);
  EXPECT_THROW(convert_dinov2_checkpoint(dir / "bad.src", dir / "bad.dst", "ref-tiny"), ValidationError);
  EXPECT_FALSE(std::filesystem::exists(dir / "bad.dst"));
}

TEST(Backbone, CacheDirHonoursEnvironment) {
  ::setenv("WEPE_CACHE_DIR", "/tmp/wepe-cache-test", 1);
  EXPECT_EQ(cache_dir(), std::filesystem::path("/tmp/wepe-cache-test"));
  ::unsetenv("WEPE_CACHE_DIR");
  EXPECT_TRUE(cache_dir().string().ends_with(".cache/wepe"));
}
