#include "wepe/vit.hpp"

#include <cmath>

#include "wepe/error.hpp"

namespace wepe {

RowMatrix image_to_patches(const PreprocessedImage& image, int patch) {
  const int gh = image.height / patch;
  const int gw = image.width / patch;
  RowMatrix out(gh * gw, image.channels * patch * patch);
  for (int py = 0; py < gh; ++py) {
    for (int px = 0; px < gw; ++px) {
      const int r = py * gw + px;
      int c_out = 0;
      for (int c = 0; c < image.channels; ++c)
        for (int ky = 0; ky < patch; ++ky)
          for (int kx = 0; kx < patch; ++kx) out(r, c_out++) = image.at(c, py * patch + ky, px * patch + kx);
    }
  }
  return out;
}

void check_input(const ArchSpec& arch, const PreprocessedImage& image) {
  if (image.channels != 3) {
    throw ValidationError("input '" + image.source_id + "' has " + std::to_string(image.channels) +
                          " channels; expected 3");
  }
  if (image.height != arch.image_size || image.width != arch.image_size) {
    throw ValidationError("input '" + image.source_id + "' is " + std::to_string(image.height) + "x" +
                          std::to_string(image.width) + "; " + arch.id + " expects " +
                          std::to_string(arch.image_size) + "x" + std::to_string(arch.image_size));
  }
  if (image.values.size() != static_cast<std::size_t>(3) * image.height * image.width) {
    throw ValidationError("input '" + image.source_id + "' has inconsistent value count");
  }
}

RowMatrix positional_embedding(const Backbone& model) {
  const ArchSpec& arch = model.arch();
  const RowMatrix& stored = model.param("pos_embed").values;  // [1, (1 + G*G) * D]
  const int dim = arch.dim;
  const int G = arch.pos_grid;
  const int g = arch.grid();
  RowMatrix out(1 + g * g, dim);
  out.row(0) = stored.block(0, 0, 1, dim);
  auto src = [&](int y, int x) { return stored.block(0, static_cast<Eigen::Index>(1 + y * G + x) * dim, 1, dim); };
  if (g == G) {
    for (int i = 0; i < g * g; ++i) out.row(1 + i) = stored.block(0, static_cast<Eigen::Index>(1 + i) * dim, 1, dim);
    return out;
  }
  const double ratio = static_cast<double>(G) / g;
  for (int y = 0; y < g; ++y) {
    const double sy = std::clamp((y + 0.5) * ratio - 0.5, 0.0, G - 1.0);
    const int y0 = static_cast<int>(std::floor(sy));
    const int y1 = std::min(y0 + 1, G - 1);
    const double wy = sy - y0;
    for (int x = 0; x < g; ++x) {
      const double sx = std::clamp((x + 0.5) * ratio - 0.5, 0.0, G - 1.0);
      const int x0 = static_cast<int>(std::floor(sx));
      const int x1 = std::min(x0 + 1, G - 1);
      const double wx = sx - x0;
      out.row(1 + y * g + x) = (1 - wy) * ((1 - wx) * src(y0, x0) + wx * src(y0, x1)) +
                               wy * ((1 - wx) * src(y1, x0) + wx * src(y1, x1));
    }
  }
  return out;
}

namespace {

class GraphBuilder {
 public:
  GraphBuilder(const Backbone& model, const GraphOptions& options) : model_(model), options_(options) {}

  ag::Var param(const std::string& name) const {
    if (options_.param_vars) {
      auto it = options_.param_vars->find(name);
      if (it != options_.param_vars->end()) return it->second;
    }
    return ag::borrow(model_.param(name).values);
  }

  ag::Var projection(const ag::Var& x, const std::string& stem) const {
    ag::Var out = ag::linear(x, param(stem + ".weight"), param(stem + ".bias"));
    if (options_.adapters) {
      auto it = options_.adapters->find(stem + ".weight");
      if (it != options_.adapters->end()) {
        const LowRankVars& lr = it->second;
        ag::Var low = ag::linear(ag::linear(x, lr.a), lr.b);
        out = ag::add(out, ag::scale(low, lr.scale));
      }
    }
    return out;
  }

  ag::Var attention(const ag::Var& x, const std::string& p) const {
    const int heads = model_.arch().heads;
    const int dh = model_.arch().dim / heads;
    ag::Var q = projection(x, p + "attn.q");
    ag::Var k = projection(x, p + "attn.k");
    ag::Var v = projection(x, p + "attn.v");
    std::vector<ag::Var> outs;
    outs.reserve(heads);
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int h = 0; h < heads; ++h) {
      ag::Var qh = ag::cols(q, h * dh, dh);
      ag::Var kh = ag::cols(k, h * dh, dh);
      ag::Var vh = ag::cols(v, h * dh, dh);
      ag::Var att = ag::softmax_rows(ag::scale(ag::matmul(qh, ag::transpose(kh)), inv));
      outs.push_back(ag::matmul(att, vh));
    }
    return projection(ag::hcat(outs), p + "attn.proj");
  }

  ag::Var mlp(const ag::Var& x, const std::string& p, std::size_t block) const {
    ag::Var h = ag::gelu(projection(x, p + "mlp.fc1"));
    if (options_.mlp_masks) {
      auto it = options_.mlp_masks->find(block);
      if (it != options_.mlp_masks->end()) h = ag::mul(h, ag::borrow(it->second));
    }
    return projection(h, p + "mlp.fc2");
  }

  ag::Var run(const PreprocessedImage& image) const {
    const ArchSpec& arch = model_.arch();
    check_input(arch, image);
    const double eps = arch.ln_eps;

    ag::Var patches = ag::constant(image_to_patches(image, arch.patch));
    ag::Var tokens = ag::linear(patches, param("patch_embed.weight"), param("patch_embed.bias"));
    ag::Var cls = param("cls_token");  // [1, dim]
    ag::Var x = ag::vcat({cls, tokens});

    ag::Var pos;
    if (options_.param_vars && options_.param_vars->count("pos_embed")) {
      pos = reshape_pos(options_.param_vars->at("pos_embed"));
    } else {
      pos = ag::constant(positional_embedding(model_));
    }
    x = ag::add(x, pos);

    for (std::size_t b = 0; b < model_.block_count(); ++b) {
      const std::string p = block_prefix(b);
      ag::Var h = ag::layer_norm(x, param(p + "norm1.weight"), param(p + "norm1.bias"), eps);
      x = ag::add(x, ag::mul_row(attention(h, p), param(p + "ls1")));
      h = ag::layer_norm(x, param(p + "norm2.weight"), param(p + "norm2.bias"), eps);
      x = ag::add(x, ag::mul_row(mlp(h, p, b), param(p + "ls2")));
    }
    ag::Var cls_out = ag::row(x, 0);
    return ag::layer_norm(cls_out, param("norm.weight"), param("norm.bias"), eps);
  }

 private:
  // Trainable positional embeddings are only supported at the stored grid size.
  ag::Var reshape_pos(const ag::Var& flat) const {
    const ArchSpec& arch = model_.arch();
    if (arch.grid() != arch.pos_grid) {
      throw ValidationError("trainable positional embedding requires input grid == stored grid");
    }
    std::vector<ag::Var> rows;
    rows.reserve(arch.tokens());
    for (int t = 0; t < arch.tokens(); ++t) rows.push_back(ag::cols(flat, static_cast<Eigen::Index>(t) * arch.dim, arch.dim));
    return ag::vcat(rows);
  }

  const Backbone& model_;
  const GraphOptions& options_;
};

}  // namespace

ag::Var vit_forward(const Backbone& model, const PreprocessedImage& image, const GraphOptions& options) {
  return GraphBuilder(model, options).run(image);
}

}  // namespace wepe
