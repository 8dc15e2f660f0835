#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace wepe {

/// Planar (CHW) image with float samples in [0, 1].
struct Image {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int c, int h, int w, float fill = 0.0f)
      : channels(c), height(h), width(w), pixels(static_cast<std::size_t>(c) * h * w, fill) {}

  std::size_t index(int c, int y, int x) const {
    return (static_cast<std::size_t>(c) * height + y) * width + x;
  }
  float& at(int c, int y, int x) { return pixels[index(c, y, x)]; }
  float at(int c, int y, int x) const { return pixels[index(c, y, x)]; }
  bool same_shape(const Image& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }

  friend bool operator==(const Image&, const Image&) = default;
};

/// Backbone-ready input: standardized CHW values at the architecture's input size.
struct PreprocessedImage {
  std::string source_id;
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> values;

  double at(int c, int y, int x) const {
    return values[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
};

/// Peak signal-to-noise ratio in dB for [0,1] images; +inf when identical.
double psnr(const Image& a, const Image& b);

}  // namespace wepe
