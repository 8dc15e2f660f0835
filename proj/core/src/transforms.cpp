#include "wepe/transforms.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "wepe/error.hpp"
#include "wepe/rng.hpp"

namespace wepe {

std::string_view to_string(DegradationKind kind) {
  switch (kind) {
    case DegradationKind::jpeg: return "jpeg";
    case DegradationKind::blur: return "blur";
    case DegradationKind::noise: return "noise";
    case DegradationKind::sda: return "sda";
    case DegradationKind::fda: return "fda";
  }
  return "jpeg";
}

DegradationKind parse_degradation_kind(std::string_view text) {
  if (text == "jpeg") return DegradationKind::jpeg;
  if (text == "blur") return DegradationKind::blur;
  if (text == "noise") return DegradationKind::noise;
  if (text == "sda") return DegradationKind::sda;
  if (text == "fda") return DegradationKind::fda;
  throw ValidationError("unknown degradation kind '" + std::string(text) + "'");
}

DegradationSpec DegradationSpec::attack(DegradationKind kind, double sigma) {
  return {kind, sigma, ApplyTo::generated_only};
}

DegradationSpec DegradationSpec::parse(std::string_view text) {
  const auto colon = text.find(':');
  if (colon == std::string_view::npos) throw ValidationError("degradation must be kind:strength, got '" + std::string(text) + "'");
  const DegradationKind kind = parse_degradation_kind(text.substr(0, colon));
  double strength = 0.0;
  try {
    std::size_t used = 0;
    const std::string value(text.substr(colon + 1));
    strength = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
  } catch (const std::exception&) {
    throw ValidationError("invalid degradation strength in '" + std::string(text) + "'");
  }
  DegradationSpec spec{kind, strength, ApplyTo::all};
  if (kind == DegradationKind::sda || kind == DegradationKind::fda) spec.apply_to = ApplyTo::generated_only;
  return spec;
}

std::string DegradationSpec::to_string() const {
  std::string s(wepe::to_string(kind));
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", strength);
  return s + ":" + buf;
}

namespace {

cv::Mat to_bgr8(const Image& image) {
  cv::Mat out(image.height, image.width, CV_8UC3);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const float v = image.at(image.channels == 3 ? c : 0, y, x);
        out.at<cv::Vec3b>(y, x)[2 - c] = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
      }
  return out;
}

int mirror(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

void check_sigma(double sigma, const char* what) {
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw ValidationError(std::string(what) + ": sigma must be >= 0");
}

}  // namespace

Image jpeg_degrade(const Image& image, int quality) {
  if (quality < 1 || quality > 100) throw ValidationError("jpeg quality must lie in [1, 100]");
  if (image.channels != 3 && image.channels != 1) throw ValidationError("jpeg_degrade expects 1 or 3 channels");
  std::vector<unsigned char> buf;
  if (!cv::imencode(".jpg", to_bgr8(image), buf, {cv::IMWRITE_JPEG_QUALITY, quality})) {
    throw RuntimeFailure("JPEG encoding failed");
  }
  cv::Mat decoded = cv::imdecode(buf, cv::IMREAD_COLOR);
  if (decoded.empty()) throw RuntimeFailure("JPEG decoding failed");
  Image out(image.channels, image.height, image.width);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x) {
      const auto px = decoded.at<cv::Vec3b>(y, x);
      if (image.channels == 3) {
        for (int c = 0; c < 3; ++c) out.at(c, y, x) = px[2 - c] / 255.0f;
      } else {
        out.at(0, y, x) = px[1] / 255.0f;
      }
    }
  return out;
}

Image gaussian_blur(const Image& image, double sigma) {
  check_sigma(sigma, "gaussian_blur");
  if (sigma == 0.0) return image;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(2 * radius + 1);
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    total += kernel[i + radius];
  }
  for (double& k : kernel) k /= total;

  Image tmp(image.channels, image.height, image.width);
  Image out(image.channels, image.height, image.width);
  for (int c = 0; c < image.channels; ++c) {
    for (int y = 0; y < image.height; ++y)
      for (int x = 0; x < image.width; ++x) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) acc += kernel[i + radius] * image.at(c, y, mirror(x + i, image.width));
        tmp.at(c, y, x) = static_cast<float>(acc);
      }
    for (int y = 0; y < image.height; ++y)
      for (int x = 0; x < image.width; ++x) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) acc += kernel[i + radius] * tmp.at(c, mirror(y + i, image.height), x);
        out.at(c, y, x) = static_cast<float>(acc);
      }
  }
  return out;
}

Image gaussian_noise(const Image& image, double sigma, std::uint64_t seed) {
  check_sigma(sigma, "gaussian_noise");
  if (sigma == 0.0) return image;
  Engine eng = make_engine({seed, 0x6e6f697365ULL});
  std::normal_distribution<double> normal(0.0, sigma);
  Image out = image;
  for (float& v : out.pixels) v = static_cast<float>(std::clamp(static_cast<double>(v) + normal(eng), 0.0, 1.0));
  return out;
}

Image fda_attack(const Image& image, double sigma, std::uint64_t seed) {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ValidationError("fda_attack: sigma must be > 0");
  Engine eng = make_engine({seed, 0x666461ULL});
  std::normal_distribution<double> normal(0.0, 1.0);
  Image out(image.channels, image.height, image.width);
  for (int c = 0; c < image.channels; ++c) {
    cv::Mat plane(image.height, image.width, CV_64F);
    for (int y = 0; y < image.height; ++y)
      for (int x = 0; x < image.width; ++x) plane.at<double>(y, x) = image.at(c, y, x);
    cv::Mat spectrum;
    cv::dft(plane, spectrum, cv::DFT_COMPLEX_OUTPUT);

    double energy = 0.0;
    for (int y = 0; y < spectrum.rows; ++y)
      for (int x = 0; x < spectrum.cols; ++x) {
        const auto z = spectrum.at<cv::Vec2d>(y, x);
        energy += z[0] * z[0] + z[1] * z[1];
      }
    const double rms = std::sqrt(energy / static_cast<double>(spectrum.total()));
    const double stddev = sigma * rms;
    for (int y = 0; y < spectrum.rows; ++y)
      for (int x = 0; x < spectrum.cols; ++x) {
        auto& z = spectrum.at<cv::Vec2d>(y, x);
        z[0] += stddev * normal(eng);
        z[1] += stddev * normal(eng);
      }

    cv::Mat restored;
    cv::dft(spectrum, restored, cv::DFT_INVERSE | cv::DFT_SCALE | cv::DFT_COMPLEX_OUTPUT);
    for (int y = 0; y < image.height; ++y)
      for (int x = 0; x < image.width; ++x) {
        const double v = restored.at<cv::Vec2d>(y, x)[0];
        if (!std::isfinite(v)) throw RuntimeFailure("fda_attack produced a non-finite sample");
        out.at(c, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
  }
  return out;
}

Image apply_degradation(const Image& image, const DegradationSpec& spec, std::optional<std::uint64_t> seed) {
  auto need_seed = [&]() -> std::uint64_t {
    if (!seed) throw ValidationError(std::string(to_string(spec.kind)) + " is random and needs a seed");
    return *seed;
  };
  switch (spec.kind) {
    case DegradationKind::jpeg: return jpeg_degrade(image, static_cast<int>(std::lround(spec.strength)));
    case DegradationKind::blur: return gaussian_blur(image, spec.strength);
    case DegradationKind::noise:
    case DegradationKind::sda: return gaussian_noise(image, spec.strength, need_seed());
    case DegradationKind::fda: return fda_attack(image, spec.strength, need_seed());
  }
  return image;
}

}  // namespace wepe
