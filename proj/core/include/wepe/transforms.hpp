#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "wepe/image.hpp"

namespace wepe {

enum class DegradationKind { jpeg, blur, noise, sda, fda };
enum class ApplyTo { all, generated_only };

/// A degradation or evasion attack applied in [0, 1] pixel space.
struct DegradationSpec {
  DegradationKind kind = DegradationKind::jpeg;
  double strength = 0.0;  // jpeg quality, blur sigma, or noise sigma
  ApplyTo apply_to = ApplyTo::all;

  /// SDA/FDA default to generated-only with sigma 0.1.
  static DegradationSpec attack(DegradationKind kind, double sigma = 0.1);
  /// Parses "kind:strength", e.g. "jpeg:75", "blur:1.5", "sda:0.1".
  static DegradationSpec parse(std::string_view text);
  std::string to_string() const;

  bool applies_to(int label) const { return apply_to == ApplyTo::all || label == 0; }
};

std::string_view to_string(DegradationKind kind);
DegradationKind parse_degradation_kind(std::string_view text);

/// Encode/decode round trip through a baseline JPEG codec at quality q in [1, 100].
Image jpeg_degrade(const Image& image, int quality);

/// Separable Gaussian blur with radius ceil(3 sigma) and mirror padding
/// (edge sample not repeated). sigma == 0 is the identity.
Image gaussian_blur(const Image& image, double sigma);

/// Adds i.i.d. N(0, sigma^2) per sample and clips to [0, 1].
Image gaussian_noise(const Image& image, double sigma, std::uint64_t seed);

/// Frequency-domain attack: per channel, adds N(0, (sigma * rms|X|)^2) to the
/// real and imaginary parts of every DFT coefficient, inverts, keeps the real
/// part and clips to [0, 1].
Image fda_attack(const Image& image, double sigma, std::uint64_t seed);

/// Dispatches on spec.kind. `seed` is required for the random kinds; calling
/// them without one throws ValidationError.
Image apply_degradation(const Image& image, const DegradationSpec& spec, std::optional<std::uint64_t> seed);

}  // namespace wepe
