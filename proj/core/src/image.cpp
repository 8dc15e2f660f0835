#include "wepe/image.hpp"

#include <cmath>
#include <limits>

#include "wepe/error.hpp"

namespace wepe {

double psnr(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw ValidationError("psnr: image shapes differ");
  double se = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const double d = static_cast<double>(a.pixels[i]) - b.pixels[i];
    se += d * d;
  }
  if (se == 0.0) return std::numeric_limits<double>::infinity();
  const double mse = se / static_cast<double>(a.pixels.size());
  return 10.0 * std::log10(1.0 / mse);
}

}  // namespace wepe
