#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "wepe/tensor.hpp"

namespace wepe {

enum class DType { f32, f64 };

/// Named-tensor archive: an 8-byte little-endian header length, a JSON header
/// mapping each tensor name to {"dtype", "shape", "data_offsets": [begin, end)},
/// then the raw little-endian payload. The layout is the safetensors layout, so
/// public checkpoints published in that format can be read directly.
struct TensorArchive {
  TensorMap tensors;
  std::map<std::string, std::string> metadata;
};

/// Reads F64, F32, F16 and BF16 payloads; all are widened to double exactly.
TensorArchive read_archive(const std::filesystem::path& path);

void write_archive(const std::filesystem::path& path, const TensorMap& tensors,
                   const std::map<std::string, std::string>& metadata = {}, DType dtype = DType::f64);

}  // namespace wepe
