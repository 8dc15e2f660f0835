#include "wepe/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "wepe/error.hpp"

namespace wepe {
namespace {

using nlohmann::json;

std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "F64") return 8;
  if (dtype == "F32") return 4;
  if (dtype == "F16" || dtype == "BF16") return 2;
  throw ValidationError("unsupported tensor dtype: " + dtype);
}

double half_to_double(std::uint16_t h) {
  const int sign = (h >> 15) & 1;
  const int exponent = (h >> 10) & 0x1f;
  const int mantissa = h & 0x3ff;
  double value;
  if (exponent == 0) {
    value = std::ldexp(static_cast<double>(mantissa), -24);
  } else if (exponent == 31) {
    value = mantissa ? std::numeric_limits<double>::quiet_NaN() : std::numeric_limits<double>::infinity();
  } else {
    value = std::ldexp(static_cast<double>(mantissa | 0x400), exponent - 25);
  }
  return sign ? -value : value;
}

double bf16_to_double(std::uint16_t b) {
  const std::uint32_t bits = static_cast<std::uint32_t>(b) << 16;
  return static_cast<double>(std::bit_cast<float>(bits));
}

}  // namespace

TensorArchive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFileError(path.string());

  std::uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
  if (!in || header_len == 0 || header_len > (std::uint64_t{1} << 30)) {
    throw ValidationError("not a tensor archive (bad header length): " + path.string());
  }
  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw ValidationError("truncated archive header: " + path.string());

  json meta;
  try {
    meta = json::parse(header);
  } catch (const json::exception& e) {
    throw ValidationError("archive header is not valid JSON (" + path.string() + "): " + e.what());
  }

  std::vector<char> payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  TensorArchive archive;
  for (auto it = meta.begin(); it != meta.end(); ++it) {
    if (it.key() == "__metadata__") {
      for (auto m = it->begin(); m != it->end(); ++m) archive.metadata[m.key()] = m->get<std::string>();
      continue;
    }
    const auto& entry = *it;
    if (!entry.contains("dtype") || !entry.contains("shape") || !entry.contains("data_offsets")) {
      throw ValidationError("archive entry '" + it.key() + "' lacks dtype/shape/data_offsets");
    }
    const auto dtype = entry["dtype"].get<std::string>();
    const auto shape = entry["shape"].get<std::vector<std::int64_t>>();
    const auto offsets = entry["data_offsets"].get<std::vector<std::uint64_t>>();
    const std::size_t width = dtype_size(dtype);
    const auto n = static_cast<std::uint64_t>(Tensor::count(shape));
    if (offsets.size() != 2 || offsets[1] < offsets[0] || offsets[1] - offsets[0] != n * width ||
        offsets[1] > payload.size()) {
      throw ValidationError("archive entry '" + it.key() + "' has inconsistent data_offsets");
    }

    Tensor t(shape);
    const char* src = payload.data() + offsets[0];
    double* dst = t.data();
    for (std::uint64_t i = 0; i < n; ++i) {
      if (dtype == "F64") {
        std::memcpy(dst + i, src + i * 8, 8);
      } else if (dtype == "F32") {
        float f;
        std::memcpy(&f, src + i * 4, 4);
        dst[i] = f;
      } else {
        std::uint16_t h;
        std::memcpy(&h, src + i * 2, 2);
        dst[i] = dtype == "F16" ? half_to_double(h) : bf16_to_double(h);
      }
    }
    archive.tensors.emplace(it.key(), std::move(t));
  }
  return archive;
}

void write_archive(const std::filesystem::path& path, const TensorMap& tensors,
                   const std::map<std::string, std::string>& metadata, DType dtype) {
  const std::size_t width = dtype == DType::f64 ? 8 : 4;
  json header = json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    const auto bytes = static_cast<std::uint64_t>(t.numel()) * width;
    header[name] = {{"dtype", dtype == DType::f64 ? "F64" : "F32"},
                    {"shape", t.shape},
                    {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  if (!metadata.empty()) header["__metadata__"] = metadata;

  std::string text = header.dump();
  // Pad so the payload starts 8-byte aligned.
  while (text.size() % 8 != 0) text.push_back(' ');

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeFailure("cannot write archive: " + path.string());
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : tensors) {
    if (dtype == DType::f64) {
      out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel() * 8));
    } else {
      for (std::int64_t i = 0; i < t.numel(); ++i) {
        const auto f = static_cast<float>(t.data()[i]);
        out.write(reinterpret_cast<const char*>(&f), 4);
      }
    }
  }
  if (!out) throw RuntimeFailure("failed writing archive: " + path.string());
}

}  // namespace wepe
