#pragma once

#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace wepe {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

/// Dense real tensor stored as a row-major matrix.
///
/// A tensor of shape [d0, d1, ..., dk] is stored with d0 rows and d1*...*dk
/// columns; a 1-D tensor of length n is a single row. This makes linear
/// weights ([out, in]) directly usable as matrices while keeping the logical
/// shape for checkpoint I/O.
struct Tensor {
  std::vector<std::int64_t> shape;
  RowMatrix values;

  Tensor() = default;
  explicit Tensor(std::vector<std::int64_t> dims) : shape(std::move(dims)) {
    values = RowMatrix::Zero(rows_for(shape), cols_for(shape));
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(values.size()); }
  double* data() { return values.data(); }
  const double* data() const { return values.data(); }

  static std::int64_t count(const std::vector<std::int64_t>& dims) {
    return std::accumulate(dims.begin(), dims.end(), std::int64_t{1}, std::multiplies<>());
  }
  static std::int64_t rows_for(const std::vector<std::int64_t>& dims) {
    return dims.size() <= 1 ? 1 : dims.front();
  }
  static std::int64_t cols_for(const std::vector<std::int64_t>& dims) {
    if (dims.empty()) return 1;
    if (dims.size() == 1) return dims.front();
    return count(dims) / dims.front();
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape == b.shape && a.values.rows() == b.values.rows() &&
           a.values.cols() == b.values.cols() && a.values == b.values;
  }
};

using TensorMap = std::map<std::string, Tensor>;

std::string shape_string(const std::vector<std::int64_t>& shape);

}  // namespace wepe
