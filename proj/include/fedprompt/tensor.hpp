//
// Copyright 2026 The FedPrompt Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "fedprompt/errors.hpp"

namespace fedprompt {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Dense row-major array of doubles, rank 1 to 3, with an optional gradient
// slot. Matrices are rank 2; row vectors are stored as 1xn.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(validated(std::move(shape))), data_(element_count(shape_), fill) {}

  Tensor(Shape shape, std::vector<double> data)
      : shape_(validated(std::move(shape))), data_(std::move(data)) {
    if (data_.size() != element_count(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(shape_));
    }
  }

  // Builds a rank-2 tensor from nested row literals.
  static Tensor from_rows(
      std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged row literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  static Tensor row(std::span<const double> values) {
    return Tensor({1, values.size()},
                  std::vector<double>(values.begin(), values.end()));
  }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Rows/cols of a rank-2 view. Rank-1 tensors read as a single row.
  std::size_t rows() const {
    if (rank() == 1) return 1;
    if (rank() != 2) throw DimensionError("rows() on rank-3 tensor");
    return shape_[0];
  }
  std::size_t cols() const {
    if (rank() == 1) return shape_[0];
    if (rank() != 2) throw DimensionError("cols() on rank-3 tensor");
    return shape_[1];
  }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<double> row_span(std::size_t r) {
    return std::span<double>(data_).subspan(r * cols(), cols());
  }
  std::span<const double> row_span(std::size_t r) const {
    return std::span<const double>(data_).subspan(r * cols(), cols());
  }

  bool requires_grad() const { return requires_grad_; }

  // Enabling allocates a zeroed gradient slot; disabling drops it.
  void set_requires_grad(bool on) {
    requires_grad_ = on;
    if (on) {
      grad_.assign(data_.size(), 0.0);
    } else {
      grad_.clear();
      grad_.shrink_to_fit();
    }
  }

  bool has_grad() const { return requires_grad_; }
  std::span<double> grad() { return grad_; }
  std::span<const double> grad() const { return grad_; }

  void zero_grad() { std::fill(grad_.begin(), grad_.end(), 0.0); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](double v) { return std::isfinite(v); }) &&
           std::all_of(grad_.begin(), grad_.end(),
                       [](double v) { return std::isfinite(v); });
  }

  // Value equality (gradients ignored).
  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

  static std::size_t element_count(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           std::multiplies<>());
  }

 private:
  static Shape validated(Shape shape) {
    if (shape.empty() || shape.size() > 3) {
      throw DimensionError("tensor rank must be 1..3, got " +
                           std::to_string(shape.size()));
    }
    for (std::size_t e : shape) {
      if (e == 0) throw DimensionError("zero extent in shape " + shape_string(shape));
    }
    return shape;
  }

  Shape shape_;
  std::vector<double> data_;
  bool requires_grad_ = false;
  std::vector<double> grad_;
};

// FNV-1a over the raw bytes of every value; used to certify frozen weights.
inline std::uint64_t checksum(std::span<const double> values,
                              std::uint64_t seed = 1469598103934665603ULL) {
  std::uint64_t h = seed;
  for (double v : values) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(&v);
    for (std::size_t i = 0; i < sizeof(double); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  }
  return h;
}

}  // namespace fedprompt
