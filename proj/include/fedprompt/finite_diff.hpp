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

#include <cmath>
#include <functional>
#include <span>
#include <string>

#include "fedprompt/errors.hpp"
#include "fedprompt/tensor.hpp"

namespace fedprompt {

// Central-difference gradient of a scalar function:
//   (f(x + h e_i) - f(x - h e_i)) / 2h  for every coordinate i.
// Independent of the tape; used as the oracle for every backward pass.
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                               const Tensor& x, double h) {
  if (!(h > 0.0)) throw OracleError("finite-difference step must be positive");
  Tensor probe(x.shape(), x.values());
  Tensor grad(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(probe);
    probe[i] = orig - h;
    const double fm = f(probe);
    probe[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw OracleError("function not finite at coordinate " + std::to_string(i));
    }
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

// Largest entrywise |a - b| / max(|a|, |b|, floor). `floor` keeps entries
// that are both numerically zero from dominating the ratio.
inline double max_relative_error(std::span<const double> a,
                                 std::span<const double> b,
                                 double floor = 1e-8) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size() && i < b.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

}  // namespace fedprompt
