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

#include <cstdint>
#include <random>
#include <vector>

#include "fedprompt/errors.hpp"

namespace fedprompt {

using Rng = std::mt19937_64;

// Streams derived from the master seed. Each consumer of randomness gets its
// own stream so that adding a new consumer never shifts an existing one.
enum class SeedPurpose : std::uint64_t {
  kBackbone = 1,
  kPromptInit = 2,
  kData = 3,
  kPartition = 4,
  kHeldout = 5,
  kWarmup = 6,
  kSampling = 7,
  kLocalTrain = 8,
  kPrivacy = 9,
  kProbe = 10,
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Counter-based derivation: (master, purpose, a, b) -> independent seed.
inline std::uint64_t derive_seed(std::uint64_t master, SeedPurpose purpose,
                                 std::uint64_t a = 0, std::uint64_t b = 0) {
  std::uint64_t h = splitmix64(master);
  h = splitmix64(h ^ static_cast<std::uint64_t>(purpose));
  h = splitmix64(h ^ a);
  h = splitmix64(h ^ (b + 0x632BE59BD9B4E019ULL));
  return h;
}

inline Rng make_rng(std::uint64_t master, SeedPurpose purpose, std::uint64_t a = 0,
                    std::uint64_t b = 0) {
  return Rng(derive_seed(master, purpose, a, b));
}

// Laplace(0, scale) as the difference of two unit exponentials.
inline double sample_laplace(Rng& rng, double scale) {
  if (scale < 0.0) throw ConfigError("Laplace scale must be non-negative");
  if (scale == 0.0) return 0.0;
  std::exponential_distribution<double> exp1(1.0);
  return scale * (exp1(rng) - exp1(rng));
}

// Symmetric Dirichlet(alpha * 1_n) via normalized gamma draws.
inline std::vector<double> sample_dirichlet(Rng& rng, std::size_t n, double alpha) {
  if (!(alpha > 0.0)) throw ConfigError("Dirichlet concentration must be positive");
  std::gamma_distribution<double> gamma(alpha, 1.0);
  std::vector<double> out(n);
  double total = 0.0;
  for (double& v : out) total += (v = gamma(rng));
  if (total <= 0.0) {
    // Every draw underflowed (tiny alpha): put the mass on one uniform pick.
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    out.assign(n, 0.0);
    out[pick(rng)] = 1.0;
    return out;
  }
  for (double& v : out) v /= total;
  return out;
}

}  // namespace fedprompt
