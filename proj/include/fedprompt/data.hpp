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
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "fedprompt/errors.hpp"
#include "fedprompt/random.hpp"
#include "fedprompt/tensor.hpp"

namespace fedprompt {

// Per-domain transform of class centers: rotate every adjacent pixel pair by
// `angle` radians, then add `offset` to every pixel.
struct DomainTransform {
  double angle = 0.0;
  double offset = 0.0;
};

struct SyntheticSpec {
  std::size_t num_classes = 8;
  std::size_t train_per_class = 60;
  std::size_t test_per_class = 30;
  std::size_t image_size = 16;
  double separation = 1.0;  // std of class-center pixels
  double noise = 1.0;       // std of per-sample pixel noise
  std::vector<DomainTransform> domains;
};

struct Sample {
  Tensor image;  // image_size x image_size
  std::size_t label = 0;
  std::size_t domain = 0;
};

struct Dataset {
  std::size_t num_classes = 0;
  std::vector<Sample> train;
  std::vector<Sample> test;
};

inline void validate(const SyntheticSpec& spec) {
  if (spec.num_classes == 0) throw ConfigError("synthetic spec needs at least one class");
  if (spec.train_per_class == 0 || spec.test_per_class == 0) {
    throw ConfigError("synthetic spec needs samples in both splits");
  }
  if (spec.image_size == 0) throw ConfigError("synthetic image size must be positive");
  if (!(spec.separation >= 0.0) || !(spec.noise >= 0.0)) {
    throw ConfigError("separation and noise must be non-negative");
  }
}

inline Tensor apply_domain(const Tensor& center, const DomainTransform& t) {
  Tensor out(center.shape(), center.values());
  const double c = std::cos(t.angle), s = std::sin(t.angle);
  auto v = out.data();
  for (std::size_t i = 0; i + 1 < v.size(); i += 2) {
    const double a = v[i], b = v[i + 1];
    v[i] = c * a - s * b;
    v[i + 1] = s * a + c * b;
  }
  for (double& x : v) x += t.offset;
  return out;
}

// Gaussian class clusters rendered as images. Class centers are drawn first,
// then train samples class by class, then test samples; sample i of a class
// belongs to domain i mod |domains|. Noise draws do not depend on the domain
// transforms, so toggling them changes pixels only.
inline Dataset generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  validate(spec);
  Rng rng = make_rng(seed, SeedPurpose::kData);
  std::normal_distribution<double> unit(0.0, 1.0);
  const Shape shape{spec.image_size, spec.image_size};

  std::vector<Tensor> centers;
  centers.reserve(spec.num_classes);
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    Tensor t(shape);
    for (double& v : t.data()) v = spec.separation * unit(rng);
    centers.push_back(std::move(t));
  }
  const std::size_t num_domains = std::max<std::size_t>(1, spec.domains.size());
  std::vector<std::vector<Tensor>> domain_centers(num_domains);
  for (std::size_t dom = 0; dom < num_domains; ++dom) {
    for (const Tensor& c : centers) {
      domain_centers[dom].push_back(spec.domains.empty() ? c : apply_domain(c, spec.domains[dom]));
    }
  }

  Dataset ds;
  ds.num_classes = spec.num_classes;
  auto fill = [&](std::vector<Sample>& out, std::size_t per_class) {
    out.reserve(spec.num_classes * per_class);
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
      for (std::size_t i = 0; i < per_class; ++i) {
        const std::size_t dom = i % num_domains;
        Sample s{Tensor(shape), c, dom};
        const Tensor& center = domain_centers[dom][c];
        for (std::size_t p = 0; p < s.image.size(); ++p) {
          s.image[p] = center[p] + spec.noise * unit(rng);
        }
        out.push_back(std::move(s));
      }
    }
  };
  fill(ds.train, spec.train_per_class);
  fill(ds.test, spec.test_per_class);
  return ds;
}

inline std::vector<std::size_t> labels_of(const std::vector<Sample>& samples,
                                          const std::vector<std::size_t>& indices) {
  std::vector<std::size_t> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(samples[i].label);
  return out;
}

// Client shards over the train and test splits. Shard i holds indices into
// Dataset::train / Dataset::test.
struct Partition {
  std::vector<std::vector<std::size_t>> train;
  std::vector<std::vector<std::size_t>> test;

  std::size_t num_clients() const { return train.size(); }
};

namespace detail {

inline std::vector<std::vector<std::size_t>> indices_by_class(const std::vector<Sample>& s,
                                                              std::size_t num_classes) {
  std::vector<std::vector<std::size_t>> out(num_classes);
  for (std::size_t i = 0; i < s.size(); ++i) out[s[i].label].push_back(i);
  return out;
}

// Integer counts summing to `total` from proportions: floors first, then the
// leftover units go to the largest fractional parts (lowest index on ties).
inline std::vector<std::size_t> largest_remainder(const std::vector<double>& proportions,
                                                  std::size_t total) {
  const std::size_t n = proportions.size();
  std::vector<std::size_t> counts(n);
  std::vector<double> frac(n);
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double exact = proportions[i] * static_cast<double>(total);
    counts[i] = static_cast<std::size_t>(std::floor(exact));
    frac[i] = exact - static_cast<double>(counts[i]);
    assigned += counts[i];
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  for (std::size_t i = 0; assigned < total; ++i, ++assigned) ++counts[order[i % n]];
  // Floating error can overshoot by a unit; take it back from the largest.
  while (assigned > total) {
    auto it = std::max_element(counts.begin(), counts.end());
    --*it;
    --assigned;
  }
  return counts;
}

inline void deal(const std::vector<std::size_t>& pool, const std::vector<std::size_t>& counts,
                 const std::vector<std::size_t>& owners,
                 std::vector<std::vector<std::size_t>>& shards) {
  std::size_t pos = 0;
  for (std::size_t j = 0; j < owners.size(); ++j) {
    for (std::size_t r = 0; r < counts[j]; ++r) shards[owners[j]].push_back(pool[pos++]);
  }
}

}  // namespace detail

// Pathological split: every client holds exactly `classes_per_client`
// distinct labels. Slots are filled by cycling a shuffled class order, so
// each class is held by ceil/floor(n*k/|C|) clients and its samples are
// divided evenly among them.
inline Partition partition_pathological(const Dataset& ds, std::size_t num_clients,
                                        std::size_t classes_per_client, std::uint64_t seed) {
  const std::size_t C = ds.num_classes;
  if (num_clients == 0) throw ConfigError("pathological split needs clients");
  if (classes_per_client == 0 || classes_per_client > C) {
    throw ConfigError("classes_per_client must lie in 1.." + std::to_string(C));
  }
  if (num_clients * classes_per_client < C) {
    throw ConfigError("pathological split cannot cover all classes: n*k < |C|");
  }
  Rng rng = make_rng(seed, SeedPurpose::kPartition);
  std::vector<std::size_t> order(C);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<std::vector<std::size_t>> holders(C);
  for (std::size_t k = 0; k < num_clients; ++k) {
    for (std::size_t r = 0; r < classes_per_client; ++r) {
      holders[order[(k * classes_per_client + r) % C]].push_back(k);
    }
  }

  Partition part;
  part.train.resize(num_clients);
  part.test.resize(num_clients);
  auto split = [&](const std::vector<Sample>& samples,
                   std::vector<std::vector<std::size_t>>& shards) {
    auto by_class = detail::indices_by_class(samples, C);
    for (std::size_t c = 0; c < C; ++c) {
      auto& pool = by_class[c];
      const auto& owners = holders[c];
      if (pool.size() < owners.size()) {
        throw ConfigError("class " + std::to_string(c) + " has fewer samples than holders");
      }
      std::shuffle(pool.begin(), pool.end(), rng);
      std::vector<double> even(owners.size(), 1.0 / static_cast<double>(owners.size()));
      detail::deal(pool, detail::largest_remainder(even, pool.size()), owners, shards);
    }
  };
  split(ds.train, part.train);
  split(ds.test, part.test);
  for (auto& s : part.train) std::sort(s.begin(), s.end());
  for (auto& s : part.test) std::sort(s.begin(), s.end());
  return part;
}

// Dirichlet split: per class, client proportions ~ Dir(beta * 1_n), turned
// into counts by largest remainder. The test split reuses the same
// proportions. Draws are repeated (bounded) until every client holds at
// least `min_train_samples` training samples.
inline Partition partition_dirichlet(const Dataset& ds, std::size_t num_clients, double beta,
                                     std::uint64_t seed, std::size_t min_train_samples = 1) {
  if (!(beta > 0.0)) throw ConfigError("Dirichlet beta must be positive");
  if (num_clients == 0) throw ConfigError("Dirichlet split needs clients");
  const std::size_t C = ds.num_classes;
  if (num_clients * min_train_samples > ds.train.size()) {
    throw ConfigError("not enough training samples for the per-client minimum");
  }
  Rng rng = make_rng(seed, SeedPurpose::kPartition);
  auto train_by_class = detail::indices_by_class(ds.train, C);
  auto test_by_class = detail::indices_by_class(ds.test, C);
  std::vector<std::size_t> owners(num_clients);
  std::iota(owners.begin(), owners.end(), 0);

  constexpr int kMaxAttempts = 1000;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    Partition part;
    part.train.assign(num_clients, {});
    part.test.assign(num_clients, {});
    for (std::size_t c = 0; c < C; ++c) {
      const auto p = sample_dirichlet(rng, num_clients, beta);
      auto train_pool = train_by_class[c];
      auto test_pool = test_by_class[c];
      std::shuffle(train_pool.begin(), train_pool.end(), rng);
      std::shuffle(test_pool.begin(), test_pool.end(), rng);
      detail::deal(train_pool, detail::largest_remainder(p, train_pool.size()), owners,
                   part.train);
      detail::deal(test_pool, detail::largest_remainder(p, test_pool.size()), owners,
                   part.test);
    }
    const bool ok = std::all_of(part.train.begin(), part.train.end(), [&](const auto& s) {
      return s.size() >= min_train_samples;
    });
    if (!ok) continue;
    for (auto& s : part.train) std::sort(s.begin(), s.end());
    for (auto& s : part.test) std::sort(s.begin(), s.end());
    return part;
  }
  throw ConfigError("Dirichlet split could not give every client " +
                    std::to_string(min_train_samples) + " samples");
}

// Per-client label counts over a split.
inline std::vector<std::vector<std::size_t>> label_histograms(
    const std::vector<Sample>& samples, const std::vector<std::vector<std::size_t>>& shards,
    std::size_t num_classes) {
  std::vector<std::vector<std::size_t>> out(shards.size(),
                                            std::vector<std::size_t>(num_classes, 0));
  for (std::size_t k = 0; k < shards.size(); ++k) {
    for (std::size_t i : shards[k]) ++out[k][samples[i].label];
  }
  return out;
}

// Shannon entropy (nats) of a count histogram; 0 for an empty one.
inline double label_entropy(const std::vector<std::size_t>& histogram) {
  const double total =
      static_cast<double>(std::accumulate(histogram.begin(), histogram.end(), std::size_t{0}));
  if (total == 0.0) return 0.0;
  double h = 0.0;
  for (std::size_t c : histogram) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / total;
    h -= p * std::log(p);
  }
  return h;
}

// True when the shards are pairwise disjoint and cover [0, total).
inline bool is_disjoint_cover(const std::vector<std::vector<std::size_t>>& shards,
                              std::size_t total) {
  std::vector<int> seen(total, 0);
  for (const auto& s : shards) {
    for (std::size_t i : s) {
      if (i >= total || seen[i]++) return false;
    }
  }
  return std::all_of(seen.begin(), seen.end(), [](int v) { return v == 1; });
}

// CSV rows: client,sample_index,label (train split).
inline void write_partition_csv(std::ostream& os, const Dataset& ds, const Partition& part) {
  os << "client,sample_index,label\n";
  for (std::size_t k = 0; k < part.train.size(); ++k) {
    for (std::size_t i : part.train[k]) os << k << ',' << i << ',' << ds.train[i].label << '\n';
  }
}

// CSV rows: client,class,count (train split).
inline void write_histogram_csv(std::ostream& os, const Dataset& ds, const Partition& part) {
  os << "client,class,count\n";
  const auto hist = label_histograms(ds.train, part.train, ds.num_classes);
  for (std::size_t k = 0; k < hist.size(); ++k) {
    for (std::size_t c = 0; c < ds.num_classes; ++c) os << k << ',' << c << ',' << hist[k][c] << '\n';
  }
}

}  // namespace fedprompt
