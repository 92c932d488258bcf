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
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fedprompt/errors.hpp"
#include "fedprompt/random.hpp"
#include "fedprompt/tensor.hpp"

// Prototype and score mathematics for class-contextualized mixed prompts.
//
// Prototypes are per-layer, per-class means of the incoming cls token. A
// client scores each sample against the global prototypes by cosine
// similarity, sharpens with a temperature, reweights by its local class
// priors, and mixes the class prompt columns with the resulting weights.
namespace fedprompt::ccmp {

// Empirical label distribution of one client.
struct ClassPriors {
  std::vector<double> values;

  std::size_t size() const { return values.size(); }
  double operator[](std::size_t c) const { return values[c]; }

  static ClassPriors uniform(std::size_t num_classes) {
    return {std::vector<double>(num_classes, 1.0 / static_cast<double>(num_classes))};
  }
};

inline ClassPriors compute_class_priors(std::span<const std::size_t> labels,
                                        std::size_t num_classes) {
  if (labels.empty()) throw DataError("class priors of an empty label list");
  std::vector<std::size_t> counts(num_classes, 0);
  for (std::size_t y : labels) {
    if (y >= num_classes) {
      throw IndexError("label " + std::to_string(y) + " >= " + std::to_string(num_classes));
    }
    ++counts[y];
  }
  ClassPriors p{std::vector<double>(num_classes)};
  const double n = static_cast<double>(labels.size());
  for (std::size_t c = 0; c < num_classes; ++c) p.values[c] = static_cast<double>(counts[c]) / n;
  return p;
}

inline double norm2(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// Cosine similarity; 0 when either side is the zero vector.
inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("cosine_similarity length mismatch");
  const double na = norm2(a), nb = norm2(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  double dot = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
  return dot / (na * nb);
}

// Score weights for one cls token against one layer's prototypes (C x d):
//   s_c  ∝  exp(sim(cls, mu_c) / tau) * prior_c
// evaluated as a max-subtracted softmax over log-weights. Classes with a zero
// prior get exactly zero weight.
inline std::vector<double> soft_scores(std::span<const double> cls,
                                       const Tensor& prototypes,
                                       const ClassPriors& priors, double tau) {
  if (!(tau > 0.0)) throw ConfigError("temperature must be positive");
  const std::size_t num_classes = prototypes.rows();
  if (prototypes.cols() != cls.size()) {
    throw DimensionError("prototype width " + std::to_string(prototypes.cols()) +
                         " != token width " + std::to_string(cls.size()));
  }
  if (priors.size() != num_classes) {
    throw DimensionError("prior length does not match class count");
  }
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  std::vector<double> logit(num_classes, kNegInf);
  double mx = kNegInf;
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (priors[c] < 0.0) throw DataError("negative class prior");
    if (priors[c] == 0.0) continue;
    logit[c] = cosine_similarity(cls, prototypes.row_span(c)) / tau + std::log(priors[c]);
    mx = std::max(mx, logit[c]);
  }
  if (mx == kNegInf) throw DataError("all class priors are zero");
  std::vector<double> s(num_classes, 0.0);
  double z = 0.0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (logit[c] == kNegInf) continue;
    z += (s[c] = std::exp(logit[c] - mx));
  }
  for (double& v : s) v /= z;
  return s;
}

// Vector-Jacobian product of soft_scores with respect to the cls token.
// Prototypes and priors are constants.
inline std::vector<double> soft_scores_backward(std::span<const double> cls,
                                                const Tensor& prototypes,
                                                std::span<const double> scores,
                                                std::span<const double> upstream,
                                                double tau) {
  const std::size_t d = cls.size();
  std::vector<double> grad(d, 0.0);
  const double nx = norm2(cls);
  if (nx == 0.0) return grad;
  double expected = 0.0;
  for (std::size_t c = 0; c < scores.size(); ++c) expected += scores[c] * upstream[c];
  for (std::size_t c = 0; c < scores.size(); ++c) {
    if (scores[c] == 0.0) continue;
    const auto mu = prototypes.row_span(c);
    const double nm = norm2(mu);
    if (nm == 0.0) continue;
    const double gz = scores[c] * (upstream[c] - expected) / tau;
    if (gz == 0.0) continue;
    const double cos = cosine_similarity(cls, mu);
    for (std::size_t i = 0; i < d; ++i) {
      grad[i] += gz * (mu[i] / (nx * nm) - cos * cls[i] / (nx * nx));
    }
  }
  return grad;
}

// m = P_C * s for class prompts stored as d x C columns.
inline std::vector<double> mix_prompt(const Tensor& class_prompts,
                                      std::span<const double> scores) {
  if (class_prompts.cols() != scores.size()) {
    throw DimensionError("mix_prompt: " + std::to_string(class_prompts.cols()) +
                         " prompt columns vs " + std::to_string(scores.size()) + " scores");
  }
  const std::size_t d = class_prompts.rows();
  std::vector<double> m(d, 0.0);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t c = 0; c < scores.size(); ++c) m[i] += class_prompts.at(i, c) * scores[c];
  }
  return m;
}

// 2 * max_i ||cls_i - mu||_1 / count over the class's tokens (row-major,
// count x d). No value when the class is absent.
inline std::optional<double> dp_sensitivity(std::span<const double> class_tokens,
                                            std::span<const double> mu,
                                            std::size_t count) {
  if (count == 0) return std::nullopt;
  const std::size_t d = mu.size();
  if (class_tokens.size() != count * d) {
    throw DimensionError("dp_sensitivity: token block is not count x d");
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    double l1 = 0.0;
    for (std::size_t j = 0; j < d; ++j) l1 += std::abs(class_tokens[i * d + j] - mu[j]);
    worst = std::max(worst, l1);
  }
  return 2.0 * worst / static_cast<double>(count);
}

// Adds Laplace(0, sensitivity / epsilon) to every coordinate.
inline void dp_apply(std::span<double> prototype, double sensitivity, double epsilon,
                     Rng& rng) {
  if (!(epsilon > 0.0)) throw ConfigError("DP epsilon must be positive");
  const double scale = sensitivity / epsilon;
  if (scale == 0.0) return;
  for (double& v : prototype) v += sample_laplace(rng, scale);
}

// Per-class statistics of one client's tokens at one layer.
struct ClassStatistics {
  Tensor means;                         // C x d; zero row for absent classes
  std::vector<std::size_t> counts;      // n_{k,c}
  std::vector<double> sensitivity;      // DP sensitivity; 0 for absent classes
};

// Class means of the rows of `tokens` (N x d) grouped by label.
inline ClassStatistics local_prototypes(const Tensor& tokens,
                                        std::span<const std::size_t> labels,
                                        std::size_t num_classes) {
  if (labels.empty()) throw DataError("local prototypes of an empty dataset");
  if (tokens.rows() != labels.size()) {
    throw DimensionError("token rows do not match label count");
  }
  const std::size_t d = tokens.cols();
  ClassStatistics st{Tensor({num_classes, d}), std::vector<std::size_t>(num_classes, 0),
                     std::vector<double>(num_classes, 0.0)};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::size_t y = labels[i];
    if (y >= num_classes) throw IndexError("label out of range in local_prototypes");
    ++st.counts[y];
    auto dst = st.means.row_span(y);
    auto src = tokens.row_span(i);
    for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
  }
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (st.counts[c] == 0) continue;
    for (double& v : st.means.row_span(c)) v /= static_cast<double>(st.counts[c]);
  }
  // Sensitivity needs the finished means.
  std::vector<double> worst(num_classes, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::size_t y = labels[i];
    auto mu = st.means.row_span(y);
    auto src = tokens.row_span(i);
    double l1 = 0.0;
    for (std::size_t j = 0; j < d; ++j) l1 += std::abs(src[j] - mu[j]);
    worst[y] = std::max(worst[y], l1);
  }
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (st.counts[c] > 0) st.sensitivity[c] = 2.0 * worst[c] / static_cast<double>(st.counts[c]);
  }
  return st;
}

inline bool is_zero(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; });
}

// Period aggregate: per class, the mean over nonzero submissions.
struct Aggregate {
  Tensor mean;                            // C x d
  std::vector<std::size_t> contributors;  // D_c
};

inline Aggregate server_aggregate(std::span<const Tensor> submissions,
                                  std::size_t num_classes, std::size_t dim) {
  Aggregate agg{Tensor({num_classes, dim}), std::vector<std::size_t>(num_classes, 0)};
  for (const Tensor& sub : submissions) {
    if (sub.rows() != num_classes || sub.cols() != dim) {
      throw DimensionError("prototype submission has shape " + shape_string(sub.shape()));
    }
    for (std::size_t c = 0; c < num_classes; ++c) {
      auto row = sub.row_span(c);
      if (is_zero(row)) continue;
      ++agg.contributors[c];
      auto dst = agg.mean.row_span(c);
      for (std::size_t j = 0; j < dim; ++j) dst[j] += row[j];
    }
  }
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (agg.contributors[c] == 0) continue;
    for (double& v : agg.mean.row_span(c)) v /= static_cast<double>(agg.contributors[c]);
  }
  return agg;
}

// rho * prev + (1 - rho) * aggregate; prev unchanged when nobody contributed.
inline std::vector<double> momentum_update(std::span<const double> prev,
                                           std::span<const double> aggregate,
                                           std::size_t contributors, double rho) {
  if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("momentum must lie in [0, 1]");
  if (prev.size() != aggregate.size()) throw DimensionError("momentum_update length mismatch");
  std::vector<double> out(prev.begin(), prev.end());
  if (contributors == 0) return out;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = rho * prev[i] + (1.0 - rho) * aggregate[i];
  }
  return out;
}

// Plain mean over the warm-up participants, absent classes counting as zero.
inline Tensor warm_start_average(std::span<const Tensor> submissions) {
  if (submissions.empty()) throw ConfigError("warm-up needs at least one client");
  Tensor out(submissions.front().shape());
  for (const Tensor& s : submissions) {
    if (s.shape() != out.shape()) throw DimensionError("warm-up submission shape mismatch");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += s[i];
  }
  const double n = static_cast<double>(submissions.size());
  for (double& v : out.data()) v /= n;
  return out;
}

// Per-layer statistics submitted by one client in one round.
using LayerStatistics = std::map<std::size_t, ClassStatistics>;

// Global prototypes for every CCMP layer plus the buffer of client
// submissions collected during the current update period.
class PrototypeBank {
 public:
  PrototypeBank() = default;

  PrototypeBank(std::vector<std::size_t> layers, std::size_t num_classes,
                std::size_t dim, double momentum, std::size_t period)
      : layers_(std::move(layers)),
        num_classes_(num_classes),
        dim_(dim),
        momentum_(momentum),
        period_(period) {
    if (!(momentum >= 0.0 && momentum <= 1.0)) {
      throw ConfigError("prototype momentum must lie in [0, 1]");
    }
    if (period == 0) throw ConfigError("prototype update period must be >= 1");
    if (num_classes == 0 || dim == 0) throw ConfigError("empty prototype geometry");
    std::sort(layers_.begin(), layers_.end());
    for (std::size_t l : layers_) {
      mu_.emplace(l, Tensor({num_classes, dim}));
      pending_sensitivity_.emplace(l, std::vector<double>(num_classes, 0.0));
    }
  }

  const std::vector<std::size_t>& layers() const { return layers_; }
  std::size_t num_classes() const { return num_classes_; }
  std::size_t dim() const { return dim_; }
  double momentum() const { return momentum_; }
  std::size_t period() const { return period_; }

  bool has_layer(std::size_t l) const { return mu_.count(l) != 0; }

  const Tensor& layer(std::size_t l) const {
    auto it = mu_.find(l);
    if (it == mu_.end()) {
      throw ConfigError("prototype bank has no layer " + std::to_string(l));
    }
    return it->second;
  }
  Tensor& layer(std::size_t l) {
    return const_cast<Tensor&>(std::as_const(*this).layer(l));
  }

  // Buffers one client's submission for the current period.
  void submit(const LayerStatistics& stats) {
    for (std::size_t l : layers_) {
      auto it = stats.find(l);
      if (it == stats.end()) {
        throw ConfigError("submission missing layer " + std::to_string(l));
      }
      pending_[l].push_back(it->second.means);
      auto& sens = pending_sensitivity_[l];
      for (std::size_t c = 0; c < num_classes_; ++c) {
        sens[c] = std::max(sens[c], it->second.sensitivity[c]);
      }
    }
    ++pending_count_;
  }

  std::size_t pending_submissions() const { return pending_count_; }

  // Initializes every layer from warm-up submissions (plain mean), optionally
  // noised, and clears nothing else.
  void warm_start(std::span<const LayerStatistics> submissions,
                  std::optional<double> epsilon, Rng* rng) {
    if (submissions.empty()) throw ConfigError("warm-up needs at least one client");
    for (std::size_t l : layers_) {
      std::vector<Tensor> means;
      std::vector<double> sens(num_classes_, 0.0);
      for (const auto& s : submissions) {
        const ClassStatistics& st = s.at(l);
        means.push_back(st.means);
        for (std::size_t c = 0; c < num_classes_; ++c) {
          sens[c] = std::max(sens[c], st.sensitivity[c]);
        }
      }
      mu_[l] = warm_start_average(means);
      if (epsilon) add_noise(l, sens, *epsilon, *rng);
    }
  }

  // Ends the update period: aggregate the buffer, apply momentum, then the
  // optional Laplace noise. Returns D_c per layer.
  std::map<std::size_t, std::vector<std::size_t>> commit(std::optional<double> epsilon,
                                                         Rng* rng) {
    std::map<std::size_t, std::vector<std::size_t>> contributors;
    for (std::size_t l : layers_) {
      const auto& buf = pending_[l];
      Aggregate agg = server_aggregate(buf, num_classes_, dim_);
      Tensor& mu = mu_[l];
      for (std::size_t c = 0; c < num_classes_; ++c) {
        auto updated = momentum_update(mu.row_span(c), agg.mean.row_span(c),
                                       agg.contributors[c], momentum_);
        std::copy(updated.begin(), updated.end(), mu.row_span(c).begin());
      }
      if (epsilon) {
        std::vector<double> sens = pending_sensitivity_[l];
        for (std::size_t c = 0; c < num_classes_; ++c) {
          if (agg.contributors[c] == 0) sens[c] = 0.0;
        }
        add_noise(l, sens, *epsilon, *rng);
      }
      contributors[l] = std::move(agg.contributors);
    }
    pending_.clear();
    for (auto& [l, sens] : pending_sensitivity_) std::fill(sens.begin(), sens.end(), 0.0);
    pending_count_ = 0;
    return contributors;
  }

  std::uint64_t fingerprint() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& [l, mu] : mu_) h = checksum(mu.data(), h ^ l);
    return h;
  }

  // CSV rows: layer,class,dim,value.
  void write_csv(std::ostream& os) const {
    os << "layer,class,dim,value\n";
    os << std::setprecision(17);
    for (const auto& [l, mu] : mu_) {
      for (std::size_t c = 0; c < num_classes_; ++c) {
        for (std::size_t j = 0; j < dim_; ++j) {
          os << l << ',' << c << ',' << j << ',' << mu.at(c, j) << '\n';
        }
      }
    }
  }

  // Overwrites prototype values from CSV written by write_csv.
  void read_csv(std::istream& is) {
    std::string line;
    std::getline(is, line);
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      std::istringstream row(line);
      std::size_t l = 0, c = 0, j = 0;
      double v = 0.0;
      char sep = 0;
      if (!(row >> l >> sep >> c >> sep >> j >> sep >> v)) {
        throw DataError("malformed prototype row: " + line);
      }
      Tensor& mu = layer(l);
      if (c >= num_classes_ || j >= dim_) throw IndexError("prototype row out of range: " + line);
      mu.at(c, j) = v;
    }
  }

 private:
  void add_noise(std::size_t l, const std::vector<double>& sensitivity, double epsilon,
                 Rng& rng) {
    Tensor& mu = mu_[l];
    for (std::size_t c = 0; c < num_classes_; ++c) {
      if (sensitivity[c] == 0.0) continue;
      dp_apply(mu.row_span(c), sensitivity[c], epsilon, rng);
    }
  }

  std::vector<std::size_t> layers_;
  std::size_t num_classes_ = 0;
  std::size_t dim_ = 0;
  double momentum_ = 0.9;
  std::size_t period_ = 1;
  std::map<std::size_t, Tensor> mu_;
  std::map<std::size_t, std::vector<Tensor>> pending_;
  std::map<std::size_t, std::vector<double>> pending_sensitivity_;
  std::size_t pending_count_ = 0;
};

}  // namespace fedprompt::ccmp
