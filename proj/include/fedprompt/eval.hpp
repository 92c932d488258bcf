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
#include <iomanip>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "fedprompt/ccmp.hpp"
#include "fedprompt/client.hpp"
#include "fedprompt/data.hpp"
#include "fedprompt/errors.hpp"
#include "fedprompt/model.hpp"
#include "fedprompt/parallel.hpp"
#include "json.hpp"

namespace fedprompt {

struct EvalReport {
  std::vector<std::size_t> clients;
  std::vector<double> accuracy;
  double mean = 0.0;
  double worst = 0.0;
  // Clients skipped because their test shard is empty.
  std::size_t excluded = 0;

  bool empty() const { return clients.empty(); }
};

inline EvalReport summarize(std::vector<std::size_t> clients, std::vector<double> accuracy,
                            std::size_t excluded = 0) {
  EvalReport r{std::move(clients), std::move(accuracy), 0.0, 0.0, excluded};
  if (!r.accuracy.empty()) {
    r.mean = std::accumulate(r.accuracy.begin(), r.accuracy.end(), 0.0) /
             static_cast<double>(r.accuracy.size());
    r.worst = *std::min_element(r.accuracy.begin(), r.accuracy.end());
  }
  return r;
}

// Accuracy of every listed client on its own test shard, using that client's
// priors and (for the personalized strategy) its own prompt blocks.
inline EvalReport evaluate_clients(const BackboneWeights& w, const Dataset& ds,
                                   const EmbeddedDataset& tokens, const PromptParams& global,
                                   const ccmp::PrototypeBank& bank,
                                   std::span<const ClientState> clients,
                                   std::span<const std::size_t> ids, const PromptSetup& setup,
                                   std::size_t workers = 1) {
  const ForwardConfig fwd = setup.effective_forward();
  const ccmp::ClassPriors uniform = ccmp::ClassPriors::uniform(ds.num_classes);
  std::vector<double> acc(ids.size(), -1.0);
  parallel_for(ids.size(), workers, [&](std::size_t slot) {
    const ClientState& c = clients[ids[slot]];
    if (c.test.empty()) return;
    const PromptParams params = setup.params_for(global, c);
    const ccmp::ClassPriors& priors = setup.priors_for(c, uniform);
    std::size_t correct = 0;
    for (std::size_t i : c.test) {
      const ForwardTrace tr =
          forward_with_prompts(w, params, tokens.test[i], &bank, &priors, fwd);
      if (predict(tr.logits) == ds.test[i].label) ++correct;
    }
    acc[slot] = static_cast<double>(correct) / static_cast<double>(c.test.size());
  });
  std::vector<std::size_t> kept_ids;
  std::vector<double> kept_acc;
  std::size_t excluded = 0;
  for (std::size_t slot = 0; slot < ids.size(); ++slot) {
    if (acc[slot] < 0.0) {
      ++excluded;
      continue;
    }
    kept_ids.push_back(ids[slot]);
    kept_acc.push_back(acc[slot]);
  }
  return summarize(std::move(kept_ids), std::move(kept_acc), excluded);
}

// Deterministic split of client ids into (participating, heldout), with
// round(n * participating_fraction) participants.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> heldout_split(
    std::size_t num_clients, double participating_fraction, std::uint64_t seed) {
  if (!(participating_fraction > 0.0 && participating_fraction < 1.0)) {
    throw ConfigError("participating fraction must lie strictly between 0 and 1");
  }
  const auto kept = static_cast<std::size_t>(
      std::lround(participating_fraction * static_cast<double>(num_clients)));
  if (kept == 0 || kept >= num_clients) {
    throw ConfigError("heldout split leaves one side empty");
  }
  std::vector<std::size_t> ids(num_clients);
  std::iota(ids.begin(), ids.end(), 0);
  Rng rng = make_rng(seed, SeedPurpose::kHeldout);
  std::shuffle(ids.begin(), ids.end(), rng);
  std::vector<std::size_t> part(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(kept));
  std::vector<std::size_t> held(ids.begin() + static_cast<std::ptrdiff_t>(kept), ids.end());
  std::sort(part.begin(), part.end());
  std::sort(held.begin(), held.end());
  return {std::move(part), std::move(held)};
}

// Nearest-prototype probe on the frozen backbone (no prompts): prototypes are
// the per-class means of cls at the input of `layer` over `pool`; each query
// is scored by cosine similarity and counts as a hit when its label is among
// the k most similar classes.
inline double prototype_topk_probe(const BackboneWeights& w, std::span<const Sample> pool,
                                   std::span<const Sample> queries, std::size_t num_classes,
                                   std::size_t layer, std::size_t k) {
  if (pool.empty() || queries.empty()) throw DataError("probe needs a nonempty pool");
  if (layer == 0 || layer > w.config.depth) throw ConfigError("probe layer out of range");
  if (k == 0) throw ConfigError("probe k must be positive");
  const std::size_t d = w.config.dim;
  PromptParams bare;
  bare.class_prompts = Tensor({d, 1});
  bare.head = Tensor({1, d});
  const ForwardConfig plain;
  auto cls_at = [&](const Sample& s) {
    return forward_with_prompts(w, bare, embed_patches(w, s.image), nullptr, nullptr, plain)
        .cls_in[layer - 1];
  };
  Tensor tokens({pool.size(), d});
  std::vector<std::size_t> labels(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const auto cls = cls_at(pool[i]);
    std::copy(cls.begin(), cls.end(), tokens.row_span(i).begin());
    labels[i] = pool[i].label;
  }
  const ccmp::ClassStatistics protos = ccmp::local_prototypes(tokens, labels, num_classes);
  std::size_t hits = 0;
  for (const Sample& q : queries) {
    const auto cls = cls_at(q);
    std::vector<std::pair<double, std::size_t>> ranked;
    for (std::size_t c = 0; c < num_classes; ++c) {
      if (protos.counts[c] == 0) continue;
      ranked.emplace_back(ccmp::cosine_similarity(cls, protos.means.row_span(c)), c);
    }
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    const std::size_t top = std::min(k, ranked.size());
    for (std::size_t r = 0; r < top; ++r) {
      if (ranked[r].second == q.label) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(queries.size());
}

inline double prototype_topk_probe(const BackboneWeights& w, std::span<const Sample> pool,
                                   std::size_t num_classes, std::size_t layer, std::size_t k) {
  return prototype_topk_probe(w, pool, pool, num_classes, layer, k);
}

// Transformer forward multiplication count:
//   L*H*(3*T*d*d_h + T^2*d_h) + L*T*d^2 + C*d
struct FlopDims {
  double layers = 12;
  double heads = 12;
  double tokens = 197;
  double dim = 768;
  double head_dim = 64;
  double classes = 100;
};

inline double flop_estimate(const FlopDims& f) {
  if (f.layers <= 0 || f.heads <= 0 || f.tokens <= 0 || f.dim <= 0 || f.head_dim <= 0 ||
      f.classes <= 0) {
    throw ConfigError("flop_estimate needs positive dimensions");
  }
  return f.layers * f.heads *
             (3.0 * f.tokens * f.dim * f.head_dim + f.tokens * f.tokens * f.head_dim) +
         f.layers * f.tokens * f.dim * f.dim + f.classes * f.dim;
}

// Score (C*d) plus mixing (C*d) multiplications per CCMP layer.
inline double ccmp_multiplications(double classes, double dim, std::size_t ccmp_layers) {
  return static_cast<double>(ccmp_layers) * 2.0 * classes * dim;
}

inline double ccmp_overhead(const FlopDims& f, std::size_t ccmp_layers) {
  return ccmp_multiplications(f.classes, f.dim, ccmp_layers) / flop_estimate(f);
}

struct CommDims {
  std::size_t classes = 100;
  std::size_t dim = 768;
  std::size_t shared_prompts = 1;
  std::size_t ccmp_layers = 3;
  std::size_t rounds = 12;
  std::size_t period = 1;
};

// Per-client parameter counts. Prompt blocks and the head move every round;
// prototypes (one C x d block per CCMP layer) move once per update period.
struct CommAccounting {
  std::size_t params_per_round = 0;
  std::size_t prototypes_per_period = 0;
  std::size_t periods = 0;
  std::size_t upload_total = 0;
  std::size_t download_total = 0;
};

inline CommAccounting comm_accounting(const CommDims& c) {
  if (c.period == 0) throw ConfigError("update period must be >= 1");
  CommAccounting a;
  a.params_per_round = c.classes * c.dim            // head
                       + c.shared_prompts * c.dim   // shared prompts
                       + (c.ccmp_layers > 0 ? c.classes * c.dim : 0);  // class prompts
  a.prototypes_per_period = c.ccmp_layers * c.classes * c.dim;
  a.periods = c.rounds / c.period;
  a.upload_total = c.rounds * a.params_per_round + a.periods * a.prototypes_per_period;
  a.download_total = a.upload_total;
  return a;
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j;
  j["mean_accuracy"] = r.mean;
  j["worst_accuracy"] = r.worst;
  j["excluded_clients"] = r.excluded;
  nlohmann::json per = nlohmann::json::array();
  for (std::size_t i = 0; i < r.clients.size(); ++i) {
    per.push_back({{"client", r.clients[i]}, {"accuracy", r.accuracy[i]}});
  }
  j["clients"] = std::move(per);
  return j;
}

// CSV rows: group,client,accuracy.
inline void write_eval_csv(std::ostream& os, const EvalReport& participating,
                           const EvalReport& heldout) {
  os << "group,client,accuracy\n" << std::setprecision(17);
  for (std::size_t i = 0; i < participating.clients.size(); ++i) {
    os << "participating," << participating.clients[i] << ',' << participating.accuracy[i]
       << '\n';
  }
  for (std::size_t i = 0; i < heldout.clients.size(); ++i) {
    os << "heldout," << heldout.clients[i] << ',' << heldout.accuracy[i] << '\n';
  }
}

}  // namespace fedprompt
