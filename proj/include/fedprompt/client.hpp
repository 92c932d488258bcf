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

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "fedprompt/ccmp.hpp"
#include "fedprompt/data.hpp"
#include "fedprompt/errors.hpp"
#include "fedprompt/model.hpp"

namespace fedprompt {

enum class PromptStrategy {
  kSharedOnly,         // shared prompts + head
  kSharedCcmp,         // shared prompts + mixed class prompts + head
  kSharedCcmpNoPrior,  // as above with uniform priors in the scores
  kPersonalized,       // shared prompts kept per client; only the head is averaged
};

inline std::string to_string(PromptStrategy s) {
  switch (s) {
    case PromptStrategy::kSharedOnly: return "shared-only";
    case PromptStrategy::kSharedCcmp: return "shared+ccmp";
    case PromptStrategy::kSharedCcmpNoPrior: return "shared+ccmp-no-prior";
    case PromptStrategy::kPersonalized: return "personalized";
  }
  return "unknown";
}

inline PromptStrategy parse_strategy(const std::string& name) {
  for (auto s : {PromptStrategy::kSharedOnly, PromptStrategy::kSharedCcmp,
                 PromptStrategy::kSharedCcmpNoPrior, PromptStrategy::kPersonalized}) {
    if (to_string(s) == name) return s;
  }
  throw ConfigError("unknown prompt strategy '" + name + "'");
}

inline bool uses_ccmp(PromptStrategy s) {
  return s == PromptStrategy::kSharedCcmp || s == PromptStrategy::kSharedCcmpNoPrior;
}

struct ClientState {
  std::size_t id = 0;
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
  ccmp::ClassPriors priors;
  // Client-owned prompt blocks under the personalized strategy.
  std::optional<PromptParams> personal;
};

inline std::vector<ClientState> make_clients(const Dataset& ds, const Partition& part) {
  std::vector<ClientState> clients(part.num_clients());
  for (std::size_t k = 0; k < clients.size(); ++k) {
    clients[k].id = k;
    clients[k].train = part.train[k];
    clients[k].test = part.test[k];
    if (part.train[k].empty()) {
      throw DataError("client " + std::to_string(k) + " has an empty training shard");
    }
    clients[k].priors =
        ccmp::compute_class_priors(labels_of(ds.train, part.train[k]), ds.num_classes);
  }
  return clients;
}

// Patch tokens of every sample, computed once per backbone.
struct EmbeddedDataset {
  std::vector<Tensor> train;
  std::vector<Tensor> test;
};

inline EmbeddedDataset embed_dataset(const BackboneWeights& w, const Dataset& ds) {
  EmbeddedDataset out;
  out.train.reserve(ds.train.size());
  out.test.reserve(ds.test.size());
  for (const auto& s : ds.train) out.train.push_back(embed_patches(w, s.image));
  for (const auto& s : ds.test) out.test.push_back(embed_patches(w, s.image));
  return out;
}

// Everything a forward pass needs besides the sample and the parameters.
struct PromptSetup {
  PromptStrategy strategy = PromptStrategy::kSharedCcmp;
  ForwardConfig forward;  // ccmp_layers are ignored for non-CCMP strategies

  ForwardConfig effective_forward() const {
    ForwardConfig f = forward;
    if (!uses_ccmp(strategy)) f.ccmp_layers.clear();
    return f;
  }

  const ccmp::ClassPriors& priors_for(const ClientState& c,
                                      const ccmp::ClassPriors& uniform) const {
    return strategy == PromptStrategy::kSharedCcmpNoPrior ? uniform : c.priors;
  }

  // Global parameters as seen by client `c`.
  PromptParams params_for(const PromptParams& global, const ClientState& c) const {
    PromptParams p = global;
    if (strategy == PromptStrategy::kPersonalized && c.personal) {
      p.shared = c.personal->shared;
      p.class_prompts = c.personal->class_prompts;
    }
    p.set_requires_grad(false);
    return p;
  }
};

}  // namespace fedprompt
