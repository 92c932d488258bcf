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
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fedprompt/autodiff.hpp"
#include "fedprompt/ccmp.hpp"
#include "fedprompt/client.hpp"
#include "fedprompt/data.hpp"
#include "fedprompt/errors.hpp"
#include "fedprompt/eval.hpp"
#include "fedprompt/model.hpp"
#include "fedprompt/parallel.hpp"
#include "fedprompt/random.hpp"

namespace fedprompt {

struct TrainConfig {
  std::size_t num_clients = 12;
  std::size_t clients_per_round = 4;
  std::size_t rounds = 30;
  std::size_t local_epochs = 1;
  std::size_t batch_size = 16;
  double lr = 0.1;
  double lr_decay = 0.99;  // per round
  double sgd_momentum = 0.9;
  double grad_clip = 10.0;
  std::size_t shared_prompts = 1;
  std::vector<std::size_t> ccmp_layers{5, 6, 7};
  double tau = 0.05;
  double proto_momentum = 0.9;
  std::size_t proto_period = 1;
  std::optional<double> dp_epsilon;
  PromptStrategy strategy = PromptStrategy::kSharedCcmp;
  double warmup_fraction = 1.0;
  bool weighted_fedavg = false;
  bool detach_scores = false;
  bool refresh_ccmp = true;
  double prompt_init_scale = 0.02;
  std::size_t eval_every = 1;
  std::size_t workers = 1;
  std::uint64_t seed = 0;

  PromptSetup prompt_setup() const {
    PromptSetup s;
    s.strategy = strategy;
    s.forward.ccmp_layers = ccmp_layers;
    s.forward.tau = tau;
    s.forward.detach_scores = detach_scores;
    s.forward.refresh = refresh_ccmp;
    return s;
  }
};

inline void validate(const TrainConfig& c) {
  if (c.num_clients == 0) throw ConfigError("num_clients must be positive");
  if (c.clients_per_round == 0 || c.clients_per_round > c.num_clients) {
    throw ConfigError("clients_per_round must lie in 1..num_clients");
  }
  if (c.local_epochs == 0) throw ConfigError("local_epochs must be >= 1");
  if (c.batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (!(c.lr >= 0.0)) throw ConfigError("lr must be non-negative");
  if (!(c.lr_decay > 0.0)) throw ConfigError("lr_decay must be positive");
  if (!(c.sgd_momentum >= 0.0 && c.sgd_momentum < 1.0)) {
    throw ConfigError("sgd_momentum must lie in [0, 1)");
  }
  if (!(c.grad_clip > 0.0)) throw ConfigError("grad_clip must be positive");
  if (!(c.tau > 0.0)) throw ConfigError("tau must be positive");
  if (!(c.proto_momentum >= 0.0 && c.proto_momentum <= 1.0)) {
    throw ConfigError("proto_momentum must lie in [0, 1]");
  }
  if (c.proto_period == 0) throw ConfigError("proto_period must be >= 1");
  if (c.dp_epsilon && !(*c.dp_epsilon > 0.0)) throw ConfigError("dp_epsilon must be positive");
  if (!(c.warmup_fraction > 0.0 && c.warmup_fraction <= 1.0)) {
    throw ConfigError("warmup_fraction must lie in (0, 1]");
  }
  if (uses_ccmp(c.strategy) && c.ccmp_layers.empty()) {
    throw ConfigError("CCMP strategy needs at least one CCMP layer");
  }
  if (c.eval_every == 0) throw ConfigError("eval_every must be >= 1");
}

// Uniform sample of `count` distinct ids from [0, n), returned sorted.
inline std::vector<std::size_t> sample_clients(Rng& rng, std::size_t n, std::size_t count) {
  if (count > n) {
    throw ConfigError("cannot sample " + std::to_string(count) + " of " + std::to_string(n) +
                      " clients");
  }
  std::vector<std::size_t> ids(n);
  std::iota(ids.begin(), ids.end(), 0);
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(ids[i], ids[pick(rng)]);
  }
  ids.resize(count);
  std::sort(ids.begin(), ids.end());
  return ids;
}

struct ClientUpdate {
  std::size_t client = 0;
  PromptParams params;
  ccmp::LayerStatistics prototypes;  // empty for strategies without CCMP
  std::size_t num_samples = 0;
  double train_loss = 0.0;  // mean sample loss over the final local epoch
};

// Mean of each parameter block over the updates, accumulated in ascending
// client order as a running mean so identical updates average to themselves
// exactly. Weighted by sample count when `weighted` is set.
inline PromptParams fedavg_aggregate(std::span<const ClientUpdate> updates,
                                     bool weighted = false) {
  if (updates.empty()) throw ProtocolError("FedAvg over zero client updates");
  std::vector<const ClientUpdate*> order;
  for (const auto& u : updates) order.push_back(&u);
  std::stable_sort(order.begin(), order.end(),
                   [](const auto* a, const auto* b) { return a->client < b->client; });

  PromptParams out = order.front()->params;
  out.set_requires_grad(false);
  auto dst = out.blocks();
  double seen = 0.0;
  for (const auto* u : order) {
    auto src = u->params.blocks();
    if (src.size() != dst.size()) throw ProtocolError("client update has mismatched blocks");
    const double wgt = weighted ? static_cast<double>(u->num_samples) : 1.0;
    seen += wgt;
    if (wgt == 0.0) continue;
    const double frac = wgt / seen;
    for (std::size_t b = 0; b < dst.size(); ++b) {
      if (src[b]->shape() != dst[b]->shape()) {
        throw ProtocolError("client update block shape mismatch");
      }
      auto d = dst[b]->data();
      auto s = src[b]->data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += frac * (s[i] - d[i]);
    }
  }
  if (seen <= 0.0) throw ProtocolError("FedAvg weights sum to zero");
  return out;
}

struct ServerState {
  PromptParams global;
  ccmp::PrototypeBank bank;
  std::size_t round = 0;   // completed rounds
  std::size_t period = 0;  // completed prototype periods
};

struct RoundLog {
  std::size_t round = 0;
  double train_loss = 0.0;
  std::vector<std::size_t> participants;
  bool evaluated = false;
  EvalReport participating;
  EvalReport heldout;
};

// Federated prompt tuning over a fixed client population. Heldout clients
// are never sampled; they only take part in evaluation.
class Simulator {
 public:
  Simulator(const BackboneWeights& backbone, const Dataset& data,
            std::vector<ClientState> clients, std::vector<std::size_t> participating,
            std::vector<std::size_t> heldout, TrainConfig cfg)
      : backbone_(backbone),
        data_(data),
        tokens_(embed_dataset(backbone, data)),
        clients_(std::move(clients)),
        participating_(std::move(participating)),
        heldout_(std::move(heldout)),
        cfg_(std::move(cfg)),
        setup_(cfg_.prompt_setup()),
        uniform_(ccmp::ClassPriors::uniform(data.num_classes)) {
    validate(cfg_);
    if (participating_.empty()) throw ConfigError("no participating clients");
    if (cfg_.clients_per_round > participating_.size()) {
      throw ConfigError("clients_per_round exceeds participating clients");
    }
    Rng init_rng = make_rng(cfg_.seed, SeedPurpose::kPromptInit);
    state_.global = PromptParams::init(backbone.config.dim, cfg_.shared_prompts,
                                       data.num_classes, init_rng, cfg_.prompt_init_scale);
    state_.bank = ccmp::PrototypeBank(cfg_.ccmp_layers, data.num_classes, backbone.config.dim,
                                      cfg_.proto_momentum, cfg_.proto_period);
    if (cfg_.strategy == PromptStrategy::kPersonalized) {
      for (auto& c : clients_) c.personal = state_.global;
    }
  }

  const ServerState& state() const { return state_; }
  ServerState& mutable_state() { return state_; }
  const std::vector<ClientState>& clients() const { return clients_; }
  const std::vector<std::size_t>& participating() const { return participating_; }
  const std::vector<std::size_t>& heldout() const { return heldout_; }
  const TrainConfig& config() const { return cfg_; }
  const PromptSetup& setup() const { return setup_; }
  const EmbeddedDataset& tokens() const { return tokens_; }
  // Number of times the prototype bank was read by a forward pass.
  std::size_t bank_reads() const { return bank_reads_.load(); }

  // Clients whose data entered any gradient so far.
  const std::vector<std::size_t>& trained_clients() const { return trained_; }

  // Incoming cls tokens at every CCMP layer for one client's train shard,
  // evaluated with `params` (no gradients), reduced to class statistics.
  ccmp::LayerStatistics client_prototypes(const ClientState& c, const PromptParams& params,
                                          bool use_bank) const {
    ForwardConfig fwd = setup_.effective_forward();
    const auto& layers = cfg_.ccmp_layers;
    if (!use_bank) fwd.ccmp_layers.clear();
    const auto& priors = setup_.priors_for(c, uniform_);
    const std::size_t d = backbone_.config.dim;
    std::map<std::size_t, Tensor> tokens;
    for (std::size_t l : layers) tokens.emplace(l, Tensor({c.train.size(), d}));
    for (std::size_t r = 0; r < c.train.size(); ++r) {
      const ForwardTrace tr =
          forward_with_prompts(backbone_, params, tokens_.train[c.train[r]],
                               use_bank ? &state_.bank : nullptr, &priors, fwd);
      for (std::size_t l : layers) {
        std::copy(tr.cls_in[l - 1].begin(), tr.cls_in[l - 1].end(),
                  tokens[l].row_span(r).begin());
      }
    }
    if (use_bank) ++bank_reads_;
    const auto labels = labels_of(data_.train, c.train);
    ccmp::LayerStatistics out;
    for (std::size_t l : layers) {
      out[l] = ccmp::local_prototypes(tokens[l], labels, data_.num_classes);
    }
    return out;
  }

  // WarmStartUp: sampled clients report prototypes from the untrained
  // prompts (no mixed token yet); the server averages them per class.
  void warm_startup() {
    if (!uses_ccmp(cfg_.strategy)) return;
    const auto count = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::lround(cfg_.warmup_fraction *
                                                static_cast<double>(participating_.size()))));
    Rng rng = make_rng(cfg_.seed, SeedPurpose::kWarmup);
    const auto picks = sample_clients(rng, participating_.size(), count);
    std::vector<ccmp::LayerStatistics> subs(picks.size());
    parallel_for(picks.size(), cfg_.workers, [&](std::size_t i) {
      const ClientState& c = clients_[participating_[picks[i]]];
      subs[i] = client_prototypes(c, setup_.params_for(state_.global, c), false);
    });
    Rng dp_rng = make_rng(cfg_.seed, SeedPurpose::kPrivacy, 0);
    state_.bank.warm_start(subs, cfg_.dp_epsilon, &dp_rng);
  }

  // LocalTrain for client `id` at round `round` (1-based) starting from the
  // broadcast parameters.
  ClientUpdate local_train(std::size_t id, std::size_t round) const {
    const ClientState& c = clients_.at(id);
    ClientUpdate up;
    up.client = id;
    up.num_samples = c.train.size();
    PromptParams theta = setup_.params_for(state_.global, c);
    if (uses_ccmp(cfg_.strategy)) up.prototypes = client_prototypes(c, theta, true);

    const ForwardConfig fwd = setup_.effective_forward();
    const auto& priors = setup_.priors_for(c, uniform_);
    const double lr = cfg_.lr * std::pow(cfg_.lr_decay, static_cast<double>(round - 1));
    theta.set_requires_grad(true);
    auto blocks = theta.blocks();
    std::vector<std::vector<double>> velocity;
    for (Tensor* t : blocks) velocity.emplace_back(t->size(), 0.0);

    Rng rng = make_rng(cfg_.seed, SeedPurpose::kLocalTrain, round, id);
    std::vector<std::size_t> order = c.train;
    double epoch_loss = 0.0;
    for (std::size_t e = 0; e < cfg_.local_epochs; ++e) {
      std::shuffle(order.begin(), order.end(), rng);
      epoch_loss = 0.0;
      for (std::size_t start = 0; start < order.size(); start += cfg_.batch_size) {
        const std::size_t stop = std::min(order.size(), start + cfg_.batch_size);
        theta.zero_grad();
        for (std::size_t b = start; b < stop; ++b) {
          const std::size_t i = order[b];
          Tape tape;
          PromptVars vars = bind_trainable(tape, theta);
          TapeForward f = forward_on_tape(tape, backbone_, vars, tokens_.train[i],
                                          uses_ccmp(cfg_.strategy) ? &state_.bank : nullptr,
                                          &priors, fwd);
          Var loss = cross_entropy(f.logits, data_.train[i].label);
          const double lv = loss.value()[0];
          if (!std::isfinite(lv)) throw TrainingError("non-finite training loss", round, id);
          epoch_loss += lv;
          tape.backward(loss);
        }
        const double inv = 1.0 / static_cast<double>(stop - start);
        double norm_sq = 0.0;
        for (Tensor* t : blocks) {
          for (double& g : t->grad()) {
            g *= inv;
            norm_sq += g * g;
          }
        }
        const double norm = std::sqrt(norm_sq);
        if (!std::isfinite(norm)) throw TrainingError("non-finite gradient", round, id);
        const double clip = norm > cfg_.grad_clip ? cfg_.grad_clip / norm : 1.0;
        for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
          auto p = blocks[bi]->data();
          auto g = blocks[bi]->grad();
          auto& v = velocity[bi];
          for (std::size_t j = 0; j < p.size(); ++j) {
            v[j] = cfg_.sgd_momentum * v[j] + clip * g[j];
            p[j] -= lr * v[j];
          }
        }
      }
      epoch_loss /= static_cast<double>(order.size());
    }
    if (uses_ccmp(cfg_.strategy)) ++bank_reads_;
    theta.set_requires_grad(false);
    up.params = std::move(theta);
    up.train_loss = epoch_loss;
    return up;
  }

  // Mean cross-entropy of the current global state over the participating
  // clients' training shards (client-averaged).
  double participating_loss() const {
    const ForwardConfig fwd = setup_.effective_forward();
    std::vector<double> losses(participating_.size(), 0.0);
    parallel_for(participating_.size(), cfg_.workers, [&](std::size_t slot) {
      const ClientState& c = clients_[participating_[slot]];
      const PromptParams params = setup_.params_for(state_.global, c);
      const auto& priors = setup_.priors_for(c, uniform_);
      double total = 0.0;
      for (std::size_t i : c.train) {
        Tape tape;
        PromptVars vars = bind_constant(tape, params);
        TapeForward f = forward_on_tape(tape, backbone_, vars, tokens_.train[i],
                                        uses_ccmp(cfg_.strategy) ? &state_.bank : nullptr,
                                        &priors, fwd);
        total += cross_entropy(f.logits, data_.train[i].label).value()[0];
      }
      losses[slot] = total / static_cast<double>(c.train.size());
    });
    return std::accumulate(losses.begin(), losses.end(), 0.0) /
           static_cast<double>(losses.size());
  }

  EvalReport evaluate(std::span<const std::size_t> ids) const {
    return evaluate_clients(backbone_, data_, tokens_, state_.global, state_.bank, clients_, ids,
                            setup_, cfg_.workers);
  }

  // Log entry for the state right after warm-up (round 0).
  RoundLog initial_log() const {
    RoundLog log;
    log.round = 0;
    log.train_loss = participating_loss();
    fill_eval(log);
    return log;
  }

  // One communication round: sample, local training, FedAvg, and at period
  // ends prototype aggregation + momentum (+ Laplace noise).
  RoundLog run_round() {
    const std::size_t t = state_.round + 1;
    Rng rng = make_rng(cfg_.seed, SeedPurpose::kSampling, t);
    const auto picks = sample_clients(rng, participating_.size(), cfg_.clients_per_round);
    std::vector<std::size_t> ids;
    for (std::size_t p : picks) ids.push_back(participating_[p]);

    std::vector<ClientUpdate> updates(ids.size());
    parallel_for(ids.size(), cfg_.workers,
                 [&](std::size_t i) { updates[i] = local_train(ids[i], t); });

    PromptParams averaged = fedavg_aggregate(updates, cfg_.weighted_fedavg);
    if (cfg_.strategy == PromptStrategy::kPersonalized) {
      state_.global.head = std::move(averaged.head);
      for (auto& u : updates) {
        auto& personal = *clients_[u.client].personal;
        personal.shared = std::move(u.params.shared);
        personal.class_prompts = std::move(u.params.class_prompts);
      }
    } else {
      state_.global = std::move(averaged);
    }

    if (uses_ccmp(cfg_.strategy)) {
      for (const auto& u : updates) state_.bank.submit(u.prototypes);
      if (t % cfg_.proto_period == 0) {
        Rng dp_rng = make_rng(cfg_.seed, SeedPurpose::kPrivacy, t);
        state_.bank.commit(cfg_.dp_epsilon, &dp_rng);
        ++state_.period;
      }
    }
    for (std::size_t id : ids) {
      if (std::find(trained_.begin(), trained_.end(), id) == trained_.end()) trained_.push_back(id);
    }
    state_.round = t;

    RoundLog log;
    log.round = t;
    log.participants = ids;
    double loss = 0.0;
    for (const auto& u : updates) loss += u.train_loss;
    log.train_loss = loss / static_cast<double>(updates.size());
    if (t % cfg_.eval_every == 0 || t == cfg_.rounds) fill_eval(log);
    return log;
  }

 private:
  void fill_eval(RoundLog& log) const {
    log.evaluated = true;
    log.participating = evaluate(participating_);
    if (!heldout_.empty()) log.heldout = evaluate(heldout_);
  }

  const BackboneWeights& backbone_;
  const Dataset& data_;
  EmbeddedDataset tokens_;
  std::vector<ClientState> clients_;
  std::vector<std::size_t> participating_;
  std::vector<std::size_t> heldout_;
  TrainConfig cfg_;
  PromptSetup setup_;
  ccmp::ClassPriors uniform_;
  ServerState state_;
  std::vector<std::size_t> trained_;
  mutable std::atomic<std::size_t> bank_reads_{0};
};

struct TrainingResult {
  ServerState state;
  std::vector<RoundLog> logs;  // T + 1 entries, warm-up first
  std::vector<ClientState> clients;
  std::uint64_t backbone_before = 0;
  std::uint64_t backbone_after = 0;
};

// Warm-up followed by cfg.rounds rounds. `sink` sees every log as it is
// produced.
inline TrainingResult run_training(const BackboneWeights& backbone, const Dataset& data,
                                   std::vector<ClientState> clients,
                                   std::vector<std::size_t> participating,
                                   std::vector<std::size_t> heldout, const TrainConfig& cfg,
                                   const std::function<void(const RoundLog&)>& sink = {}) {
  TrainingResult result;
  result.backbone_before = backbone.fingerprint();
  Simulator sim(backbone, data, std::move(clients), std::move(participating),
                std::move(heldout), cfg);
  sim.warm_startup();
  result.logs.push_back(sim.initial_log());
  if (sink) sink(result.logs.back());
  for (std::size_t t = 0; t < cfg.rounds; ++t) {
    result.logs.push_back(sim.run_round());
    if (sink) sink(result.logs.back());
  }
  result.state = sim.state();
  result.clients = sim.clients();
  result.backbone_after = backbone.fingerprint();
  return result;
}

}  // namespace fedprompt
