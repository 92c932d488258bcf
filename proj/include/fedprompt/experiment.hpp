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
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fedprompt/ccmp.hpp"
#include "fedprompt/client.hpp"
#include "fedprompt/data.hpp"
#include "fedprompt/errors.hpp"
#include "fedprompt/eval.hpp"
#include "fedprompt/federation.hpp"
#include "fedprompt/finite_diff.hpp"
#include "fedprompt/model.hpp"
#include "json.hpp"

namespace fedprompt {

using nlohmann::json;

enum class PartitionMode { kPathological, kDirichlet };

struct PartitionConfig {
  PartitionMode mode = PartitionMode::kPathological;
  std::size_t num_clients = 12;
  std::size_t classes_per_client = 2;
  double beta = 0.3;
  // Fraction of clients that train; the rest are heldout. Unset: everyone
  // trains.
  std::optional<double> participating_fraction;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string output_dir;
  SyntheticSpec data;
  PartitionConfig partition;
  BackboneConfig model;
  TrainConfig train;
};

namespace detail {

// Field-path-aware JSON reader. Every diagnostic names the offending field.
class FieldReader {
 public:
  FieldReader(const json& node, std::string path) : node_(node), path_(std::move(path)) {
    if (!node_.is_object()) throw ConfigError(where("") + ": expected an object");
  }

  template <typename T>
  T required(const std::string& key) {
    seen_.insert(key);
    if (!node_.contains(key)) throw ConfigError(where(key) + ": missing required field");
    return convert<T>(key);
  }

  template <typename T>
  T optional(const std::string& key, T fallback) {
    seen_.insert(key);
    if (!node_.contains(key) || node_.at(key).is_null()) return fallback;
    return convert<T>(key);
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return node_.contains(key) && !node_.at(key).is_null();
  }

  FieldReader child(const std::string& key) {
    seen_.insert(key);
    static const json kEmpty = json::object();
    if (!node_.contains(key)) return FieldReader(kEmpty, where(key));
    return FieldReader(node_.at(key), where(key));
  }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    return node_.at(key);
  }

  std::string where(const std::string& key) const {
    if (key.empty()) return path_.empty() ? "<root>" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

  // Rejects keys that were never read (typos).
  void finish() const {
    for (auto it = node_.begin(); it != node_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(where(it.key()) + ": unknown field");
    }
  }

 private:
  template <typename T>
  T convert(const std::string& key) {
    const json& v = node_.at(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(where(key) + ": expected a boolean");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(where(key) + ": expected a string");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer() || (v.is_number_integer() && v.get<std::int64_t>() < 0 &&
                                     !v.is_number_unsigned())) {
        throw ConfigError(where(key) + ": expected a non-negative integer");
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(where(key) + ": expected a number");
    } else if constexpr (std::is_same_v<T, std::vector<std::size_t>>) {
      if (!v.is_array()) throw ConfigError(where(key) + ": expected an array of integers");
      for (const auto& e : v) {
        if (!e.is_number_unsigned()) {
          throw ConfigError(where(key) + ": expected an array of non-negative integers");
        }
      }
    }
    return v.get<T>();
  }

  const json& node_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline std::string to_string(PartitionMode m) {
  return m == PartitionMode::kPathological ? "pathological" : "dirichlet";
}

// Parses and validates an experiment config. Errors name the field.
inline ExperimentConfig parse_experiment_config(const json& j) {
  ExperimentConfig cfg;
  detail::FieldReader root(j, "");
  cfg.seed = root.required<std::uint64_t>("seed");
  cfg.output_dir = root.optional<std::string>("output_dir", "");

  auto data = root.child("data");
  cfg.data.num_classes = data.required<std::size_t>("num_classes");
  cfg.data.train_per_class = data.optional<std::size_t>("train_per_class", 60);
  cfg.data.test_per_class = data.optional<std::size_t>("test_per_class", 30);
  cfg.data.image_size = data.optional<std::size_t>("image_size", 16);
  cfg.data.separation = data.optional<double>("separation", 1.0);
  cfg.data.noise = data.optional<double>("noise", 1.0);
  if (data.has("domains")) {
    const json& doms = data.raw("domains");
    if (!doms.is_array()) throw ConfigError(data.where("domains") + ": expected an array");
    for (std::size_t i = 0; i < doms.size(); ++i) {
      detail::FieldReader dom(doms[i], data.where("domains") + "[" + std::to_string(i) + "]");
      cfg.data.domains.push_back(
          {dom.optional<double>("angle", 0.0), dom.optional<double>("offset", 0.0)});
      dom.finish();
    }
  }
  data.finish();

  auto part = root.child("partition");
  const auto mode = part.required<std::string>("mode");
  if (mode == "pathological") {
    cfg.partition.mode = PartitionMode::kPathological;
  } else if (mode == "dirichlet") {
    cfg.partition.mode = PartitionMode::kDirichlet;
  } else {
    throw ConfigError(part.where("mode") + ": expected 'pathological' or 'dirichlet'");
  }
  cfg.partition.num_clients = part.required<std::size_t>("num_clients");
  cfg.partition.classes_per_client = part.optional<std::size_t>("classes_per_client", 2);
  cfg.partition.beta = part.optional<double>("beta", 0.3);
  if (part.has("participating_fraction")) {
    cfg.partition.participating_fraction = part.optional<double>("participating_fraction", 1.0);
  }
  part.finish();

  auto model = root.child("model");
  cfg.model.dim = model.optional<std::size_t>("dim", 32);
  cfg.model.depth = model.optional<std::size_t>("depth", 8);
  cfg.model.heads = model.optional<std::size_t>("heads", 2);
  cfg.model.patch_size = model.optional<std::size_t>("patch_size", 8);
  cfg.model.mlp_ratio = model.optional<std::size_t>("mlp_ratio", 4);
  cfg.model.init_scale = model.optional<double>("init_scale", 0.02);
  cfg.model.image_size = cfg.data.image_size;
  cfg.model.seed = cfg.seed;
  model.finish();

  auto train = root.child("train");
  TrainConfig& t = cfg.train;
  t.rounds = train.required<std::size_t>("rounds");
  t.clients_per_round = train.optional<std::size_t>("clients_per_round", 4);
  t.local_epochs = train.optional<std::size_t>("local_epochs", 1);
  t.batch_size = train.optional<std::size_t>("batch_size", 16);
  t.lr = train.optional<double>("lr", 0.1);
  t.lr_decay = train.optional<double>("lr_decay", 0.99);
  t.sgd_momentum = train.optional<double>("sgd_momentum", 0.9);
  t.grad_clip = train.optional<double>("grad_clip", 10.0);
  t.shared_prompts = train.optional<std::size_t>("shared_prompts", 1);
  t.strategy = parse_strategy(train.optional<std::string>("strategy", "shared+ccmp"));
  t.warmup_fraction = train.optional<double>("warmup_fraction", 1.0);
  t.weighted_fedavg = train.optional<bool>("weighted_fedavg", false);
  t.prompt_init_scale = train.optional<double>("prompt_init_scale", 0.02);
  t.eval_every = train.optional<std::size_t>("eval_every", 1);
  t.workers = train.optional<std::size_t>("workers", 1);
  train.finish();

  auto cc = root.child("ccmp");
  t.ccmp_layers = cc.optional<std::vector<std::size_t>>("layers", {5, 6, 7});
  t.tau = cc.optional<double>("tau", 0.05);
  t.proto_momentum = cc.optional<double>("momentum", 0.9);
  t.proto_period = cc.optional<std::size_t>("period", 1);
  t.detach_scores = cc.optional<bool>("detach_scores", false);
  t.refresh_ccmp = cc.optional<bool>("refresh", true);
  if (cc.has("dp_epsilon")) t.dp_epsilon = cc.optional<double>("dp_epsilon", 0.0);
  cc.finish();
  root.finish();

  t.num_clients = cfg.partition.num_clients;
  t.seed = cfg.seed;

  validate(cfg.data);
  validate(cfg.model);
  validate(t);
  for (std::size_t l : t.ccmp_layers) {
    if (l == 0 || l > cfg.model.depth) {
      throw ConfigError("ccmp.layers: layer " + std::to_string(l) + " outside 1.." +
                        std::to_string(cfg.model.depth));
    }
  }
  if (cfg.partition.participating_fraction) {
    const double f = *cfg.partition.participating_fraction;
    if (!(f > 0.0 && f < 1.0)) {
      throw ConfigError("partition.participating_fraction: must lie strictly in (0, 1)");
    }
  }
  return cfg;
}

inline json to_json(const ExperimentConfig& c) {
  json doms = json::array();
  for (const auto& d : c.data.domains) doms.push_back({{"angle", d.angle}, {"offset", d.offset}});
  json j;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  j["data"] = {{"num_classes", c.data.num_classes},
               {"train_per_class", c.data.train_per_class},
               {"test_per_class", c.data.test_per_class},
               {"image_size", c.data.image_size},
               {"separation", c.data.separation},
               {"noise", c.data.noise},
               {"domains", doms}};
  j["partition"] = {{"mode", to_string(c.partition.mode)},
                    {"num_clients", c.partition.num_clients},
                    {"classes_per_client", c.partition.classes_per_client},
                    {"beta", c.partition.beta}};
  if (c.partition.participating_fraction) {
    j["partition"]["participating_fraction"] = *c.partition.participating_fraction;
  } else {
    j["partition"]["participating_fraction"] = nullptr;
  }
  j["model"] = {{"dim", c.model.dim},           {"depth", c.model.depth},
                {"heads", c.model.heads},       {"patch_size", c.model.patch_size},
                {"mlp_ratio", c.model.mlp_ratio}, {"init_scale", c.model.init_scale}};
  const TrainConfig& t = c.train;
  j["train"] = {{"rounds", t.rounds},
                {"clients_per_round", t.clients_per_round},
                {"local_epochs", t.local_epochs},
                {"batch_size", t.batch_size},
                {"lr", t.lr},
                {"lr_decay", t.lr_decay},
                {"sgd_momentum", t.sgd_momentum},
                {"grad_clip", t.grad_clip},
                {"shared_prompts", t.shared_prompts},
                {"strategy", to_string(t.strategy)},
                {"warmup_fraction", t.warmup_fraction},
                {"weighted_fedavg", t.weighted_fedavg},
                {"prompt_init_scale", t.prompt_init_scale},
                {"eval_every", t.eval_every},
                {"workers", t.workers}};
  j["ccmp"] = {{"layers", t.ccmp_layers},
               {"tau", t.tau},
               {"momentum", t.proto_momentum},
               {"period", t.proto_period},
               {"detach_scores", t.detach_scores},
               {"refresh", t.refresh_ccmp}};
  if (t.dp_epsilon) {
    j["ccmp"]["dp_epsilon"] = *t.dp_epsilon;
  } else {
    j["ccmp"]["dp_epsilon"] = nullptr;
  }
  return j;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_experiment_config(j);
}

// Data, partition and client roster implied by a config.
struct ExperimentSetup {
  Dataset data;
  Partition partition;
  BackboneWeights backbone;
  std::vector<std::size_t> participating;
  std::vector<std::size_t> heldout;
};

inline Partition make_partition(const ExperimentConfig& cfg, const Dataset& ds) {
  if (cfg.partition.mode == PartitionMode::kPathological) {
    return partition_pathological(ds, cfg.partition.num_clients,
                                  cfg.partition.classes_per_client, cfg.seed);
  }
  return partition_dirichlet(ds, cfg.partition.num_clients, cfg.partition.beta, cfg.seed);
}

inline ExperimentSetup build_setup(const ExperimentConfig& cfg) {
  ExperimentSetup s;
  s.data = generate_synthetic(cfg.data, cfg.seed);
  s.partition = make_partition(cfg, s.data);
  s.backbone = init_backbone(cfg.model);
  if (cfg.partition.participating_fraction) {
    auto [p, h] = heldout_split(cfg.partition.num_clients, *cfg.partition.participating_fraction,
                                cfg.seed);
    s.participating = std::move(p);
    s.heldout = std::move(h);
  } else {
    s.participating.resize(cfg.partition.num_clients);
    std::iota(s.participating.begin(), s.participating.end(), 0);
  }
  return s;
}

namespace detail {

inline std::string fmt(double v) {
  if (!std::isfinite(v)) return "nan";
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("failed writing " + path.string());
}

inline void write_prompt_block(std::ostream& os, const std::string& owner,
                               const std::string& block, const Tensor& t) {
  if (t.empty()) return;
  for (std::size_t r = 0; r < t.rows(); ++r) {
    for (std::size_t c = 0; c < t.cols(); ++c) {
      os << owner << ',' << block << ',' << r << ',' << c << ',' << fmt(t.at(r, c)) << '\n';
    }
  }
}

}  // namespace detail

inline std::string metrics_header() {
  return "round,train_loss,mean_acc,worst_acc,heldout_mean_acc,heldout_worst_acc\n";
}

inline std::string metrics_row(const RoundLog& log) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  const bool has_part = log.evaluated && !log.participating.empty();
  const bool has_held = log.evaluated && !log.heldout.empty();
  std::ostringstream os;
  os << log.round << ',' << detail::fmt(log.train_loss) << ','
     << detail::fmt(has_part ? log.participating.mean : nan) << ','
     << detail::fmt(has_part ? log.participating.worst : nan) << ','
     << detail::fmt(has_held ? log.heldout.mean : nan) << ','
     << detail::fmt(has_held ? log.heldout.worst : nan) << '\n';
  return os.str();
}

// CSV rows: owner,block,row,col,value. Owner is "global" or "client<k>" for
// personalized prompt blocks.
inline std::string prompts_csv(const PromptParams& global,
                               const std::vector<ClientState>& clients) {
  std::ostringstream os;
  os << "owner,block,row,col,value\n";
  detail::write_prompt_block(os, "global", "shared", global.shared);
  detail::write_prompt_block(os, "global", "class_prompts", global.class_prompts);
  detail::write_prompt_block(os, "global", "head", global.head);
  for (const auto& c : clients) {
    if (!c.personal) continue;
    const std::string owner = "client" + std::to_string(c.id);
    detail::write_prompt_block(os, owner, "shared", c.personal->shared);
    detail::write_prompt_block(os, owner, "class_prompts", c.personal->class_prompts);
  }
  return os.str();
}

// Inverse of prompts_csv onto tensors with the expected shapes.
inline void read_prompts_csv(std::istream& is, PromptParams& global,
                             std::vector<ClientState>& clients) {
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 5) throw DataError("malformed prompt row: " + line);
    PromptParams* target = &global;
    if (f[0] != "global") {
      if (f[0].rfind("client", 0) != 0) throw DataError("unknown prompt owner: " + f[0]);
      const std::size_t id = std::stoul(f[0].substr(6));
      if (id >= clients.size()) throw IndexError("prompt owner out of range: " + f[0]);
      if (!clients[id].personal) clients[id].personal = global;
      target = &*clients[id].personal;
    }
    Tensor* t = f[1] == "shared"          ? &target->shared
                : f[1] == "class_prompts" ? &target->class_prompts
                : f[1] == "head"          ? &target->head
                                          : nullptr;
    if (t == nullptr || t->empty()) throw DataError("unknown prompt block: " + f[1]);
    const std::size_t r = std::stoul(f[2]), c = std::stoul(f[3]);
    if (r >= t->rows() || c >= t->cols()) throw IndexError("prompt entry out of range: " + line);
    t->at(r, c) = std::stod(f[4]);
  }
}

struct RunSummary {
  std::vector<RoundLog> logs;
  EvalReport participating;
  EvalReport heldout;
  std::uint64_t backbone_before = 0;
  std::uint64_t backbone_after = 0;
  std::vector<std::size_t> heldout_ids;
  std::set<std::size_t> ever_sampled;
};

// Runs warm-up plus all rounds and writes every artifact into `out_dir`:
// config.json, metrics.csv, final_report.json, eval_report.csv, prompts.csv,
// prototypes.csv.
inline RunSummary run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  ExperimentConfig resolved = cfg;
  resolved.output_dir = out_dir.string();
  detail::write_text(out_dir / "config.json", to_json(resolved).dump(2) + "\n");

  ExperimentSetup setup = build_setup(cfg);
  auto clients = make_clients(setup.data, setup.partition);

  std::ofstream metrics(out_dir / "metrics.csv", std::ios::binary);
  if (!metrics) throw Error("cannot write metrics.csv");
  metrics << metrics_header();
  TrainingResult result =
      run_training(setup.backbone, setup.data, std::move(clients), setup.participating,
                   setup.heldout, cfg.train, [&](const RoundLog& log) {
                     metrics << metrics_row(log);
                     metrics.flush();
                   });
  metrics.close();

  RunSummary summary;
  summary.logs = result.logs;
  summary.participating = result.logs.back().participating;
  summary.heldout = result.logs.back().heldout;
  summary.backbone_before = result.backbone_before;
  summary.backbone_after = result.backbone_after;
  summary.heldout_ids = setup.heldout;
  for (const auto& log : result.logs) {
    summary.ever_sampled.insert(log.participants.begin(), log.participants.end());
  }

  if (result.backbone_before != result.backbone_after) {
    throw Error("frozen backbone changed during training");
  }

  const auto comm = comm_accounting({setup.data.num_classes, cfg.model.dim,
                                     cfg.train.shared_prompts,
                                     uses_ccmp(cfg.train.strategy) ? cfg.train.ccmp_layers.size() : 0,
                                     cfg.train.rounds, cfg.train.proto_period});
  json report;
  report["strategy"] = to_string(cfg.train.strategy);
  report["rounds"] = cfg.train.rounds;
  report["final_train_loss"] = result.logs.back().train_loss;
  report["participating"] = to_json(summary.participating);
  report["heldout"] = to_json(summary.heldout);
  report["heldout_clients"] = setup.heldout;
  report["backbone_fingerprint"] = std::to_string(result.backbone_after);
  report["prototype_fingerprint"] = std::to_string(result.state.bank.fingerprint());
  report["communication"] = {{"params_per_round", comm.params_per_round},
                             {"prototypes_per_period", comm.prototypes_per_period},
                             {"upload_total", comm.upload_total},
                             {"download_total", comm.download_total}};
  json rounds = json::array();
  for (const auto& log : result.logs) rounds.push_back(log.participants);
  report["participants_per_round"] = std::move(rounds);
  detail::write_text(out_dir / "final_report.json", report.dump(2) + "\n");

  std::ostringstream eval_csv;
  write_eval_csv(eval_csv, summary.participating, summary.heldout);
  detail::write_text(out_dir / "eval_report.csv", eval_csv.str());
  detail::write_text(out_dir / "prompts.csv", prompts_csv(result.state.global, result.clients));
  std::ostringstream protos;
  result.state.bank.write_csv(protos);
  detail::write_text(out_dir / "prototypes.csv", protos.str());
  return summary;
}

// Re-evaluates a finished run from its directory (config.json, prompts.csv,
// prototypes.csv) and writes eval_report.json next to them.
inline std::pair<EvalReport, EvalReport> evaluate_saved_run(const std::filesystem::path& run_dir) {
  const ExperimentConfig cfg = load_experiment_config(run_dir / "config.json");
  ExperimentSetup setup = build_setup(cfg);
  auto clients = make_clients(setup.data, setup.partition);
  Rng init_rng = make_rng(cfg.seed, SeedPurpose::kPromptInit);
  PromptParams global = PromptParams::init(cfg.model.dim, cfg.train.shared_prompts,
                                           setup.data.num_classes, init_rng,
                                           cfg.train.prompt_init_scale);
  {
    std::ifstream in(run_dir / "prompts.csv");
    if (!in) throw DataError("missing prompts.csv in " + run_dir.string());
    read_prompts_csv(in, global, clients);
  }
  ccmp::PrototypeBank bank(cfg.train.ccmp_layers, setup.data.num_classes, cfg.model.dim,
                           cfg.train.proto_momentum, cfg.train.proto_period);
  {
    std::ifstream in(run_dir / "prototypes.csv");
    if (!in) throw DataError("missing prototypes.csv in " + run_dir.string());
    bank.read_csv(in);
  }
  const EmbeddedDataset tokens = embed_dataset(setup.backbone, setup.data);
  const PromptSetup ps = cfg.train.prompt_setup();
  EvalReport part = evaluate_clients(setup.backbone, setup.data, tokens, global, bank, clients,
                                     setup.participating, ps, cfg.train.workers);
  EvalReport held;
  if (!setup.heldout.empty()) {
    held = evaluate_clients(setup.backbone, setup.data, tokens, global, bank, clients,
                            setup.heldout, ps, cfg.train.workers);
  }
  json out;
  out["participating"] = to_json(part);
  out["heldout"] = to_json(held);
  detail::write_text(run_dir / "eval_report.json", out.dump(2) + "\n");
  return {std::move(part), std::move(held)};
}

struct PartitionSummary {
  bool disjoint = false;
  std::vector<std::vector<std::size_t>> histograms;
  std::vector<double> entropy;
};

// Writes partition.csv and histogram.csv for the configured split.
inline PartitionSummary partition_experiment(const ExperimentConfig& cfg,
                                             const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  const Dataset ds = generate_synthetic(cfg.data, cfg.seed);
  const Partition part = make_partition(cfg, ds);
  PartitionSummary s;
  s.disjoint = is_disjoint_cover(part.train, ds.train.size()) &&
               is_disjoint_cover(part.test, ds.test.size());
  s.histograms = label_histograms(ds.train, part.train, ds.num_classes);
  for (const auto& h : s.histograms) s.entropy.push_back(label_entropy(h));
  std::ostringstream pcsv, hcsv;
  write_partition_csv(pcsv, ds, part);
  write_histogram_csv(hcsv, ds, part);
  detail::write_text(out_dir / "partition.csv", pcsv.str());
  detail::write_text(out_dir / "histogram.csv", hcsv.str());
  return s;
}

struct GradcheckOptions {
  std::uint64_t seed = 0;
  std::size_t dim = 16;
  std::size_t depth = 4;
  std::size_t heads = 2;
  std::size_t classes = 4;
  std::size_t shared_prompts = 1;
  std::vector<std::size_t> ccmp_layers{2, 3};
  std::size_t samples = 2;
  double step = 1e-5;
  double threshold = 1e-4;
  // Test-only: corrupts every matmul backward by this factor.
  double matmul_fault = 1.0;
};

struct GradcheckReport {
  std::map<std::string, double> max_rel_error;  // per block
  std::size_t parameters = 0;
  bool passed = false;
};

// Autodiff vs central differences over every trainable block of a small
// prompted model. The prototype bank and priors are random but fixed.
inline GradcheckReport gradcheck(const GradcheckOptions& opt) {
  BackboneConfig bc;
  bc.dim = opt.dim;
  bc.depth = opt.depth;
  bc.heads = opt.heads;
  bc.seed = opt.seed;
  // Larger weights than the training default so every path carries signal.
  bc.init_scale = 0.2;
  const BackboneWeights w = init_backbone(bc);

  Rng rng = make_rng(opt.seed, SeedPurpose::kProbe);
  PromptParams params = PromptParams::init(opt.dim, opt.shared_prompts, opt.classes, rng, 0.5);
  const std::size_t count = params.parameter_count();
  if (count >= 5000) throw ConfigError("gradcheck model too large for finite differences");

  ccmp::PrototypeBank bank(opt.ccmp_layers, opt.classes, opt.dim, 0.9, 1);
  std::normal_distribution<double> unit(0.0, 1.0);
  for (std::size_t l : opt.ccmp_layers) {
    for (double& v : bank.layer(l).data()) v = unit(rng);
  }
  ccmp::ClassPriors priors{std::vector<double>(opt.classes)};
  double total = 0.0;
  for (double& p : priors.values) total += (p = 0.5 + std::abs(unit(rng)));
  for (double& p : priors.values) p /= total;

  std::vector<Tensor> inputs;
  std::vector<std::size_t> labels;
  for (std::size_t i = 0; i < opt.samples; ++i) {
    Tensor img({bc.image_size, bc.image_size});
    for (double& v : img.data()) v = unit(rng);
    inputs.push_back(embed_patches(w, img));
    labels.push_back(i % opt.classes);
  }
  ForwardConfig fwd;
  fwd.ccmp_layers = opt.ccmp_layers;
  fwd.tau = 0.5;

  auto loss_of = [&](const PromptParams& p) {
    double l = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      const ForwardTrace tr = forward_with_prompts(w, p, inputs[i], &bank, &priors, fwd);
      Tape t;
      l += cross_entropy(t.constant(Tensor::row(tr.logits)), labels[i]).value()[0];
    }
    return l / static_cast<double>(inputs.size());
  };

  params.set_requires_grad(true);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Tape tape;
    tape.set_matmul_fault(opt.matmul_fault);
    PromptVars vars = bind_trainable(tape, params);
    TapeForward f = forward_on_tape(tape, w, vars, inputs[i], &bank, &priors, fwd);
    tape.backward(scale(cross_entropy(f.logits, labels[i]), 1.0 / static_cast<double>(inputs.size())));
  }

  GradcheckReport report;
  report.parameters = count;
  const std::vector<std::pair<std::string, Tensor PromptParams::*>> blocks = {
      {"P_S", &PromptParams::shared},
      {"P_C", &PromptParams::class_prompts},
      {"H", &PromptParams::head}};
  report.passed = true;
  for (const auto& [name, member] : blocks) {
    Tensor& block = params.*member;
    if (block.empty()) continue;
    PromptParams probe = params;
    probe.set_requires_grad(false);
    const Tensor numeric = finite_diff_grad(
        [&](const Tensor& x) {
          probe.*member = x;
          return loss_of(probe);
        },
        block, opt.step);
    const double err = max_relative_error(block.grad(), numeric.data());
    report.max_rel_error[name] = err;
    if (!(err < opt.threshold)) report.passed = false;
  }
  return report;
}

}  // namespace fedprompt
