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

// Command-line entry point: run, gradcheck, partition, eval.

#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "fedprompt/fedprompt.hpp"

namespace {

namespace fs = std::filesystem;
using fedprompt::ExperimentConfig;

constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

ExperimentConfig resolve(const CommonFlags& f) {
  ExperimentConfig cfg = fedprompt::load_experiment_config(f.config);
  if (f.seed) {
    cfg.seed = *f.seed;
    cfg.train.seed = *f.seed;
    cfg.model.seed = *f.seed;
  }
  if (!f.out.empty()) cfg.output_dir = f.out;
  if (const char* env = std::getenv("FEDPROMPT_WORKERS"); env != nullptr && *env != '\0') {
    try {
      const long w = std::stol(env);
      if (w < 1) throw std::invalid_argument("non-positive");
      cfg.train.workers = static_cast<std::size_t>(w);
    } catch (const std::exception&) {
      throw fedprompt::ConfigError(std::string("FEDPROMPT_WORKERS: expected a positive integer, got '") +
                                   env + "'");
    }
  }
  if (cfg.output_dir.empty()) {
    throw fedprompt::ConfigError("output_dir: missing (set it in the config or pass --out)");
  }
  return cfg;
}

int cmd_run(const CommonFlags& f) {
  const ExperimentConfig cfg = resolve(f);
  const auto summary = fedprompt::run_experiment(cfg, cfg.output_dir);
  std::cout << std::fixed << std::setprecision(4) << "strategy " << to_string(cfg.train.strategy)
            << "  rounds " << cfg.train.rounds << "\n"
            << "participating mean " << summary.participating.mean << "  worst "
            << summary.participating.worst << "\n";
  if (!summary.heldout.clients.empty()) {
    std::cout << "heldout mean " << summary.heldout.mean << "  worst " << summary.heldout.worst
              << "\n";
  }
  std::cout << "artifacts in " << cfg.output_dir << "\n";
  return 0;
}

int cmd_partition(const CommonFlags& f) {
  const ExperimentConfig cfg = resolve(f);
  const auto s = fedprompt::partition_experiment(cfg, cfg.output_dir);
  std::cout << std::fixed << std::setprecision(4);
  for (std::size_t c = 0; c < s.histograms.size(); ++c) {
    std::size_t bins = 0;
    for (std::size_t n : s.histograms[c]) bins += n > 0;
    std::cout << "client " << c << "  classes " << bins << "  entropy " << s.entropy[c] << "\n";
  }
  std::cout << "disjoint cover: " << (s.disjoint ? "yes" : "NO") << "\n";
  return s.disjoint ? 0 : kExitFailure;
}

int cmd_eval(const std::string& run_dir) {
  if (run_dir.empty()) throw fedprompt::ConfigError("--out: run directory required");
  const auto [part, held] = fedprompt::evaluate_saved_run(run_dir);
  std::cout << std::fixed << std::setprecision(4) << "participating mean " << part.mean
            << "  worst " << part.worst << "\n";
  if (!held.clients.empty()) {
    std::cout << "heldout mean " << held.mean << "  worst " << held.worst << "\n";
  }
  return 0;
}

int cmd_gradcheck(const fedprompt::GradcheckOptions& opt) {
  const auto report = fedprompt::gradcheck(opt);
  std::cout << "parameters " << report.parameters << "\n" << std::scientific << std::setprecision(3);
  for (const auto& [block, err] : report.max_rel_error) {
    std::cout << block << " max_rel_error " << err << "\n";
  }
  std::cout << (report.passed ? "ok" : "FAILED") << " (threshold " << opt.threshold << ")\n";
  return report.passed ? 0 : kExitFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated prompt tuning with class-contextualized mixed prompts"};
  app.require_subcommand(1);

  CommonFlags run_flags, part_flags;
  auto* run = app.add_subcommand("run", "Train and write metrics, prompts and prototypes");
  run->add_option("--config", run_flags.config, "JSON experiment config")->required();
  run->add_option("--seed", run_flags.seed, "Override the master seed");
  run->add_option("--out", run_flags.out, "Output directory");

  auto* part = app.add_subcommand("partition", "Write the client partition without training");
  part->add_option("--config", part_flags.config, "JSON experiment config")->required();
  part->add_option("--seed", part_flags.seed, "Override the master seed");
  part->add_option("--out", part_flags.out, "Output directory");

  std::string eval_dir;
  auto* eval = app.add_subcommand("eval", "Re-evaluate a saved run directory");
  eval->add_option("--out", eval_dir, "Run directory written by `run`")->required();

  fedprompt::GradcheckOptions gc;
  auto* grad = app.add_subcommand("gradcheck", "Autodiff vs finite differences");
  grad->add_option("--seed", gc.seed, "Seed");
  grad->add_option("--dim", gc.dim, "Embedding width");
  grad->add_option("--depth", gc.depth, "Transformer layers");
  grad->add_option("--classes", gc.classes, "Number of classes");
  grad->add_option("--ccmp-layers", gc.ccmp_layers, "1-based CCMP layers");
  grad->add_option("--fault", gc.matmul_fault)->group("");  // test-only

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return cmd_run(run_flags);
    if (*part) return cmd_partition(part_flags);
    if (*eval) return cmd_eval(eval_dir);
    if (*grad) return cmd_gradcheck(gc);
  } catch (const fedprompt::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const fedprompt::TrainingError& e) {
    std::cerr << "training error: " << e.what() << "\n";
    return kExitFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}
