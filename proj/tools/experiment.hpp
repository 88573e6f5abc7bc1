#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "equiseg/robustness.hpp"
#include "equiseg/synth.hpp"
#include "equiseg/trainer.hpp"

namespace CLI {
class App;
}

namespace equiseg::tools {

/// Every knob of the command-line tool. Defaults reproduce the desk-scale
/// setup; a JSON config file and then flags override them.
struct ExperimentConfig {
  ModelConfig model;
  SceneConfig scene;
  ScheduleConfig schedule;
  RobustnessProtocol protocol;

  std::string dataset = "data";
  std::string split = "train";
  std::string output = "runs/default";
  std::string checkpoint;  // defaults to <output>/checkpoint
  std::string report;      // optional report file
  std::vector<std::string> modalities;  // eval/robust filter

  std::size_t train_count = 64;
  std::size_t val_count = 16;
  std::size_t checkpoint_every = 0;  // 0 writes only the final checkpoint
  std::size_t log_every = 50;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  bool force = false;

  std::string emm = "all";  // avg | p | all
  bool self_test = false;

  std::string corrupt;  // gradcheck fault injection
  std::size_t grad_seeds = 20;
  double grad_tolerance = 1e-4;
  std::vector<std::string> grad_only;

  std::string checkpoint_dir() const { return checkpoint.empty() ? output + "/checkpoint" : checkpoint; }
  // The resolved flag set, printed into every report.
  nlohmann::json provenance(const std::string& command) const;
};

enum class Command { gen, train, eval, robust, gradcheck };

// Registers the shared and per-command options on `app` bound to `config`.
void bind_options(CLI::App& app, ExperimentConfig& config, Command command);

// Flattens a JSON config (nested objects become dotted names) into
// "--name value" tokens.
std::vector<std::string> config_tokens(const nlohmann::json& j);

// Fallback for --threads.
std::size_t default_threads();

}  // namespace equiseg::tools
