#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "experiment.hpp"

namespace equiseg::tools {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumeric = 3;
inline constexpr int kExitIo = 4;

int cmd_gen(const ExperimentConfig& config, std::ostream& out);
int cmd_train(const ExperimentConfig& config, std::ostream& out);
int cmd_eval(const ExperimentConfig& config, std::ostream& out);
int cmd_robust(const ExperimentConfig& config, std::ostream& out);
int cmd_gradcheck(const ExperimentConfig& config, std::ostream& out);

// Parses `args` (without the program name), runs the command and maps
// failures to exit codes.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace equiseg::tools
