#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "sepdrop/gradcheck.hpp"
#include "sepdrop/run_config.hpp"

namespace sepdrop {

enum ExitCode : int {
  kExitOk = 0,
  kExitVerificationFailed = 1,
  kExitConfigError = 2,
  kExitRuntimeError = 3,
};

struct CliHooks {
  std::vector<GradcheckComponent> extra_gradcheck;  // appended to the standard list
};

/// sepdrop {train|eval|inspect|gradcheck} [--config FILE] [--key value ...]
/// Flags are the config keys with '-' for '_' and override the file.
/// `args` excludes the program name. Failures print one line
///   error kind=<config|data|numeric|io|verification> message=<text>
/// to `err` and return the matching exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err, const CliHooks& hooks = {});

/// Depth, alpha, block count, per-block widths and survival, parameter count.
/// `format` is "text" or "csv".
std::string inspect_report(const NetworkSpec& spec, const std::string& format);

/// Largest depth the gradient check accepts.
inline constexpr int kGradcheckMaxDepth = 14;

}  // namespace sepdrop
