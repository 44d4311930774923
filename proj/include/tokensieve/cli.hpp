// Copyright 2026 The tokensieve Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace tokensieve {

enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,
  kExitConfig = 2,
  kExitDivergence = 3,
  kExitGradcheck = 4,
  kExitIo = 5,
  kExitCheckpoint = 6,
};

// Overrides the output directory of every command; --out takes precedence.
inline constexpr const char* kOutDirEnv = "TOKENSIEVE_OUT";

// Runs one subcommand. args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace tokensieve
