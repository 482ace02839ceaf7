#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "epalab/error.hpp"

namespace epalab::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitCertificate = 3;

int exit_code(ErrorKind kind) noexcept;

/// Runs one invocation. `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace epalab::cli
