#pragma once

#include <iosfwd>
#include <span>
#include <string>

namespace vqa::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;

/// Entry point shared by the executable and the tests. `args` excludes the
/// program name. Results go to `out`, diagnostics to `err`.
int run(std::span<const std::string> args, std::ostream& out, std::ostream& err);

}  // namespace vqa::cli
