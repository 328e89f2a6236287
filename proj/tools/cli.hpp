#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace neuroalign::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitNumeric = 3;

// Environment variable naming the default output root (default "runs").
inline constexpr const char* kOutputRootEnv = "NEUROALIGN_OUT";

// Runs one command. `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

std::string sha256_file(const std::filesystem::path& path);

}  // namespace neuroalign::cli
