#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace flatmin::cli {

// Stable process exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitFailure = 3;

struct CommandOptions {
  std::filesystem::path config;
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out_dir;
};

// Each command reads only its config (plus files the config names), writes
// its outputs atomically under the output directory together with
// resolved_config.json, and returns an exit code.
int cmd_train(const CommandOptions& options, std::ostream& log);
int cmd_flatness(const CommandOptions& options, std::ostream& log);
int cmd_converge(const CommandOptions& options, std::ostream& log);
int cmd_bench(const CommandOptions& options, std::ostream& log);
int cmd_sweep(const CommandOptions& options, std::ostream& log);

// flatmin train|flatness|converge|bench|sweep --config <path> [--seed N] [--out-dir D]
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace flatmin::cli
