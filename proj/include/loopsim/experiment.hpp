#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

namespace loopsim {

/// Invalid or inconsistent configuration; the message names the offending
/// field.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Parses a config file (JSON, // and /* */ comments allowed).
nlohmann::json load_config(const std::filesystem::path& path);

struct RunResult {
  int failed_verifiers = 0;
  nlohmann::json summary;
};

/// Executes one experiment described by `config` and writes trace.csv,
/// summary.json and config-echo.json into `out_dir`. The optional seed
/// replaces the config's seed fields.
RunResult run_experiment(const nlohmann::json& config,
                         const std::filesystem::path& out_dir,
                         std::optional<std::uint64_t> seed_override = {});

/// Runs every grid point of a sweep config (kind "sweep"), one artifact
/// directory per point plus aggregate.csv; points may execute concurrently
/// across `jobs` threads. Per-point seeds derive from (base seed, index).
RunResult run_sweep(const nlohmann::json& config,
                    const std::filesystem::path& out_dir,
                    std::optional<std::uint64_t> seed_override = {},
                    int jobs = 1);

}  // namespace loopsim
