#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>

#include "acmil/data.hpp"
#include "acmil/optim.hpp"

namespace acmil {

/// Everything one command invocation needs. Serialized with every default
/// resolved, so the copy written next to a run's outputs reproduces it.
struct RunConfig {
  TrainConfig train;
  SyntheticConfig synthetic;
  std::array<double, 3> split_ratios{0.6, 0.2, 0.2};
  std::uint64_t split_seed = 0;
  std::string data_path;
  std::string out_dir;

  struct Exports {
    bool attention = false;
    bool embeddings = false;
    bool history = true;
  } exports;
};

Json to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const Json& doc);

/// Empty path -> all defaults.
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace acmil
