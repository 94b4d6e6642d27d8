#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>

#include "json.hpp"
#include "mxa/train.hpp"

namespace mxa::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kNumeric = 2, kIo = 3 };

// Entry point behind the `mxa` binary; output goes to the given streams.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

// SHA-1 of "blob <size>\0<content>", as git names file contents.
std::string git_blob_hash(std::string_view content);

// Everything needed to reproduce a training run.
struct RunManifest {
  train::RunConfig config;
  std::string config_hash;  // git_blob_hash of the canonical config JSON
  nlohmann::json inputs;    // data, val, teacher paths
  std::map<std::string, std::string> layout;

  nlohmann::json to_json() const;
};

RunManifest make_manifest(const train::RunConfig& config, nlohmann::json inputs);

// Reads a run config file. A manifest.json written by `train` is accepted too,
// in which case its "config" section is used.
train::RunConfig load_run_config(const std::filesystem::path& path);

// Builds the model stored in a checkpoint written by `train`.
model::Model load_model(const std::filesystem::path& checkpoint);

}  // namespace mxa::cli
