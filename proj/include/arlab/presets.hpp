// SPDX-License-Identifier: Apache-2.0
//
// Named end-to-end experiments. Each writes its reports, loss traces and pair
// datasets under <output_dir>/<name>/ and checks its own assertions.
#pragma once

#include "arlab/harness.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace arlab {

struct PresetOptions {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> output_dir;
  /// Merge patch applied to the preset's base configuration. Arms still set
  /// their own pipeline toggles and distribution parameters on top of it.
  Json overrides = Json::object();
};

struct AssertionOutcome {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct PresetOutcome {
  std::string name;
  std::filesystem::path directory;
  std::vector<AssertionOutcome> assertions;
  DiagnosticsReport report;
  std::vector<std::filesystem::path> files;

  bool passed() const;
  /// Null when every assertion passed.
  const AssertionOutcome* first_failure() const;
};

const std::vector<std::string>& preset_names();
bool is_preset(const std::string& name);
/// Base configuration of a preset; DomainError for an unknown name.
ExperimentConfig preset_config(const std::string& name);
PresetOutcome run_preset(const std::string& name, const PresetOptions& options = {});

}  // namespace arlab
