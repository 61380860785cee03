#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"
#include "neuroextract/neunet/training.hpp"
#include "neuroextract/prequal/prequal.hpp"
#include "neuroextract/ruleseg/ruleseg.hpp"

namespace neuroextract::cli {

struct PathsConfig {
  std::filesystem::path input_dir;
  std::filesystem::path work_dir = "work";
  std::filesystem::path output_dir = "out";
};

struct PipelineConfig {
  PathsConfig paths;
  prequal::NlmParams nlm;
  double iso_spacing_mm = 0.15;
  ruleseg::RuleParams rule;
  /// in_channels is set per model from the channel mode; it is not a key.
  neunet::UNetConfig unet;
  neunet::TrainConfig train;
  std::uint64_t seed = 7;
  /// 0 defers to NEUROEXTRACT_THREADS, then the hardware thread count.
  int threads = 0;

  /// Throws Config naming the offending key.
  void validate() const;
  int effective_threads() const;
};

/// Parses the TOML subset used by pipeline configs:
///   # comment
///   [section]
///   key = 1.5 | 42 | "text" | true
/// Absent keys keep their defaults; unknown sections or keys, duplicate keys
/// and bad values raise Config errors of the form "<source>:<line>: ...".
PipelineConfig parse_config(const std::string& text, const std::string& source = "<config>");
PipelineConfig load_config(const std::filesystem::path& path);

/// Every key with its effective value, in a form parse_config reads back to
/// an equal config.
std::string to_toml(const PipelineConfig& c);
nlohmann::json to_json(const PipelineConfig& c);
bool operator==(const PipelineConfig& a, const PipelineConfig& b);

/// Short hash of the canonical TOML echo.
std::string config_hash(const PipelineConfig& c);

}  // namespace neuroextract::cli
