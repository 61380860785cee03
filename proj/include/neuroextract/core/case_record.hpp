#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace neuroextract {

/// The four quantitative maps fed to the segmentation network, in channel
/// order.
enum class Contrast { T2Base = 0, R2 = 1, AdcBase = 2, AdcRate = 3 };

inline constexpr std::array<Contrast, 4> kAllContrasts = {Contrast::T2Base, Contrast::R2, Contrast::AdcBase,
                                                          Contrast::AdcRate};

const char* to_string(Contrast c);
Contrast contrast_from_string(const std::string& name);

/// One imaging session as listed in a manifest. Paths are absolute once
/// loaded; on disk they are stored relative to the manifest directory.
struct CaseRecord {
  std::string case_id;
  std::string site;
  std::string timepoint;
  std::vector<double> t2_echoes_ms;
  std::vector<double> b_values;
  std::vector<std::filesystem::path> t2_echo_paths;
  std::vector<std::filesystem::path> dwi_paths;
  /// Indexed by Contrast; empty when the map has not been produced.
  std::array<std::filesystem::path, 4> map_paths;
  std::filesystem::path truth_native_path;
  std::optional<std::filesystem::path> truth_mask_path;
  std::string config_hash;

  const std::filesystem::path& map_path(Contrast c) const { return map_paths[static_cast<int>(c)]; }
};

nlohmann::json to_manifest_json(const CaseRecord& r, const std::filesystem::path& manifest_dir);
CaseRecord case_from_manifest_json(const nlohmann::json& j, const std::filesystem::path& manifest_dir);

/// JSON Lines manifest helpers. Reading validates every row against the
/// manifest schema and throws Data with the offending line number.
std::vector<CaseRecord> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::vector<CaseRecord>& rows, const std::filesystem::path& path);

/// Throws Data when a row is missing a required field or has the wrong type.
void validate_manifest_row(const nlohmann::json& j);

}  // namespace neuroextract
