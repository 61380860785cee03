#include "neuroextract/core/case_record.hpp"

#include <fstream>

#include "neuroextract/core/error.hpp"

namespace neuroextract {
namespace fs = std::filesystem;

namespace {

std::string rel(const fs::path& p, const fs::path& base) {
  if (p.empty()) return "";
  return p.lexically_relative(base).generic_string();
}

fs::path resolve(const std::string& s, const fs::path& base) {
  if (s.empty()) return {};
  const fs::path p(s);
  return p.is_absolute() ? p : (base / p).lexically_normal();
}

}  // namespace

const char* to_string(Contrast c) {
  switch (c) {
    case Contrast::T2Base: return "t2_base";
    case Contrast::R2: return "r2";
    case Contrast::AdcBase: return "adc_base";
    case Contrast::AdcRate: return "adc_rate";
  }
  return "?";
}

Contrast contrast_from_string(const std::string& name) {
  for (const Contrast c : kAllContrasts)
    if (name == to_string(c)) return c;
  throw Error(ErrorKind::Config, "unknown contrast '" + name + "'");
}

nlohmann::json to_manifest_json(const CaseRecord& r, const fs::path& manifest_dir) {
  const fs::path base = fs::absolute(manifest_dir);
  nlohmann::json paths;
  paths["t2_echoes"] = nlohmann::json::array();
  for (const auto& p : r.t2_echo_paths) paths["t2_echoes"].push_back(rel(fs::absolute(p), base));
  paths["dwi"] = nlohmann::json::array();
  for (const auto& p : r.dwi_paths) paths["dwi"].push_back(rel(fs::absolute(p), base));
  for (const Contrast c : kAllContrasts)
    paths[to_string(c)] = r.map_path(c).empty() ? "" : rel(fs::absolute(r.map_path(c)), base);
  paths["truth_native"] = r.truth_native_path.empty() ? "" : rel(fs::absolute(r.truth_native_path), base);

  nlohmann::json j;
  j["case_id"] = r.case_id;
  j["site"] = r.site;
  j["timepoint"] = r.timepoint;
  j["t2_echoes_ms"] = r.t2_echoes_ms;
  j["b_values"] = r.b_values;
  j["paths"] = paths;
  j["truth_mask_path"] = r.truth_mask_path ? nlohmann::json(rel(fs::absolute(*r.truth_mask_path), base)) : nlohmann::json();
  j["units"] = {{"r2", "1/ms"}, {"adc", "mm^2/s"}, {"t2_echoes", "ms"}, {"b_values", "s/mm^2"}};
  j["config_hash"] = r.config_hash;
  return j;
}

void validate_manifest_row(const nlohmann::json& j) {
  auto need = [&](const char* key, bool ok) {
    if (!j.contains(key) || !ok) throw Error(ErrorKind::Data, std::string("manifest row: bad or missing '") + key + "'");
  };
  if (!j.is_object()) throw Error(ErrorKind::Data, "manifest row is not an object");
  need("case_id", j.contains("case_id") && j["case_id"].is_string() && !j["case_id"].get<std::string>().empty());
  need("site", j.contains("site") && j["site"].is_string());
  need("timepoint", j.contains("timepoint") && j["timepoint"].is_string());
  need("t2_echoes_ms", j.contains("t2_echoes_ms") && j["t2_echoes_ms"].is_array());
  need("b_values", j.contains("b_values") && j["b_values"].is_array());
  need("paths", j.contains("paths") && j["paths"].is_object());
  need("truth_mask_path", j.contains("truth_mask_path") && (j["truth_mask_path"].is_string() || j["truth_mask_path"].is_null()));
  need("units", j.contains("units") && j["units"].is_object() && j["units"].contains("r2") && j["units"].contains("adc"));
  for (const auto& v : j["t2_echoes_ms"])
    if (!v.is_number()) throw Error(ErrorKind::Data, "manifest row: t2_echoes_ms must be numbers");
  for (const auto& v : j["b_values"])
    if (!v.is_number()) throw Error(ErrorKind::Data, "manifest row: b_values must be numbers");
  const auto& p = j["paths"];
  for (const char* key : {"t2_echoes", "dwi"})
    if (p.contains(key) && !p[key].is_array()) throw Error(ErrorKind::Data, std::string("manifest row: paths.") + key + " must be an array");
  if (j["units"]["r2"] != "1/ms" || j["units"]["adc"] != "mm^2/s")
    throw Error(ErrorKind::Data, "manifest row: unexpected units");
}

CaseRecord case_from_manifest_json(const nlohmann::json& j, const fs::path& manifest_dir) {
  validate_manifest_row(j);
  const fs::path base = fs::absolute(manifest_dir);
  CaseRecord r;
  r.case_id = j["case_id"].get<std::string>();
  r.site = j["site"].get<std::string>();
  r.timepoint = j["timepoint"].get<std::string>();
  r.t2_echoes_ms = j["t2_echoes_ms"].get<std::vector<double>>();
  r.b_values = j["b_values"].get<std::vector<double>>();
  const auto& p = j["paths"];
  if (p.contains("t2_echoes"))
    for (const auto& s : p["t2_echoes"]) r.t2_echo_paths.push_back(resolve(s.get<std::string>(), base));
  if (p.contains("dwi"))
    for (const auto& s : p["dwi"]) r.dwi_paths.push_back(resolve(s.get<std::string>(), base));
  for (const Contrast c : kAllContrasts)
    if (p.contains(to_string(c))) r.map_paths[static_cast<int>(c)] = resolve(p[to_string(c)].get<std::string>(), base);
  if (p.contains("truth_native")) r.truth_native_path = resolve(p["truth_native"].get<std::string>(), base);
  if (j["truth_mask_path"].is_string()) r.truth_mask_path = resolve(j["truth_mask_path"].get<std::string>(), base);
  if (j.contains("config_hash") && j["config_hash"].is_string()) r.config_hash = j["config_hash"].get<std::string>();
  return r;
}

std::vector<CaseRecord> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open manifest " + path.string());
  const fs::path dir = fs::absolute(path).parent_path();
  std::vector<CaseRecord> rows;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      rows.push_back(case_from_manifest_json(nlohmann::json::parse(line), dir));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::Data, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const Error& e) {
      throw Error(ErrorKind::Data, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return rows;
}

void write_manifest(const std::vector<CaseRecord>& rows, const fs::path& path) {
  const fs::path dir = fs::absolute(path).parent_path();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write manifest " + path.string());
  for (const auto& r : rows) out << to_manifest_json(r, dir).dump() << '\n';
  if (!out) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

}  // namespace neuroextract
