#include "neuroextract/cli/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "neuroextract/core/hash.hpp"
#include "neuroextract/core/parallel.hpp"

namespace neuroextract::cli {
namespace fs = std::filesystem;

namespace {

struct Located {
  std::string source;
  int line = 0;
  [[noreturn]] void fail(const std::string& what) const {
    throw Error(ErrorKind::Config, source + ":" + std::to_string(line) + ": " + what);
  }
};

// Raw right-hand side; typed conversion happens per key.
struct Value {
  enum Kind { Number, String, Bool } kind = Number;
  std::string text;
  bool flag = false;
};

struct Key {
  std::string section;
  std::string name;
  std::function<void(PipelineConfig&, const Value&, const Located&)> set;
  std::function<std::string(const PipelineConfig&)> get;
};

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  std::string s = buf;
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (const char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + '"';
}

double as_double(const Value& v, const Located& at, const std::string& key) {
  if (v.kind != Value::Number) at.fail(key + " expects a number");
  const char* b = v.text.data();
  const char* e = b + v.text.size();
  double out = 0.0;
  const auto r = std::from_chars(b, e, out);
  if (r.ec != std::errc() || r.ptr != e) at.fail(key + ": cannot parse number '" + v.text + "'");
  return out;
}

template <class I>
I as_integer(const Value& v, const Located& at, const std::string& key) {
  if (v.kind != Value::Number) at.fail(key + " expects an integer");
  const char* b = v.text.data();
  const char* e = b + v.text.size();
  I out = 0;
  const auto r = std::from_chars(b, e, out);
  if (r.ec == std::errc::result_out_of_range) at.fail(key + " is out of range");
  if (r.ec != std::errc() || r.ptr != e) at.fail(key + " expects an integer, got '" + v.text + "'");
  return out;
}

template <class Get>
Key real(std::string section, std::string name, Get get) {
  const std::string full = section + "." + name;
  return {section, name,
          [get, full](PipelineConfig& c, const Value& v, const Located& at) { get(c) = as_double(v, at, full); },
          [get](const PipelineConfig& c) { return fmt_double(get(const_cast<PipelineConfig&>(c))); }};
}

template <class Get>
Key integer(std::string section, std::string name, Get get) {
  const std::string full = section.empty() ? name : section + "." + name;
  return {section, name,
          [get, full](PipelineConfig& c, const Value& v, const Located& at) {
            using T = std::remove_reference_t<decltype(get(c))>;
            const T x = as_integer<T>(v, at, full);
            get(c) = x;
          },
          [get](const PipelineConfig& c) { return std::to_string(get(const_cast<PipelineConfig&>(c))); }};
}

template <class Get>
Key path(std::string section, std::string name, Get get) {
  const std::string full = section + "." + name;
  return {section, name,
          [get, full](PipelineConfig& c, const Value& v, const Located& at) {
            if (v.kind != Value::String) at.fail(full + " expects a quoted string");
            get(c) = fs::path(v.text);
          },
          [get](const PipelineConfig& c) { return quote(get(const_cast<PipelineConfig&>(c)).generic_string()); }};
}

const std::vector<Key>& registry() {
  using C = PipelineConfig;
  static const std::vector<Key> keys = {
      integer("", "seed", [](C& c) -> std::uint64_t& { return c.seed; }),
      integer("", "threads", [](C& c) -> int& { return c.threads; }),
      path("paths", "input_dir", [](C& c) -> fs::path& { return c.paths.input_dir; }),
      path("paths", "work_dir", [](C& c) -> fs::path& { return c.paths.work_dir; }),
      path("paths", "output_dir", [](C& c) -> fs::path& { return c.paths.output_dir; }),
      integer("preprocess", "patch_radius", [](C& c) -> int& { return c.nlm.patch_radius; }),
      integer("preprocess", "search_radius", [](C& c) -> int& { return c.nlm.search_radius; }),
      real("preprocess", "h_factor", [](C& c) -> double& { return c.nlm.h_factor; }),
      real("preprocess", "iso_spacing_mm", [](C& c) -> double& { return c.iso_spacing_mm; }),
      real("rule", "lo_percentile", [](C& c) -> double& { return c.rule.lo_percentile; }),
      real("rule", "hi_percentile", [](C& c) -> double& { return c.rule.hi_percentile; }),
      real("rule", "sobel_scale", [](C& c) -> double& { return c.rule.sobel_scale; }),
      Key{"rule", "gradient_mode",
          [](C& c, const Value& v, const Located& at) {
            if (v.kind != Value::String) at.fail("rule.gradient_mode expects \"otsu\" or \"fixed\"");
            if (v.text == "otsu")
              c.rule.gradient_mode = ruleseg::GradientThresholdMode::Otsu;
            else if (v.text == "fixed")
              c.rule.gradient_mode = ruleseg::GradientThresholdMode::Fixed;
            else
              at.fail("rule.gradient_mode expects \"otsu\" or \"fixed\", got \"" + v.text + "\"");
          },
          [](const C& c) {
            return quote(c.rule.gradient_mode == ruleseg::GradientThresholdMode::Otsu ? "otsu" : "fixed");
          }},
      real("rule", "gradient_threshold", [](C& c) -> double& { return c.rule.gradient_threshold; }),
      integer("rule", "gradient_otsu_passes", [](C& c) -> int& { return c.rule.gradient_otsu_passes; }),
      real("rule", "k_factor", [](C& c) -> double& { return c.rule.k_factor; }),
      integer("rule", "min_segment_size", [](C& c) -> int& { return c.rule.min_segment_size; }),
      integer("rule", "morphology_radius", [](C& c) -> int& { return c.rule.morphology_radius; }),
      real("rule", "mrf_beta", [](C& c) -> double& { return c.rule.mrf_beta; }),
      integer("rule", "mrf_max_iters", [](C& c) -> int& { return c.rule.mrf_max_iters; }),
      real("rule", "brain_volume_min_mm3", [](C& c) -> double& { return c.rule.brain_volume_min_mm3; }),
      real("rule", "brain_volume_max_mm3", [](C& c) -> double& { return c.rule.brain_volume_max_mm3; }),
      real("rule", "leak_boundary_fraction", [](C& c) -> double& { return c.rule.leak_boundary_fraction; }),
      integer("unet", "levels", [](C& c) -> int& { return c.unet.levels; }),
      integer("unet", "base_channels", [](C& c) -> int& { return c.unet.base_channels; }),
      integer("unet", "input_size", [](C& c) -> int& { return c.unet.input_size; }),
      real("train", "learning_rate", [](C& c) -> double& { return c.train.learning_rate; }),
      integer("train", "batch_size", [](C& c) -> int& { return c.train.batch_size; }),
      integer("train", "epochs", [](C& c) -> int& { return c.train.epochs; }),
      real("train", "beta1", [](C& c) -> double& { return c.train.beta1; }),
      real("train", "beta2", [](C& c) -> double& { return c.train.beta2; }),
      real("train", "epsilon", [](C& c) -> double& { return c.train.epsilon; }),
      integer("train", "samples_per_epoch", [](C& c) -> int& { return c.train.samples_per_epoch; }),
      real("augment", "translate_fraction", [](C& c) -> double& { return c.train.augmentation.translate_fraction; }),
      real("augment", "rotate_degrees", [](C& c) -> double& { return c.train.augmentation.rotate_degrees; }),
      real("augment", "scale_min", [](C& c) -> double& { return c.train.augmentation.scale_min; }),
      real("augment", "scale_max", [](C& c) -> double& { return c.train.augmentation.scale_max; }),
      real("augment", "gamma_min", [](C& c) -> double& { return c.train.augmentation.gamma_min; }),
      real("augment", "gamma_max", [](C& c) -> double& { return c.train.augmentation.gamma_max; }),
      real("augment", "elastic_alpha_px", [](C& c) -> double& { return c.train.augmentation.elastic_alpha_px; }),
      real("augment", "elastic_sigma_px", [](C& c) -> double& { return c.train.augmentation.elastic_sigma_px; }),
  };
  return keys;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Drops a trailing comment that is not inside a string.
std::string strip_comment(const std::string& s) {
  bool in_str = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '\\' && in_str) {
      ++i;
      continue;
    }
    if (s[i] == '"') in_str = !in_str;
    if (s[i] == '#' && !in_str) return s.substr(0, i);
  }
  return s;
}

Value parse_value(const std::string& raw, const Located& at) {
  Value v;
  if (raw.empty()) at.fail("missing value");
  if (raw.front() == '"') {
    v.kind = Value::String;
    std::size_t i = 1;
    for (; i < raw.size() && raw[i] != '"'; ++i) {
      if (raw[i] == '\\') {
        if (++i == raw.size()) break;
        const char c = raw[i];
        v.text += c == 'n' ? '\n' : c == 't' ? '\t' : c;
      } else {
        v.text += raw[i];
      }
    }
    if (i >= raw.size()) at.fail("unterminated string");
    if (trim(raw.substr(i + 1)) != "") at.fail("unexpected text after string");
    return v;
  }
  if (raw == "true" || raw == "false") {
    v.kind = Value::Bool;
    v.flag = raw == "true";
    return v;
  }
  if (raw.front() == '[') at.fail("arrays are not supported here");
  std::string t;
  for (const char c : raw)
    if (c != '_') t += c;
  if (!t.empty() && t.front() == '+') t.erase(0, 1);
  v.text = t;
  return v;
}

// Attributes a validation failure to the line of the key it names.
[[noreturn]] void rethrow_validation(const Error& e, const std::map<std::string, int>& lines,
                                     const std::string& source) {
  const std::string msg = e.what();
  std::string best;
  int line = 0;
  for (const auto& [full, l] : lines) {
    const std::string bare = full.substr(full.find('.') + 1);
    if (msg.find(bare) != std::string::npos && bare.size() > best.size()) {
      best = bare;
      line = l;
    }
  }
  if (line > 0) throw Error(ErrorKind::Config, source + ":" + std::to_string(line) + ": " + msg);
  throw Error(ErrorKind::Config, source + ": " + msg);
}

}  // namespace

void PipelineConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorKind::Config, m); };
  if (threads < 0) fail("threads must be >= 0");
  if (!(iso_spacing_mm > 0.0)) fail("iso_spacing_mm must be > 0");
  if (nlm.patch_radius < 0) fail("patch_radius must be >= 0");
  if (nlm.search_radius < 1) fail("search_radius must be >= 1");
  if (!(nlm.h_factor > 0.0)) fail("h_factor must be > 0");
  rule.validate();
  unet.validate();
  train.validate();
  train.augmentation.validate();
}

int PipelineConfig::effective_threads() const { return threads > 0 ? threads : default_thread_count(); }

PipelineConfig parse_config(const std::string& text, const std::string& source) {
  PipelineConfig c;
  std::map<std::string, int> seen;
  std::string section;
  std::istringstream in(text);
  std::string raw;
  Located at{source, 0};
  while (std::getline(in, raw)) {
    ++at.line;
    const std::string line = trim(strip_comment(raw));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') at.fail("malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      bool known = false;
      for (const auto& k : registry()) known = known || k.section == section;
      if (!known) at.fail("unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) at.fail("expected key = value");
    const std::string name = trim(line.substr(0, eq));
    const std::string full = section.empty() ? name : section + "." + name;
    const Key* key = nullptr;
    for (const auto& k : registry())
      if (k.section == section && k.name == name) key = &k;
    if (!key) at.fail("unknown key '" + full + "'");
    if (seen.count(full)) at.fail("duplicate key '" + full + "' (first set on line " + std::to_string(seen[full]) + ")");
    seen[full] = at.line;
    key->set(c, parse_value(trim(line.substr(eq + 1)), at), at);
  }
  try {
    c.validate();
  } catch (const Error& e) {
    rethrow_validation(e, seen, source);
  }
  return c;
}

PipelineConfig load_config(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorKind::Io, "cannot read config " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str(), path.string());
}

std::string to_toml(const PipelineConfig& c) {
  std::ostringstream os;
  std::string section;
  for (const auto& k : registry()) {
    if (k.section != section) {
      section = k.section;
      os << "\n[" << section << "]\n";
    }
    os << k.name << " = " << k.get(c) << "\n";
  }
  return os.str();
}

nlohmann::json to_json(const PipelineConfig& c) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& k : registry()) {
    const std::string v = k.get(c);
    nlohmann::json value = v.front() == '"' ? nlohmann::json::parse(v) : nlohmann::json::parse(v, nullptr, false);
    if (value.is_discarded()) value = v;
    if (k.section.empty())
      j[k.name] = value;
    else
      j[k.section][k.name] = value;
  }
  return j;
}

bool operator==(const PipelineConfig& a, const PipelineConfig& b) { return to_toml(a) == to_toml(b); }

std::string config_hash(const PipelineConfig& c) { return short_hash(to_toml(c)); }

}  // namespace neuroextract::cli
