#include "neuroextract/evalharness/evalharness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include <zlib.h>

#include "neuroextract/core/seed.hpp"
#include "neuroextract/core/stats.hpp"

namespace neuroextract::evalharness {
namespace fs = std::filesystem;
using neunet::CaseData;

namespace {

const std::vector<std::string> kTrainHalf = {"B", "D", "F"};
const std::vector<std::string> kTestHalf = {"A", "C", "E"};

bool in(const std::vector<std::string>& v, const std::string& s) {
  return std::find(v.begin(), v.end(), s) != v.end();
}

double mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (const double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Fisher-Yates with plain modulo so the permutation is fixed by the engine
// alone, independent of the standard library's distributions.
template <class T>
void shuffle(std::vector<T>& v, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng() % i]);
}

std::string fmt3(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3f", x);
  return buf;
}

std::string time_label(const std::string& t) {
  if (t == "day2") return "Day-2";
  if (t == "day30") return "Day-30";
  return t;
}

std::string contrast_label(Contrast c) {
  switch (c) {
    case Contrast::T2Base: return "T2 base";
    case Contrast::R2: return "T2 rate";
    case Contrast::AdcBase: return "ADC base";
    case Contrast::AdcRate: return "ADC rate";
  }
  return "?";
}

std::string table(const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width;
  for (const auto& r : rows)
    for (std::size_t i = 0; i < r.size(); ++i) {
      if (width.size() <= i) width.push_back(0);
      width[i] = std::max(width[i], r[i].size());
    }
  std::ostringstream os;
  for (std::size_t ri = 0; ri < rows.size(); ++ri) {
    std::string line;
    for (std::size_t i = 0; i < rows[ri].size(); ++i) {
      if (i) line += " | ";
      const std::string& cell = rows[ri][i];
      if (i == 0)
        line += cell + std::string(width[i] - cell.size(), ' ');
      else
        line += std::string(width[i] - cell.size(), ' ') + cell;
    }
    os << line << '\n';
    if (ri == 0) {
      std::string rule;
      for (std::size_t i = 0; i < width.size(); ++i) {
        if (i) rule += "-+-";
        rule += std::string(width[i], '-');
      }
      os << rule << '\n';
    }
  }
  return os.str();
}

CaseScore score_case(const CaseRecord& rec, const ModelSpec& spec, const neunet::UNetWeights& w, int threads) {
  const CaseData data = volgrid::load_case_data(rec, spec.contrasts, true);
  if (!data.truth) throw Error(ErrorKind::Data, "case " + rec.case_id + " has no truth mask");
  CaseScore s;
  s.case_id = rec.case_id;
  s.site = rec.site;
  s.timepoint = rec.timepoint;
  neunet::InferenceOptions opt;
  opt.channel_mode = spec.channel_mode;
  opt.contrasts = spec.contrasts;
  opt.threads = threads;
  auto run = [&](const neunet::InferenceOptions& o, bool& failed) {
    try {
      return dice(neunet::extract_brain_unet(data, w, o), *data.truth);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::ExtractionFailed) throw;
      failed = true;
      return 0.0;
    }
  };
  s.dice = run(opt, s.extraction_failed);
  if (spec.channel_mode == ChannelMode::Single && spec.contrasts.size() > 1) {
    for (const Contrast c : spec.contrasts) {
      neunet::InferenceOptions one = opt;
      one.contrasts = {c};
      bool ignored = false;
      s.by_contrast[to_string(c)] = run(one, ignored);
    }
  }
  return s;
}

nlohmann::json means_json(const std::map<std::string, double>& m) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : m) j[k] = v;
  return j;
}

}  // namespace

const std::vector<std::string>& model_ids() {
  static const std::vector<std::string> ids = {"MFM", "MFS", "MHM", "MHS", "MT2B", "MT2R", "MADCB", "MADCR"};
  return ids;
}

ModelSpec model_spec(const std::string& id) {
  const std::vector<Contrast> all(kAllContrasts.begin(), kAllContrasts.end());
  ModelSpec s;
  s.id = id;
  if (id == "MFM" || id == "MHM") {
    s.channel_mode = ChannelMode::Multi;
    s.contrasts = all;
  } else if (id == "MFS" || id == "MHS") {
    s.channel_mode = ChannelMode::Single;
    s.contrasts = all;
  } else if (id == "MT2B") {
    s.channel_mode = ChannelMode::Single;
    s.contrasts = {Contrast::T2Base};
  } else if (id == "MT2R") {
    s.channel_mode = ChannelMode::Single;
    s.contrasts = {Contrast::R2};
  } else if (id == "MADCB") {
    s.channel_mode = ChannelMode::Single;
    s.contrasts = {Contrast::AdcBase};
  } else if (id == "MADCR") {
    s.channel_mode = ChannelMode::Single;
    s.contrasts = {Contrast::AdcRate};
  } else {
    throw Error(ErrorKind::Config, "unknown model spec '" + id + "'");
  }
  if (id == "MHM" || id == "MHS") {
    s.train_sites = kTrainHalf;
    s.test_sites = kTestHalf;
  }
  return s;
}

Split split_cases(const std::vector<CaseRecord>& manifest, const ModelSpec& spec, std::uint64_t seed) {
  if (manifest.empty()) throw Error(ErrorKind::Split, "empty manifest");
  std::map<std::pair<std::string, std::string>, std::vector<CaseRecord>> strata;
  std::set<std::string> ids;
  for (const auto& r : manifest) {
    if (!ids.insert(r.case_id).second) throw Error(ErrorKind::Split, "duplicate case id " + r.case_id);
    strata[{r.site, r.timepoint}].push_back(r);
  }
  Split out;
  std::uint64_t index = 0;
  std::size_t odd = 0;
  for (auto& [key, cases] : strata) {
    const std::uint64_t stratum = index++;
    const bool to_test = spec.half_site() && in(spec.test_sites, key.first);
    if (to_test) {
      for (auto& c : cases) out.test.push_back(c);
      continue;
    }
    if (spec.half_site() && !in(spec.train_sites, key.first)) continue;
    const std::size_t n = cases.size();
    if (n < 3)
      throw Error(ErrorKind::Split, "stratum " + key.first + "/" + key.second + " has " + std::to_string(n) +
                                        " cases, need at least 3");
    std::sort(cases.begin(), cases.end(), [](const auto& a, const auto& b) { return a.case_id < b.case_id; });
    shuffle(cases, derive_seed(seed, stratum));
    const auto held = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(n) / 7.0)));
    std::size_t n_val = held, n_test = 0;
    if (!spec.half_site()) {
      n_val = held / 2;
      n_test = held / 2;
      if (held % 2) {
        const std::size_t phase = odd++ % 4;
        (phase == 0 || phase == 3 ? n_val : n_test) += 1;
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (i < n_val)
        out.val.push_back(cases[i]);
      else if (i < n_val + n_test)
        out.test.push_back(cases[i]);
      else
        out.train.push_back(cases[i]);
    }
  }
  if (out.train.empty() || out.test.empty())
    throw Error(ErrorKind::Split, "split for " + spec.id + " leaves an empty train or test set");
  return out;
}

void aggregate(EvalResult& r) {
  std::vector<double> all;
  std::map<std::string, std::vector<double>> site, time, contrast;
  r.failures = 0;
  for (const auto& c : r.cases) {
    if (!(c.dice >= 0.0 && c.dice <= 1.0)) throw Error(ErrorKind::Domain, "Dice outside [0, 1] for " + c.case_id);
    all.push_back(c.dice);
    site[c.site].push_back(c.dice);
    time[c.timepoint].push_back(c.dice);
    for (const auto& [k, v] : c.by_contrast) contrast[k].push_back(v);
    if (c.extraction_failed || c.dice < kFailureDice) ++r.failures;
  }
  r.n_cases = r.cases.size();
  r.overall = mean(all);
  r.by_site.clear();
  r.by_time.clear();
  r.by_contrast.clear();
  for (const auto& [k, v] : site) r.by_site[k] = mean(v);
  for (const auto& [k, v] : time) r.by_time[k] = mean(v);
  for (const auto& [k, v] : contrast) r.by_contrast[k] = mean(v);
  r.failure_rate = r.n_cases ? static_cast<double>(r.failures) / static_cast<double>(r.n_cases) : 0.0;
}

nlohmann::json to_json(const EvalResult& r) {
  nlohmann::json cases = nlohmann::json::array();
  for (const auto& c : r.cases)
    cases.push_back({{"case_id", c.case_id},
                     {"site", c.site},
                     {"timepoint", c.timepoint},
                     {"dice", c.dice},
                     {"extraction_failed", c.extraction_failed},
                     {"by_contrast", means_json(c.by_contrast)}});
  return {{"spec_id", r.spec_id},
          {"overall", r.overall},
          {"by_site", means_json(r.by_site)},
          {"by_time", means_json(r.by_time)},
          {"by_contrast", means_json(r.by_contrast)},
          {"n_cases", r.n_cases},
          {"failures", r.failures},
          {"failure_rate", r.failure_rate},
          {"aggregation", "per-case mean"},
          {"config_hash", r.config_hash},
          {"seed", r.seed},
          {"cases", cases}};
}

EvalResult eval_result_from_json(const nlohmann::json& j) {
  try {
    EvalResult r;
    r.spec_id = j.at("spec_id").get<std::string>();
    r.overall = j.at("overall").get<double>();
    r.by_site = j.at("by_site").get<std::map<std::string, double>>();
    r.by_time = j.at("by_time").get<std::map<std::string, double>>();
    r.by_contrast = j.at("by_contrast").get<std::map<std::string, double>>();
    r.n_cases = j.at("n_cases").get<std::size_t>();
    r.failures = j.value("failures", std::size_t{0});
    r.failure_rate = j.at("failure_rate").get<double>();
    r.config_hash = j.value("config_hash", std::string{});
    r.seed = j.value("seed", std::uint64_t{0});
    for (const auto& c : j.value("cases", nlohmann::json::array())) {
      CaseScore s;
      s.case_id = c.at("case_id").get<std::string>();
      s.site = c.at("site").get<std::string>();
      s.timepoint = c.at("timepoint").get<std::string>();
      s.dice = c.at("dice").get<double>();
      s.extraction_failed = c.at("extraction_failed").get<bool>();
      s.by_contrast = c.value("by_contrast", nlohmann::json::object()).get<std::map<std::string, double>>();
      r.cases.push_back(std::move(s));
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, std::string("bad evaluation result: ") + e.what());
  }
}

EvalResult evaluate_cases(const std::vector<CaseRecord>& cases, const ModelSpec& spec, const neunet::UNetWeights& w,
                          int threads) {
  EvalResult r;
  r.spec_id = spec.id;
  r.cases.reserve(cases.size());
  for (const auto& rec : cases) r.cases.push_back(score_case(rec, spec, w, threads));
  aggregate(r);
  return r;
}

neunet::TrainResult train_for_spec(const Split& split, const ModelSpec& spec, const ProtocolOptions& options) {
  neunet::UNetConfig unet = options.unet;
  unet.seed = derive_seed(options.seed, 101);
  neunet::TrainConfig tc = options.train;
  tc.channel_mode = spec.channel_mode;
  tc.contrasts = spec.contrasts;
  tc.seed = derive_seed(options.seed, 202);
  tc.threads = options.threads;
  unet.in_channels = tc.in_channels();

  auto load = [&](const std::vector<CaseRecord>& recs) {
    std::vector<CaseData> v;
    v.reserve(recs.size());
    for (const auto& r : recs) v.push_back(volgrid::load_case_data(r, spec.contrasts, true));
    return v;
  };
  const std::vector<CaseData> train_data = load(split.train);
  const std::vector<CaseData> val_data = load(split.val);
  return neunet::train(train_data, val_data, unet, tc);
}

ProtocolOutput run_protocol(const std::vector<CaseRecord>& manifest, const ModelSpec& spec,
                            const ProtocolOptions& options) {
  ProtocolOutput out;
  out.split = split_cases(manifest, spec, options.seed);
  auto trained = train_for_spec(out.split, spec, options);
  out.weights = std::move(trained.weights);
  out.history = std::move(trained.history);
  out.result = evaluate_cases(out.split.test, spec, out.weights, options.threads);
  out.result.config_hash = options.config_hash;
  out.result.seed = options.seed;
  return out;
}

Report report_table(const std::vector<EvalResult>& results) {
  if (results.empty()) throw Error(ErrorKind::Usage, "report needs at least one result");
  Report rep;
  rep.json = {{"aggregation", "per-case mean"}, {"results", nlohmann::json::array()}};
  for (const auto& r : results) rep.json["results"].push_back(to_json(r));

  auto is_full = [](const std::string& id) { return id == "MFM" || id == "MFS"; };
  std::vector<const EvalResult*> full, rest;
  for (const auto& r : results) (is_full(r.spec_id) ? full : rest).push_back(&r);

  std::ostringstream os;
  os << "Dice, per-case mean over test cases\n";
  if (!full.empty()) {
    std::set<std::string> sites, times;
    for (const auto* r : full) {
      for (const auto& [k, v] : r->by_site) sites.insert(k);
      for (const auto& [k, v] : r->by_time) times.insert(k);
    }
    std::vector<std::string> time_order;
    for (const char* t : {"day2", "day30"})
      if (times.count(t)) time_order.push_back(t);
    for (const auto& t : times)
      if (!in(time_order, t)) time_order.push_back(t);

    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> head{"Model", "All"};
    for (const auto& s : sites) head.push_back("Site " + s);
    for (const auto& t : time_order) head.push_back(time_label(t));
    rows.push_back(head);
    for (const auto* r : full) {
      std::vector<std::string> row{r->spec_id, fmt3(r->overall)};
      for (const auto& s : sites) row.push_back(r->by_site.count(s) ? fmt3(r->by_site.at(s)) : "-");
      for (const auto& t : time_order) row.push_back(r->by_time.count(t) ? fmt3(r->by_time.at(t)) : "-");
      rows.push_back(row);
    }
    os << "\nFull protocol, split by imaging site and time point\n" << table(rows);
  }
  if (!rest.empty()) {
    std::vector<std::vector<std::string>> rows{{""}, {"All"}};
    for (const auto* r : rest) {
      rows[0].push_back(r->spec_id);
      rows[1].push_back(fmt3(r->overall));
    }
    os << "\nPer-contrast and half-site models\n" << table(rows);
  }
  std::vector<const EvalResult*> with_contrast;
  for (const auto& r : results)
    if (!r.by_contrast.empty()) with_contrast.push_back(&r);
  if (!with_contrast.empty()) {
    std::vector<std::vector<std::string>> rows{{"Model"}};
    for (const Contrast c : kAllContrasts) rows[0].push_back(contrast_label(c));
    for (const auto* r : with_contrast) {
      std::vector<std::string> row{r->spec_id};
      for (const Contrast c : kAllContrasts)
        row.push_back(r->by_contrast.count(to_string(c)) ? fmt3(r->by_contrast.at(to_string(c))) : "-");
      rows.push_back(row);
    }
    os << "\nSingle-channel models, one contrast at inference\n" << table(rows);
  }
  std::vector<std::vector<std::string>> rows{{"Model", "Cases", "Failures", "Rate"}};
  for (const auto& r : results)
    rows.push_back({r.spec_id, std::to_string(r.n_cases), std::to_string(r.failures), fmt3(r.failure_rate)});
  os << "\nFailures (extraction failed or Dice < 0.5)\n" << table(rows);
  rep.text = os.str();
  return rep;
}

// ---------------------------------------------------------------- overlay

namespace {

void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 3; i >= 0; --i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void chunk(std::string& png, const char* type, const std::string& data) {
  put_u32(png, static_cast<std::uint32_t>(data.size()));
  const std::string body = std::string(type, 4) + data;
  png += body;
  put_u32(png, static_cast<std::uint32_t>(
                   crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()))));
}

std::string encode_png(int w, int h, const std::vector<std::uint8_t>& rgb) {
  std::string raw;
  raw.reserve(static_cast<std::size_t>(h) * (3 * w + 1));
  for (int y = 0; y < h; ++y) {
    raw.push_back(0);
    raw.append(reinterpret_cast<const char*>(rgb.data()) + static_cast<std::size_t>(y) * 3 * w, 3 * w);
  }
  uLongf len = compressBound(static_cast<uLong>(raw.size()));
  std::string z(len, '\0');
  if (compress2(reinterpret_cast<Bytef*>(z.data()), &len, reinterpret_cast<const Bytef*>(raw.data()),
                static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw Error(ErrorKind::Io, "PNG compression failed");
  z.resize(len);

  std::string png("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  put_u32(ihdr, static_cast<std::uint32_t>(w));
  put_u32(ihdr, static_cast<std::uint32_t>(h));
  ihdr += std::string("\x08\x02\x00\x00\x00", 5);
  chunk(png, "IHDR", ihdr);
  chunk(png, "IDAT", z);
  chunk(png, "IEND", "");
  return png;
}

}  // namespace

void render_overlay(const volgrid::Volume& v, const volgrid::Mask& m, const fs::path& path, int max_slices) {
  if (!v.geometry().same_grid(m.geometry())) throw Error(ErrorKind::Shape, "overlay volume and mask grids differ");
  if (max_slices < 1) throw Error(ErrorKind::Usage, "overlay needs at least one slice");
  const auto [nx, ny, nz] = v.dims();
  const int n = std::min(max_slices, nz);
  const int cols = std::min(n, 4);
  const int rows = (n + cols - 1) / cols;
  const int W = cols * nx, H = rows * ny;

  std::vector<float> finite;
  finite.reserve(v.size());
  for (const float x : v.data())
    if (std::isfinite(x)) finite.push_back(x);
  double lo = 0.0, hi = 1.0;
  if (!finite.empty()) {
    lo = percentile(finite, 1.0);
    hi = percentile(std::move(finite), 99.0);
  }
  const double span = hi > lo ? hi - lo : 1.0;

  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(W) * H * 3, 0);
  for (int t = 0; t < n; ++t) {
    const int z = static_cast<int>((static_cast<long>(t) * 2 + 1) * nz / (2L * n));
    const int ox = (t % cols) * nx, oy = (t / cols) * ny;
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x) {
        const float val = v.at(x, y, z);
        const double g = std::isfinite(val) ? std::clamp((val - lo) / span, 0.0, 1.0) : 0.0;
        const auto gray = static_cast<std::uint8_t>(std::lround(g * 255.0));
        bool edge = false;
        if (m.at(x, y, z)) {
          edge = x == 0 || y == 0 || x == nx - 1 || y == ny - 1 || !m.at(x - 1, y, z) || !m.at(x + 1, y, z) ||
                 !m.at(x, y - 1, z) || !m.at(x, y + 1, z);
        }
        // Image rows run top to bottom, so y is flipped to put +y up.
        const std::size_t p = (static_cast<std::size_t>(oy + ny - 1 - y) * W + ox + x) * 3;
        rgb[p] = edge ? 255 : gray;
        rgb[p + 1] = edge ? 0 : gray;
        rgb[p + 2] = edge ? 0 : gray;
      }
  }
  const std::string png = encode_png(W, H, rgb);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::Io, "cannot write " + path.string());
  f.write(png.data(), static_cast<std::streamsize>(png.size()));
  if (!f) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

// ------------------------------------------------------------- comparison

nlohmann::json to_json(const PairedReport& r) {
  nlohmann::json cases = nlohmann::json::array();
  for (const auto& c : r.cases)
    cases.push_back({{"case_id", c.case_id},
                     {"site", c.site},
                     {"timepoint", c.timepoint},
                     {"rule_dice", c.rule_dice},
                     {"rule_status", c.rule_status},
                     {"unet_dice", c.unet_dice},
                     {"unet_failed", c.unet_failed}});
  return {{"rule_mean", r.rule_mean},         {"unet_mean", r.unet_mean},
          {"rule_failures", r.rule_failures}, {"rescued", r.rescued},
          {"unet_at_least_rule", r.unet_at_least_rule}, {"cases", cases}};
}

PairedReport compare_rule_vs_unet(const std::vector<CaseRecord>& cases, const ruleseg::RuleParams& rule_params,
                                  const neunet::UNetWeights& w, const ModelSpec& spec, int threads) {
  std::vector<Contrast> need = spec.contrasts;
  if (!std::count(need.begin(), need.end(), Contrast::AdcBase)) need.push_back(Contrast::AdcBase);
  std::sort(need.begin(), need.end());

  PairedReport rep;
  rep.cases.resize(cases.size());
  // Cases run one after another; each extraction uses the worker pool.
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const CaseData data = volgrid::load_case_data(cases[i], need, true);
    if (!data.truth) throw Error(ErrorKind::Data, "case " + cases[i].case_id + " has no truth mask");
    PairedScore& s = rep.cases[i];
    s.case_id = cases[i].case_id;
    s.site = cases[i].site;
    s.timepoint = cases[i].timepoint;
    try {
      const auto rr = ruleseg::extract_brain_rule(data.map(Contrast::AdcBase), rule_params);
      s.rule_dice = dice(rr.mask, *data.truth);
      s.rule_status = ruleseg::to_string(rr.status);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::ExtractionFailed) throw;
      s.rule_status = "failed";
    }
    neunet::InferenceOptions opt;
    opt.channel_mode = spec.channel_mode;
    opt.contrasts = spec.contrasts;
    opt.threads = threads;
    try {
      s.unet_dice = dice(neunet::extract_brain_unet(data, w, opt), *data.truth);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::ExtractionFailed) throw;
      s.unet_failed = true;
    }
  }
  summarize(rep);
  return rep;
}

void summarize(PairedReport& rep) {
  rep.rule_failures = 0;
  rep.rescued = 0;
  std::vector<double> rd, ud;
  std::size_t at_least = 0;
  for (const auto& s : rep.cases) {
    rd.push_back(s.rule_dice);
    ud.push_back(s.unet_dice);
    if (s.unet_dice >= s.rule_dice) ++at_least;
    if (s.rule_status == "failed") {
      ++rep.rule_failures;
      if (!s.unet_failed && s.unet_dice >= kFailureDice) ++rep.rescued;
    }
  }
  rep.rule_mean = mean(rd);
  rep.unet_mean = mean(ud);
  rep.unet_at_least_rule = rep.cases.empty() ? 0.0 : static_cast<double>(at_least) / rep.cases.size();
}

}  // namespace neuroextract::evalharness
