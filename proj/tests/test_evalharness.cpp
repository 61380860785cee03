#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "neuroextract/evalharness/dice.hpp"
#include "neuroextract/evalharness/evalharness.hpp"
#include "test_util.hpp"

using namespace neuroextract;
using namespace neuroextract::evalharness;

namespace {

std::vector<CaseRecord> toy_manifest(int per_cell) {
  std::vector<CaseRecord> m;
  for (const char* site : {"A", "B", "C", "D", "E", "F"})
    for (const char* time : {"day2", "day30"})
      for (int k = 0; k < per_cell; ++k) {
        CaseRecord r;
        r.case_id = std::string("site") + site + "_" + time + "_c" + std::to_string(k);
        r.site = site;
        r.timepoint = time;
        m.push_back(r);
      }
  return m;
}

std::set<std::string> ids(const std::vector<CaseRecord>& v) {
  std::set<std::string> s;
  for (const auto& r : v) s.insert(r.case_id);
  return s;
}

std::set<std::string> sites(const std::vector<CaseRecord>& v) {
  std::set<std::string> s;
  for (const auto& r : v) s.insert(r.site);
  return s;
}

CaseScore score(const std::string& id, const std::string& site, const std::string& time, double d,
                bool failed = false) {
  CaseScore c;
  c.case_id = id;
  c.site = site;
  c.timepoint = time;
  c.dice = d;
  c.extraction_failed = failed;
  return c;
}

// Fixed toy results used for the golden text and the text/JSON agreement check.
std::vector<EvalResult> toy_results() {
  EvalResult mfm;
  mfm.spec_id = "MFM";
  mfm.cases = {score("a1", "A", "day2", 0.9712), score("a2", "A", "day30", 0.98449),
               score("b1", "B", "day2", 0.9391), score("f1", "F", "day2", 0.81234),
               score("f2", "F", "day30", 0.0, true)};
  mfm.config_hash = "0123456789abcdef";
  mfm.seed = 7;
  EvalResult mfs = mfm;
  mfs.spec_id = "MFS";
  for (auto& c : mfs.cases) {
    c.dice = std::max(0.0, c.dice - 0.0113);
    c.by_contrast = {{"t2_base", c.dice}, {"r2", c.dice * 0.9}, {"adc_base", c.dice * 0.95}, {"adc_rate", c.dice * 0.5}};
  }
  EvalResult mhm;
  mhm.spec_id = "MHM";
  mhm.cases = {score("a1", "A", "day2", 0.955), score("c1", "C", "day30", 0.4)};
  EvalResult mt2b;
  mt2b.spec_id = "MT2B";
  mt2b.cases = {score("a1", "A", "day2", 0.9), score("c1", "C", "day30", 0.95)};
  std::vector<EvalResult> out{mfm, mfs, mhm, mt2b};
  for (auto& r : out) aggregate(r);
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(' ');
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(' ') - b + 1);
}

// Rows of the table that follows `title` in a text report, cells trimmed.
std::vector<std::vector<std::string>> parse_table(const std::string& text, const std::string& title) {
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line) && line != title) {
  }
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line) && !line.empty()) {
    if (line.find("-+-") != std::string::npos) continue;
    std::vector<std::string> cells;
    std::size_t start = 0;
    for (std::size_t p; (p = line.find(" | ", start)) != std::string::npos; start = p + 3)
      cells.push_back(trim(line.substr(start, p - start)));
    cells.push_back(trim(line.substr(start)));
    rows.push_back(cells);
  }
  return rows;
}

std::string f3(double v) {
  char b[32];
  std::snprintf(b, sizeof(b), "%.3f", v);
  return b;
}

struct Png {
  int w = 0, h = 0;
  std::vector<std::uint8_t> rgb;
};

std::uint32_t be32(const std::string& s, std::size_t p) {
  return (std::uint32_t(std::uint8_t(s[p])) << 24) | (std::uint32_t(std::uint8_t(s[p + 1])) << 16) |
         (std::uint32_t(std::uint8_t(s[p + 2])) << 8) | std::uint32_t(std::uint8_t(s[p + 3]));
}

// Minimal decoder for 8-bit RGB, filter type 0, single or multiple IDAT.
Png decode_png(const std::string& bytes) {
  REQUIRE(bytes.substr(0, 8) == std::string("\x89PNG\r\n\x1a\n", 8));
  Png img;
  std::string z;
  for (std::size_t p = 8; p < bytes.size();) {
    const std::uint32_t len = be32(bytes, p);
    const std::string type = bytes.substr(p + 4, 4);
    const std::string data = bytes.substr(p + 8, len);
    const std::uint32_t crc = be32(bytes, p + 8 + len);
    const std::string body = bytes.substr(p + 4, 4 + len);
    REQUIRE(crc == crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size())));
    if (type == "IHDR") {
      img.w = static_cast<int>(be32(data, 0));
      img.h = static_cast<int>(be32(data, 4));
      REQUIRE(data[8] == 8);
      REQUIRE(data[9] == 2);
    } else if (type == "IDAT") {
      z += data;
    }
    p += 12 + len;
  }
  std::string raw(static_cast<std::size_t>(img.h) * (3 * img.w + 1), '\0');
  uLongf n = raw.size();
  REQUIRE(uncompress(reinterpret_cast<Bytef*>(raw.data()), &n, reinterpret_cast<const Bytef*>(z.data()),
                     static_cast<uLong>(z.size())) == Z_OK);
  REQUIRE(n == raw.size());
  for (int y = 0; y < img.h; ++y) {
    const std::size_t row = static_cast<std::size_t>(y) * (3 * img.w + 1);
    REQUIRE(raw[row] == 0);
    img.rgb.insert(img.rgb.end(), raw.begin() + row + 1, raw.begin() + row + 1 + 3 * img.w);
  }
  return img;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(f)), {});
}

}  // namespace

TEST_CASE("dice equals a voxel-count oracle on 1000 random 8^3 pairs") {
  std::mt19937_64 rng(17);
  const auto g = testutil::grid(8, 8, 8);
  int mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const double pa = (trial % 10) / 10.0, pb = ((trial / 10) % 10) / 10.0;
    const auto a = testutil::random_mask(g, pa, rng), b = testutil::random_mask(g, pb, rng);
    long both = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      both += a[i] && b[i];
      na += a[i] != 0;
      nb += b[i] != 0;
    }
    const double expected = na + nb == 0 ? 1.0 : 2.0 * both / static_cast<double>(na + nb);
    if (dice(a, b) != expected) ++mismatches;
    if (dice(a, b) != dice(b, a)) ++mismatches;
    if ((dice(a, b) == 1.0) != (a == b)) ++mismatches;
  }
  CHECK(mismatches == 0);
  CHECK_THROWS_AS(dice(volgrid::Mask(g), volgrid::Mask(testutil::grid(8, 8, 7))), Error);
}

TEST_CASE("full-protocol split is 48/6/6 and stratified") {
  const auto m = toy_manifest(5);
  const Split s = split_cases(m, model_spec("MFM"), 7);
  CHECK(s.train.size() == 48);
  CHECK(s.val.size() == 6);
  CHECK(s.test.size() == 6);
  std::set<std::string> all = ids(s.train);
  for (const auto& x : ids(s.val)) CHECK(all.insert(x).second);
  for (const auto& x : ids(s.test)) CHECK(all.insert(x).second);
  CHECK(all.size() == 60);
  std::set<std::pair<std::string, std::string>> cells;
  for (const auto& r : s.train) cells.insert({r.site, r.timepoint});
  CHECK(cells.size() == 12);
  CHECK(sites(s.test).size() == 6);

  const Split again = split_cases(m, model_spec("MFM"), 7);
  CHECK(ids(again.test) == ids(s.test));
  CHECK(ids(split_cases(m, model_spec("MFM"), 8).test) != ids(s.test));
}

TEST_CASE("half-site split keeps test sites out of training") {
  const Split s = split_cases(toy_manifest(5), model_spec("MHM"), 7);
  CHECK(s.train.size() == 24);
  CHECK(s.val.size() == 6);
  CHECK(s.test.size() == 30);
  CHECK(sites(s.test) == std::set<std::string>{"A", "C", "E"});
  std::set<std::string> seen = sites(s.train);
  for (const auto& x : sites(s.val)) seen.insert(x);
  CHECK(seen == std::set<std::string>{"B", "D", "F"});
}

TEST_CASE("split errors") {
  auto expect_split = [](const std::vector<CaseRecord>& m) {
    try {
      split_cases(m, model_spec("MFM"), 1);
      FAIL("expected a split error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Split);
    }
  };
  expect_split({});
  expect_split(toy_manifest(2));
  auto dup = toy_manifest(3);
  dup.push_back(dup.front());
  expect_split(dup);
  CHECK_THROWS_AS(model_spec("MXX"), Error);
  CHECK(model_spec("MT2B").contrasts == std::vector<Contrast>{Contrast::T2Base});
  CHECK(model_ids().size() == 8);
}

TEST_CASE("aggregates are exact means and failures follow the definition") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  EvalResult r;
  r.spec_id = "MFM";
  const auto m = toy_manifest(2);
  for (const auto& c : m) r.cases.push_back(score(c.case_id, c.site, c.timepoint, u(rng), u(rng) < 0.1));
  aggregate(r);
  double sum = 0.0, fsum = 0.0;
  std::size_t fails = 0;
  std::size_t nf = 0;
  for (const auto& c : r.cases) {
    sum += c.dice;
    fails += c.extraction_failed || c.dice < 0.5;
    if (c.site == "F") {
      fsum += c.dice;
      ++nf;
    }
  }
  CHECK(r.overall == doctest::Approx(sum / r.cases.size()).epsilon(1e-15));
  CHECK(r.by_site.at("F") == doctest::Approx(fsum / nf).epsilon(1e-15));
  CHECK(r.failures == fails);
  CHECK(r.failure_rate == doctest::Approx(static_cast<double>(fails) / r.cases.size()));
  CHECK(r.by_time.size() == 2);

  const EvalResult back = eval_result_from_json(nlohmann::json::parse(to_json(r).dump()));
  CHECK(to_json(back) == to_json(r));
  CHECK(back.overall == r.overall);

  r.cases[0].dice = 1.5;
  CHECK_THROWS_AS(aggregate(r), Error);
}

TEST_CASE("report text agrees with the JSON to three decimals") {
  const auto results = toy_results();
  const Report rep = report_table(results);
  const auto full = parse_table(rep.text, "Full protocol, split by imaging site and time point");
  REQUIRE(full.size() == 3);
  const auto& head = full[0];
  for (std::size_t r = 1; r < full.size(); ++r) {
    const auto& row = full[r];
    const nlohmann::json* j = nullptr;
    for (const auto& x : rep.json["results"])
      if (x["spec_id"] == row[0]) j = &x;
    REQUIRE(j != nullptr);
    CHECK(row[1] == f3((*j)["overall"].get<double>()));
    for (std::size_t c = 2; c < head.size(); ++c) {
      if (head[c].rfind("Site ", 0) == 0)
        CHECK(row[c] == f3((*j)["by_site"][head[c].substr(5)].get<double>()));
      else
        CHECK(row[c] == f3((*j)["by_time"][head[c] == "Day-2" ? "day2" : "day30"].get<double>()));
    }
  }
  const auto rest = parse_table(rep.text, "Per-contrast and half-site models");
  REQUIRE(rest.size() == 2);
  CHECK(rest[0] == std::vector<std::string>{"", "MHM", "MT2B"});
  CHECK(rest[1][1] == f3(rep.json["results"][2]["overall"].get<double>()));
  const auto fails = parse_table(rep.text, "Failures (extraction failed or Dice < 0.5)");
  REQUIRE(fails.size() == 5);
  CHECK(fails[1] == std::vector<std::string>{"MFM", "5", "1", "0.200"});
  CHECK(rep.json["aggregation"] == "per-case mean");
}

TEST_CASE("report text matches the frozen golden file") {
  const Report rep = report_table(toy_results());
  const std::string golden = slurp(std::filesystem::path(NEUROEXTRACT_TEST_DATA) / "report_golden.txt");
  REQUIRE_FALSE(golden.empty());
  CHECK(rep.text == golden);
}

TEST_CASE("a single result with one site and one time gives a three-column table") {
  EvalResult r;
  r.spec_id = "MFM";
  r.cases = {score("x", "A", "day2", 0.9), score("y", "A", "day2", 0.8)};
  aggregate(r);
  const auto rows = parse_table(report_table({r}).text, "Full protocol, split by imaging site and time point");
  REQUIRE(rows.size() == 2);
  CHECK(rows[0] == std::vector<std::string>{"Model", "All", "Site A", "Day-2"});
  CHECK(rows[1] == std::vector<std::string>{"MFM", "0.850", "0.850", "0.850"});
  CHECK_THROWS_AS(report_table({}), Error);
}

TEST_CASE("overlay montage: gray without a mask, red border with a full mask, stable bytes") {
  testutil::TempDir tmp("overlay");
  std::mt19937_64 rng(4);
  const auto g = testutil::grid(10, 7, 9);
  const volgrid::Volume v = testutil::random_volume(g, rng, 0.0, 100.0);

  render_overlay(v, volgrid::Mask(g), tmp / "empty.png", 6);
  const Png empty = decode_png(slurp(tmp / "empty.png"));
  CHECK(empty.w == 4 * 10);
  CHECK(empty.h == 2 * 7);
  bool all_gray = true;
  for (std::size_t p = 0; p < empty.rgb.size(); p += 3)
    all_gray = all_gray && empty.rgb[p] == empty.rgb[p + 1] && empty.rgb[p + 1] == empty.rgb[p + 2];
  CHECK(all_gray);

  volgrid::Mask full(g);
  for (std::size_t i = 0; i < full.size(); ++i) full[i] = 1;
  render_overlay(v, full, tmp / "full.png", 6);
  const Png img = decode_png(slurp(tmp / "full.png"));
  int wrong = 0;
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      const int tile = (y / 7) * 4 + x / 10;
      if (tile >= 6) continue;  // unused montage cells stay black
      const int lx = x % 10, ly = y % 7;
      const bool border = lx == 0 || ly == 0 || lx == 9 || ly == 6;
      const std::uint8_t* p = &img.rgb[(static_cast<std::size_t>(y) * img.w + x) * 3];
      const bool red = p[0] == 255 && p[1] == 0 && p[2] == 0;
      wrong += red != border;
    }
  CHECK(wrong == 0);

  render_overlay(v, full, tmp / "again.png", 6);
  CHECK(slurp(tmp / "again.png") == slurp(tmp / "full.png"));
  CHECK_THROWS_AS(render_overlay(v, volgrid::Mask(testutil::grid(3, 3, 3)), tmp / "x.png"), Error);
}

TEST_CASE("rescue counter counts rule failures the network extracted") {
  PairedReport r;
  auto add = [&](const std::string& status, double rule, double unet, bool unet_failed) {
    PairedScore s;
    s.case_id = "c" + std::to_string(r.cases.size());
    s.rule_status = status;
    s.rule_dice = rule;
    s.unet_dice = unet;
    s.unet_failed = unet_failed;
    r.cases.push_back(s);
  };
  add("failed", 0.0, 0.93, false);      // rescued
  add("failed", 0.0, 0.30, false);      // network too poor
  add("failed", 0.0, 0.0, true);        // both failed
  add("ok", 0.95, 0.96, false);
  add("leak-warning", 0.40, 0.91, false);
  summarize(r);
  CHECK(r.rule_failures == 3);
  CHECK(r.rescued == 1);
  CHECK(r.rule_mean == doctest::Approx((0.95 + 0.40) / 5));
  CHECK(r.unet_mean == doctest::Approx((0.93 + 0.30 + 0.96 + 0.91) / 5));
  CHECK(r.unet_at_least_rule == doctest::Approx(1.0));
  const auto j = to_json(r);
  CHECK(j["rescued"] == 1);
  CHECK(j["cases"].size() == 5);
}
