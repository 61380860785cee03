#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "neuroextract/core/case_record.hpp"
#include "neuroextract/evalharness/dice.hpp"
#include "neuroextract/neunet/training.hpp"
#include "neuroextract/ruleseg/ruleseg.hpp"

namespace neuroextract::evalharness {

using neunet::ChannelMode;

/// The eight trained-model variants.
struct ModelSpec {
  std::string id;
  ChannelMode channel_mode = ChannelMode::Multi;
  std::vector<Contrast> contrasts;
  /// Empty means every site.
  std::vector<std::string> train_sites;
  std::vector<std::string> test_sites;

  bool half_site() const { return !test_sites.empty(); }
};

/// MFM, MFS, MHM, MHS, MT2B, MT2R, MADCB, MADCR. Throws Config for other ids.
ModelSpec model_spec(const std::string& id);
const std::vector<std::string>& model_ids();

struct Split {
  std::vector<CaseRecord> train;
  std::vector<CaseRecord> val;
  std::vector<CaseRecord> test;
};

/// Full protocol: per site x time stratum of n cases, max(1, round(n / 7))
/// are held out and shared between validation and test; odd hold-outs give
/// their extra case alternately to validation and test (val, test, test,
/// val, ...) over the sorted strata. Half-site protocol: the same hold-out
/// count from each training-site stratum goes to validation, every case of a
/// test site goes to test. Strata with fewer than 3 cases raise Split.
Split split_cases(const std::vector<CaseRecord>& manifest, const ModelSpec& spec, std::uint64_t seed);

struct CaseScore {
  std::string case_id;
  std::string site;
  std::string timepoint;
  double dice = 0.0;
  /// Extraction raised extraction-failed.
  bool extraction_failed = false;
  /// Single-channel models: Dice when only that contrast is used.
  std::map<std::string, double> by_contrast;
};

struct EvalResult {
  std::string spec_id;
  std::vector<CaseScore> cases;
  double overall = 0.0;
  std::map<std::string, double> by_site;
  std::map<std::string, double> by_time;
  std::map<std::string, double> by_contrast;
  std::size_t n_cases = 0;
  std::size_t failures = 0;
  double failure_rate = 0.0;
  std::string config_hash;
  std::uint64_t seed = 0;
};

/// Dice below this counts as a failed extraction.
inline constexpr double kFailureDice = 0.5;

/// Fills the aggregates from `cases`: arithmetic means of the per-case
/// scores, failures = extraction-failed or Dice < kFailureDice.
void aggregate(EvalResult& r);

nlohmann::json to_json(const EvalResult& r);
EvalResult eval_result_from_json(const nlohmann::json& j);

struct ProtocolOptions {
  neunet::UNetConfig unet;
  neunet::TrainConfig train;
  std::uint64_t seed = 7;
  int threads = 1;
  std::string config_hash;
};

struct ProtocolOutput {
  EvalResult result;
  neunet::UNetWeights weights;
  neunet::TrainHistory history;
  Split split;
};

/// Trains on split.train with split.val for model selection, using the model's
/// channel mode and contrasts. Seeds derive from options.seed.
neunet::TrainResult train_for_spec(const Split& split, const ModelSpec& spec, const ProtocolOptions& options);

/// Split, train with the model's channel mode and contrasts, and score
/// extract_brain_unet on every test case.
ProtocolOutput run_protocol(const std::vector<CaseRecord>& manifest, const ModelSpec& spec,
                            const ProtocolOptions& options);

/// Scores existing weights on `cases` (used by run_protocol and the CLI).
EvalResult evaluate_cases(const std::vector<CaseRecord>& cases, const ModelSpec& spec, const neunet::UNetWeights& w,
                          int threads);

struct Report {
  nlohmann::json json;
  std::string text;
};

/// JSON {"aggregation": "per-case mean", "results": [...]} and a two-panel
/// text table: full-protocol models by site and time point, then the
/// per-contrast and half-site models.
Report report_table(const std::vector<EvalResult>& results);

/// RGB PNG montage of evenly spaced slices along the last axis, windowed to
/// the 1st-99th percentile, with the mask boundary drawn in red.
void render_overlay(const volgrid::Volume& v, const volgrid::Mask& m, const std::filesystem::path& path,
                    int max_slices = 12);

struct PairedScore {
  std::string case_id;
  std::string site;
  std::string timepoint;
  double rule_dice = 0.0;
  /// "ok", "leak-warning" or "failed".
  std::string rule_status;
  double unet_dice = 0.0;
  bool unet_failed = false;
};

struct PairedReport {
  std::vector<PairedScore> cases;
  double rule_mean = 0.0;
  double unet_mean = 0.0;
  /// Rule extractions that raised extraction-failed.
  std::size_t rule_failures = 0;
  /// Of those, cases the network extracted with Dice >= kFailureDice.
  std::size_t rescued = 0;
  /// Fraction of cases where the network scored at least the rule Dice.
  double unet_at_least_rule = 0.0;
};

nlohmann::json to_json(const PairedReport& r);

/// Recomputes the means and counters from `cases`.
void summarize(PairedReport& r);

PairedReport compare_rule_vs_unet(const std::vector<CaseRecord>& cases, const ruleseg::RuleParams& rule_params,
                                  const neunet::UNetWeights& w, const ModelSpec& spec, int threads);

}  // namespace neuroextract::evalharness
