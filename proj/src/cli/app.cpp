#include "neuroextract/cli/app.hpp"

#include <chrono>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>

#include <zlib.h>
#include <Eigen/Core>

#include "CLI11.hpp"
#include "neuroextract/cli/config.hpp"
#include "neuroextract/core/hash.hpp"
#include "neuroextract/core/version.hpp"
#include "neuroextract/evalharness/evalharness.hpp"
#include "neuroextract/phantom/phantom.hpp"
#include "neuroextract/prequal/prequal.hpp"
#include "neuroextract/relaxo/relaxo.hpp"
#include "neuroextract/volgrid/nifti.hpp"
#include "neuroextract/volgrid/resample.hpp"

namespace neuroextract::cli {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class Stopwatch {
 public:
  void lap(const std::string& stage) {
    const auto now = std::chrono::steady_clock::now();
    timings_[stage] = std::chrono::duration<double>(now - last_).count();
    last_ = now;
  }
  json to_json() const {
    json j = json::object();
    for (const auto& [k, v] : timings_) j[k] = v;
    j["total"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    return j;
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
  std::chrono::steady_clock::time_point last_ = start_;
  std::map<std::string, double> timings_;
};

json versions() {
  return {{"neuroextract", kVersion},
          {"compiler", __VERSION__},
          {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                        std::to_string(EIGEN_MINOR_VERSION)},
          {"zlib", ZLIB_VERSION},
          {"cli11", CLI11_VERSION}};
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::Io, "cannot write " + path.string());
  f << text;
  if (!f) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

std::string description(const std::string& hash) { return "neuroextract cfg " + hash; }

CaseRecord find_case(const std::vector<CaseRecord>& manifest, const std::string& id) {
  for (const auto& r : manifest)
    if (r.case_id == id) return r;
  throw Error(ErrorKind::Data, "case '" + id + "' is not in the manifest");
}

std::vector<Contrast> parse_contrasts(const std::vector<std::string>& names) {
  std::vector<Contrast> out;
  for (const auto& n : names) out.push_back(contrast_from_string(n));
  return out;
}

// Options shared by every subcommand.
struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::string run_log;
};

struct Context {
  PipelineConfig config;
  std::string hash;
  int threads = 1;
  std::uint64_t seed = 0;
  Stopwatch clock;
  json outputs = json::object();
  fs::path log_path;
};

Context make_context(const Common& c) {
  Context ctx;
  if (!c.config_path.empty()) ctx.config = load_config(c.config_path);
  if (c.seed) ctx.config.seed = *c.seed;
  if (c.threads) {
    if (*c.threads < 1) throw Error(ErrorKind::Usage, "--threads must be >= 1");
    ctx.config.threads = *c.threads;
  }
  ctx.hash = config_hash(ctx.config);
  ctx.threads = ctx.config.effective_threads();
  ctx.seed = ctx.config.seed;
  if (!c.run_log.empty()) ctx.log_path = c.run_log;
  return ctx;
}

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config_path, "Pipeline config file (TOML subset)")->check(CLI::ExistingFile);
  sub->add_option("--seed", c.seed, "Seed, overrides the config");
  sub->add_option("--threads", c.threads, "Worker threads (default: NEUROEXTRACT_THREADS, then hardware)");
  sub->add_option("--run-log", c.run_log, "Run-log JSON path");
}

evalharness::ProtocolOptions protocol_options(const Context& ctx) {
  evalharness::ProtocolOptions o;
  o.unet = ctx.config.unet;
  o.train = ctx.config.train;
  o.seed = ctx.seed;
  o.threads = ctx.threads;
  o.config_hash = ctx.hash;
  return o;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Mouse brain extraction pipeline", "neuroextract"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  Common common;
  std::string command;
  std::function<void(Context&)> action;
  auto sub = [&](const char* name, const char* help) {
    CLI::App* s = app.add_subcommand(name, help);
    add_common(s, common);
    s->callback([&, name] { command = name; });
    return s;
  };

  // phantom-gen
  int n_sites = 6, per_cell = 5;
  std::string out_path;
  bool no_resume = false;
  {
    auto* s = sub("phantom-gen", "Generate a synthetic phantom cohort and its manifest");
    s->add_option("--sites", n_sites, "Number of site profiles (1-6)")->check(CLI::Range(1, 6));
    s->add_option("--per-cell", per_cell, "Cases per site x time cell")->check(CLI::Range(1, 1000));
    s->add_option("--out", out_path, "Output directory")->required();
    s->add_flag("--no-resume", no_resume, "Regenerate cases even when their stamps match");
  }

  // preprocess
  std::string in_path;
  bool no_denoise = false;
  {
    auto* s = sub("preprocess", "Adaptive non-local means denoising and isotropic resampling");
    s->add_option("--in", in_path, "Input NIfTI volume")->required()->check(CLI::ExistingFile);
    s->add_option("--out", out_path, "Output NIfTI volume")->required();
    s->add_flag("--no-denoise", no_denoise, "Resample only");
  }

  // qa
  std::vector<std::string> inputs;
  bool post_denoise = false;
  {
    auto* s = sub("qa", "SNR, CNR and SVNR of one or more volumes");
    s->add_option("--in", inputs, "Input NIfTI volumes")->required()->check(CLI::ExistingFile);
    s->add_option("--out", out_path, "Output JSON (default: stdout)");
    s->add_flag("--post-denoise", post_denoise, "Measure after adaptive NLM denoising");
  }

  // fit
  std::string kind;
  std::vector<double> xs;
  std::string out_prefix;
  {
    auto* s = sub("fit", "Monoexponential fit of a T2 echo or diffusion series");
    s->add_option("--kind", kind, "t2 or dwi")->required()->check(CLI::IsMember({"t2", "dwi"}));
    s->add_option("--x", xs, "Echo times (ms) or b-values (s/mm^2)")->required()->delimiter(',');
    s->add_option("--in", inputs, "One volume per x value, same order")->required()->check(CLI::ExistingFile);
    s->add_option("--out-prefix", out_prefix, "Writes <prefix>_base, _rate and _valid .nii.gz")->required();
  }

  // extract-rule
  std::string report_path;
  {
    auto* s = sub("extract-rule", "Classical extraction on an isotropic ADC baseline map");
    s->add_option("--in", in_path, "ADC baseline NIfTI")->required()->check(CLI::ExistingFile);
    s->add_option("--out", out_path, "Output mask NIfTI")->required();
    s->add_option("--report", report_path, "Status JSON");
  }

  // train
  std::string manifest_path, spec_id = "MFM", history_path;
  {
    auto* s = sub("train", "Train one model variant on its training split");
    s->add_option("--manifest", manifest_path, "Cohort manifest (JSON lines)")->required()->check(CLI::ExistingFile);
    s->add_option("--spec", spec_id, "Model variant")->check(CLI::IsMember(evalharness::model_ids()));
    s->add_option("--out", out_path, "Output weights file")->required();
    s->add_option("--history", history_path, "Training history JSON");
  }

  // extract-unet
  std::string weights_path, case_id, mode_name, prob_path;
  std::vector<std::string> contrast_names;
  {
    auto* s = sub("extract-unet", "Tri-plane network extraction of one manifest case");
    s->add_option("--weights", weights_path, "Weights file")->required()->check(CLI::ExistingFile);
    s->add_option("--manifest", manifest_path, "Cohort manifest")->required()->check(CLI::ExistingFile);
    s->add_option("--case", case_id, "Case id")->required();
    s->add_option("--mode", mode_name, "multi or single (default: from --spec, else multi)")
        ->check(CLI::IsMember({"multi", "single"}));
    s->add_option("--contrasts", contrast_names, "Contrasts (t2_base, r2, adc_base, adc_rate)")->delimiter(',');
    s->add_option("--spec", spec_id, "Take mode and contrasts from a model variant")
        ->check(CLI::IsMember(evalharness::model_ids()));
    s->add_option("--out", out_path, "Output mask NIfTI")->required();
    s->add_option("--prob", prob_path, "Fused probability NIfTI");
  }

  // evaluate
  std::string spec_arg = "MFM";
  {
    auto* s = sub("evaluate", "Run the split / train / test protocol for one or all model variants");
    s->add_option("--spec", spec_arg, "Model variant or 'all'");
    s->add_option("--manifest", manifest_path, "Cohort manifest")->required()->check(CLI::ExistingFile);
    s->add_option("--out", out_path, "Output directory")->required();
  }

  // compare
  std::vector<std::string> site_filter;
  {
    auto* s = sub("compare", "Paired rule-based vs network Dice on manifest cases");
    s->add_option("--manifest", manifest_path, "Cohort manifest")->required()->check(CLI::ExistingFile);
    s->add_option("--weights", weights_path, "Weights file")->required()->check(CLI::ExistingFile);
    s->add_option("--spec", spec_id, "Model variant the weights belong to")
        ->check(CLI::IsMember(evalharness::model_ids()));
    s->add_option("--sites", site_filter, "Only cases from these sites")->delimiter(',');
    s->add_option("--out", out_path, "Output JSON")->required();
  }

  // overlay
  std::string mask_path;
  int slices = 12;
  {
    auto* s = sub("overlay", "PNG montage of a volume with a mask boundary");
    s->add_option("--volume", in_path, "Volume NIfTI")->required()->check(CLI::ExistingFile);
    s->add_option("--mask", mask_path, "Mask NIfTI")->required()->check(CLI::ExistingFile);
    s->add_option("--out", out_path, "Output PNG")->required();
    s->add_option("--slices", slices, "Maximum number of slices")->check(CLI::Range(1, 256));
  }

  try {
    std::vector<std::string> args;
    for (int i = argc - 1; i > 0; --i) args.emplace_back(argv[i]);
    app.parse(std::move(args));
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::CallForVersion&) {
    out << kVersion << "\n";
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return 2;
  }

  std::optional<Context> ctx;
  int code = 0;
  std::string error_message;
  try {
    ctx = make_context(common);
    Context& c = *ctx;

    if (command == "phantom-gen") {
      phantom::CohortOptions o;
      const auto all = phantom::default_sites();
      o.sites.assign(all.begin(), all.begin() + n_sites);
      o.n_per_cell = per_cell;
      o.seed = c.seed;
      o.out_dir = out_path;
      o.iso_spacing_mm = c.config.iso_spacing_mm;
      o.threads = c.threads;
      o.resume = !no_resume;
      const auto rows = phantom::generate_cohort(o);
      c.clock.lap("generate");
      c.outputs["manifest"] = (fs::path(out_path) / "manifest.jsonl").string();
      c.outputs["cases"] = rows.size();
      if (c.log_path.empty()) c.log_path = fs::path(out_path) / "run_log.phantom-gen.json";
      out << "wrote " << rows.size() << " cases to " << (fs::path(out_path) / "manifest.jsonl").string() << "\n";

    } else if (command == "preprocess") {
      volgrid::Volume v = volgrid::read_nifti(in_path);
      c.clock.lap("read");
      if (!no_denoise) {
        const auto noise = prequal::estimate_noise_map(v);
        v = prequal::denoise_nlm_adaptive(v, noise, c.config.nlm);
        c.clock.lap("denoise");
      }
      const double s = c.config.iso_spacing_mm;
      v = volgrid::resample_tricubic(v, {s, s, s});
      c.clock.lap("resample");
      volgrid::write_nifti(v, out_path, description(c.hash));
      c.outputs["volume"] = out_path;

    } else if (command == "qa") {
      json vols = json::array();
      for (const auto& p : inputs) {
        volgrid::Volume v = volgrid::read_nifti(p);
        if (post_denoise) v = prequal::denoise_nlm_adaptive(v, prequal::estimate_noise_map(v), c.config.nlm);
        vols.push_back({{"path", p}, {"qa", prequal::to_json(prequal::qa_metrics(v))}});
      }
      c.clock.lap("qa");
      const json rep = {{"config_hash", c.hash}, {"denoised", post_denoise}, {"volumes", vols}};
      if (out_path.empty()) {
        out << rep.dump(2) << "\n";
      } else {
        write_text(out_path, rep.dump(2) + "\n");
        c.outputs["report"] = out_path;
      }

    } else if (command == "fit") {
      if (xs.size() != inputs.size())
        throw Error(ErrorKind::Usage, "--x has " + std::to_string(xs.size()) + " values but --in has " +
                                          std::to_string(inputs.size()) + " volumes");
      relaxo::DecaySeries series;
      series.x = xs;
      for (const auto& p : inputs) series.volumes.push_back(volgrid::read_nifti(p));
      c.clock.lap("read");
      const relaxo::FitMaps maps = relaxo::fit_series(series);
      c.clock.lap("fit");
      const std::string d = description(c.hash);
      volgrid::write_nifti(maps.base, out_prefix + "_base.nii.gz", d);
      volgrid::write_nifti(maps.rate, out_prefix + "_rate.nii.gz", d);
      volgrid::write_mask(maps.valid, out_prefix + "_valid.nii.gz", d);
      c.outputs["prefix"] = out_prefix;
      c.outputs["kind"] = kind;

    } else if (command == "extract-rule") {
      const volgrid::Volume v = volgrid::read_nifti(in_path);
      json rep = {{"config_hash", c.hash}, {"input", in_path}};
      try {
        const auto r = ruleseg::extract_brain_rule(v, c.config.rule);
        c.clock.lap("extract");
        volgrid::write_mask(r.mask, out_path, description(c.hash));
        rep["status"] = ruleseg::to_string(r.status);
        rep["brain_volume_mm3"] = r.brain_volume_mm3;
        rep["candidate_segments"] = r.candidate_segments;
        rep["mrf_energies"] = r.mrf_energies;
        c.outputs["mask"] = out_path;
        out << "status " << ruleseg::to_string(r.status) << ", brain volume " << r.brain_volume_mm3 << " mm^3\n";
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::ExtractionFailed) throw;
        rep["status"] = "failed";
        rep["error"] = e.what();
        if (!report_path.empty()) write_text(report_path, rep.dump(2) + "\n");
        throw;
      }
      if (!report_path.empty()) write_text(report_path, rep.dump(2) + "\n");

    } else if (command == "train") {
      const auto manifest = read_manifest(manifest_path);
      const auto spec = evalharness::model_spec(spec_id);
      const auto split = evalharness::split_cases(manifest, spec, c.seed);
      c.clock.lap("split");
      const auto trained = evalharness::train_for_spec(split, spec, protocol_options(c));
      c.clock.lap("train");
      if (fs::path(out_path).has_parent_path()) fs::create_directories(fs::path(out_path).parent_path());
      neunet::save_weights(trained.weights, out_path, c.hash);
      json hist = neunet::to_json(trained.history);
      hist["config_hash"] = c.hash;
      hist["spec_id"] = spec.id;
      if (!history_path.empty()) write_text(history_path, hist.dump(2) + "\n");
      c.outputs["weights"] = out_path;
      c.outputs["history"] = hist;

    } else if (command == "extract-unet") {
      const auto manifest = read_manifest(manifest_path);
      const auto rec = find_case(manifest, case_id);
      neunet::InferenceOptions opt;
      if (!spec_id.empty() && app.get_subcommand("extract-unet")->count("--spec")) {
        const auto spec = evalharness::model_spec(spec_id);
        opt.channel_mode = spec.channel_mode;
        opt.contrasts = spec.contrasts;
      }
      if (!mode_name.empty()) opt.channel_mode = neunet::channel_mode_from_string(mode_name);
      if (!contrast_names.empty()) opt.contrasts = parse_contrasts(contrast_names);
      opt.threads = c.threads;
      const auto w = neunet::load_weights(weights_path);
      const auto data = volgrid::load_case_data(rec, opt.contrasts, false);
      c.clock.lap("load");
      const auto tri = neunet::predict_triplane(data, w, opt);
      c.clock.lap("predict");
      const auto mask = neunet::probabilities_to_mask(tri.fused, opt.threshold, opt.largest_component);
      volgrid::write_mask(mask, out_path, description(c.hash));
      if (!prob_path.empty()) volgrid::write_nifti(tri.fused, prob_path, description(c.hash));
      c.outputs["mask"] = out_path;

    } else if (command == "evaluate") {
      const auto manifest = read_manifest(manifest_path);
      std::vector<std::string> ids;
      if (spec_arg == "all")
        ids = evalharness::model_ids();
      else
        ids = {evalharness::model_spec(spec_arg).id};
      const fs::path dir = out_path;
      fs::create_directories(dir);
      std::vector<evalharness::EvalResult> results;
      for (const auto& id : ids) {
        const auto po = evalharness::run_protocol(manifest, evalharness::model_spec(id), protocol_options(c));
        c.clock.lap("protocol " + id);
        neunet::save_weights(po.weights, dir / ("weights_" + id + ".bin"), c.hash);
        json hist = neunet::to_json(po.history);
        hist["config_hash"] = c.hash;
        hist["spec_id"] = id;
        write_text(dir / ("history_" + id + ".json"), hist.dump(2) + "\n");
        results.push_back(po.result);
      }
      const auto rep = evalharness::report_table(results);
      json j = rep.json;
      j["config_hash"] = c.hash;
      j["seed"] = c.seed;
      write_text(dir / "report.json", j.dump(2) + "\n");
      write_text(dir / "report.txt", rep.text);
      out << rep.text;
      c.outputs["report"] = (dir / "report.json").string();
      if (c.log_path.empty()) c.log_path = dir / "run_log.evaluate.json";

    } else if (command == "compare") {
      auto manifest = read_manifest(manifest_path);
      if (!site_filter.empty()) {
        const std::set<std::string> keep(site_filter.begin(), site_filter.end());
        std::erase_if(manifest, [&](const CaseRecord& r) { return !keep.count(r.site); });
        if (manifest.empty()) throw Error(ErrorKind::Data, "no manifest cases match --sites");
      }
      const auto w = neunet::load_weights(weights_path);
      const auto rep = evalharness::compare_rule_vs_unet(manifest, c.config.rule, w,
                                                         evalharness::model_spec(spec_id), c.threads);
      c.clock.lap("compare");
      json j = evalharness::to_json(rep);
      j["config_hash"] = c.hash;
      write_text(out_path, j.dump(2) + "\n");
      out << "rule mean Dice " << rep.rule_mean << ", network mean Dice " << rep.unet_mean << ", rule failures "
          << rep.rule_failures << ", rescued " << rep.rescued << "\n";
      c.outputs["report"] = out_path;

    } else if (command == "overlay") {
      evalharness::render_overlay(volgrid::read_nifti(in_path), volgrid::read_mask(mask_path), out_path, slices);
      c.clock.lap("render");
      c.outputs["png"] = out_path;
    }
  } catch (const Error& e) {
    code = e.kind() == ErrorKind::Usage ? 2 : 1;
    error_message = std::string(to_string(e.kind())) + " error: " + e.what();
  } catch (const std::exception& e) {
    code = 1;
    error_message = std::string("error: ") + e.what();
  }
  if (!error_message.empty()) err << error_message << "\n";

  if (ctx) {
    Context& c = *ctx;
    if (c.log_path.empty()) {
      const fs::path target = out_path.empty() ? fs::path(out_prefix) : fs::path(out_path);
      const fs::path dir = target.has_parent_path() ? target.parent_path() : fs::path(".");
      c.log_path = dir / ("run_log." + command + ".json");
    }
    json log = {{"command", command},
                {"argv", json::array()},
                {"config", to_json(c.config)},
                {"config_hash", c.hash},
                {"seed", c.seed},
                {"threads", c.threads},
                {"versions", versions()},
                {"timings_s", c.clock.to_json()},
                {"outputs", c.outputs},
                {"exit_code", code}};
    for (int i = 0; i < argc; ++i) log["argv"].push_back(argv[i]);
    if (!error_message.empty()) log["error"] = error_message;
    try {
      write_text(c.log_path, log.dump(2) + "\n");
    } catch (const std::exception& e) {
      err << "warning: run log not written: " << e.what() << "\n";
    }
  }
  return code;
}

}  // namespace neuroextract::cli
