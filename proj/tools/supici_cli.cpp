#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "supici/adapt.hpp"
#include "supici/checks.hpp"
#include "supici/config.hpp"
#include "supici/data.hpp"
#include "supici/detector.hpp"
#include "supici/froc.hpp"

namespace fs = std::filesystem;
using namespace supici;
using nlohmann::json;

namespace {

// exit codes per the interface contract
constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitCheckFailed = 3;
constexpr int kExitIo = 4;

struct CheckFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CommonArgs {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<int> workers;
};

config::RunConfig load_run_config(const CommonArgs& args) {
  config::RunConfig cfg =
      args.config_path.empty() ? config::default_config() : config::load_config(args.config_path);
  if (args.seed) cfg.seed = *args.seed;
  if (args.out_dir) cfg.out_dir = *args.out_dir;
  if (args.workers) {
    cfg.workers = *args.workers;
    cfg.adapt.workers = *args.workers;
  }
  cfg.validate();
  return cfg;
}

fs::path dataset_dir(const config::RunConfig& cfg, const std::string& override_dir) {
  return override_dir.empty() ? fs::path(cfg.out_dir) / "data" : fs::path(override_dir);
}

data::DatasetSpec dataset_spec(const config::RunConfig& cfg) {
  data::DatasetSpec spec;
  spec.scans_per_domain = cfg.scans_per_domain;
  spec.source = cfg.source;
  spec.target = cfg.target;
  spec.seed = cfg.seed;
  return spec;
}

std::vector<data::ScanRecord> load_split(const fs::path& dir, const std::string& domain,
                                         const std::string& split, bool with_annotations) {
  const data::DatasetManifest manifest = data::read_manifest(dir / "dataset.json");
  return data::load_scans(dir, manifest, domain, split, with_annotations);
}

froc::FrocResult eval_model(const detector::DetectorParams& params,
                            const std::vector<data::ScanRecord>& scans,
                            const detector::InferConfig& icfg,
                            std::vector<froc::CurvePoint>* curve_out = nullptr) {
  std::vector<froc::ScanEval> evals;
  for (const data::ScanRecord& s : scans) {
    froc::ScanEval e;
    e.detections = detector::infer_scan(params, s.voxels, icfg);
    e.annotations = s.annotations;
    evals.push_back(std::move(e));
  }
  const auto curve = froc::froc_curve(evals);
  if (curve_out) *curve_out = curve;
  return froc::froc_at_points(curve);
}

void print_froc_table(const froc::FrocResult& res) {
  std::printf("%7s %7s %7s %7s %7s %7s %7s %7s\n", "0.125", "0.25", "0.5", "1", "2", "4", "8",
              "Avg");
  std::printf("%7.4f %7.4f %7.4f %7.4f %7.4f %7.4f %7.4f %7.4f\n", res.sensitivities[0],
              res.sensitivities[1], res.sensitivities[2], res.sensitivities[3],
              res.sensitivities[4], res.sensitivities[5], res.sensitivities[6], res.average);
}

json checks_to_json(const std::vector<checks::CheckResult>& results) {
  json arr = json::array();
  for (const auto& r : results)
    arr.push_back({{"name", r.name},
                   {"passed", r.passed},
                   {"worst_rel_err", r.worst_rel_err},
                   {"cases", r.cases},
                   {"detail", r.detail}});
  return arr;
}

void write_json_report(const fs::path& path, const json& j) {
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

int cmd_gen_data(const config::RunConfig& cfg, const std::string& out_override) {
  const fs::path dir = dataset_dir(cfg, out_override);
  const data::DatasetManifest manifest = data::generate_dataset(dir, dataset_spec(cfg));
  int train = 0, val = 0, test = 0;
  for (const auto& e : manifest.scans) {
    train += e.split == "train";
    val += e.split == "val";
    test += e.split == "test";
  }
  std::printf("wrote %zu scans to %s (train/val/test = %d/%d/%d)\n", manifest.scans.size(),
              dir.string().c_str(), train, val, test);
  return kExitOk;
}

int cmd_train_source(const config::RunConfig& cfg, const std::string& data_override) {
  const fs::path ddir = dataset_dir(cfg, data_override);
  const auto scans = load_split(ddir, "source", "train", true);
  const fs::path mdir = fs::path(cfg.out_dir) / "source_model";
  fs::create_directories(mdir);

  detector::TrainReport report;
  const auto params = detector::train_source(scans, cfg.train_config(), cfg.seed, &mdir, &report);
  detector::save_checkpoint(mdir / "checkpoint_final.ckpt", params);

  const auto val = load_split(ddir, "source", "val", true);
  json j;
  j["epoch_losses"] = report.epoch_losses;
  j["seed"] = cfg.seed;
  j["config"] = json::parse(config::config_snapshot(cfg));
  if (!val.empty()) {
    const auto froc = eval_model(params, val, cfg.infer_config());
    j["source_val_froc"] = froc.average;
    std::printf("source val FROC average: %.4f\n", froc.average);
  }
  write_json_report(mdir / "train_report.json", j);
  std::printf("checkpoint: %s\n", (mdir / "checkpoint_final.ckpt").string().c_str());
  return kExitOk;
}

int cmd_adapt(const config::RunConfig& cfg, const std::string& step,
              const std::string& data_override, const std::string& ckpt_override) {
  const fs::path ddir = dataset_dir(cfg, data_override);
  const fs::path ckpt = ckpt_override.empty()
                            ? fs::path(cfg.out_dir) / "source_model" / "checkpoint_final.ckpt"
                            : fs::path(ckpt_override);
  const auto source_params = detector::load_checkpoint(ckpt);

  auto target_train = load_split(ddir, "target", "train", false);  // unlabeled
  const auto target_val = load_split(ddir, "target", "val", true);

  const fs::path mdir = fs::path(cfg.out_dir) / "adapted_model";
  fs::create_directories(mdir);

  const auto snapshot = [&](const detector::DetectorParams& p) {
    return target_val.empty() ? -1.0 : eval_model(p, target_val, cfg.infer_config()).average;
  };

  adapt::RunReport report;
  report.seed = cfg.seed;
  report.run_config_json = config::config_snapshot(cfg);

  if (step == "all") {
    const auto result = adapt::adapt_pipeline(
        source_params, target_train, cfg.adapt, cfg.seed,
        target_val.empty() ? std::function<double(const detector::DetectorParams&)>() : snapshot);
    report = result.report;
    report.run_config_json = config::config_snapshot(cfg);
    detector::save_checkpoint(mdir / "final.ckpt", result.params);
    std::printf("adapted checkpoint: %s\n", (mdir / "final.ckpt").string().c_str());
  } else if (step == "1") {
    if (!target_val.empty()) report.froc_source = snapshot(source_params);
    const auto p1 =
        adapt::step1_adapt(source_params, target_train, cfg.adapt, cfg.seed, &report.step1);
    if (!target_val.empty()) report.froc_after_step1 = snapshot(p1);
    detector::save_checkpoint(mdir / "step1.ckpt", p1);
    std::printf("step-1 checkpoint: %s\n", (mdir / "step1.ckpt").string().c_str());
  } else {
    if (!target_val.empty()) report.froc_source = snapshot(source_params);
    const auto p2 =
        adapt::step2_adapt(source_params, target_train, cfg.adapt, cfg.seed, &report.step2);
    if (!target_val.empty()) report.froc_after_step2 = snapshot(p2);
    detector::save_checkpoint(mdir / "final.ckpt", p2);
    std::printf("step-2 checkpoint: %s\n", (mdir / "final.ckpt").string().c_str());
  }

  adapt::write_run_report(mdir / "adapt_report.json", report, cfg.adapt);
  std::printf("report: %s\n", (mdir / "adapt_report.json").string().c_str());
  return kExitOk;
}

int cmd_infer(const config::RunConfig& cfg, const std::string& data_override,
              const std::string& ckpt_override, const std::string& domain,
              const std::string& split, const std::string& out_override) {
  const fs::path ddir = dataset_dir(cfg, data_override);
  const fs::path ckpt = ckpt_override.empty()
                            ? fs::path(cfg.out_dir) / "adapted_model" / "final.ckpt"
                            : fs::path(ckpt_override);
  const auto params = detector::load_checkpoint(ckpt);
  const auto scans = load_split(ddir, domain, split, false);

  std::vector<std::pair<std::string, geom::Detection>> rows;
  for (const data::ScanRecord& s : scans)
    for (const geom::Detection& det : detector::infer_scan(params, s.voxels, cfg.infer_config()))
      rows.emplace_back(s.id, det);

  const fs::path out = out_override.empty() ? fs::path(cfg.out_dir) / "predictions.csv"
                                            : fs::path(out_override);
  if (!out.parent_path().empty()) fs::create_directories(out.parent_path());
  data::write_predictions_csv(out, rows);
  std::printf("wrote %zu predictions for %zu scans to %s\n", rows.size(), scans.size(),
              out.string().c_str());
  return kExitOk;
}

int cmd_froc(const std::string& pred_path, const std::string& ann_path,
             const std::string& out_path) {
  const auto preds = data::read_predictions_csv(pred_path);
  const auto anns = data::read_annotations_csv(ann_path);

  // evaluation set: union of scan ids in both files
  std::vector<std::string> ids;
  const auto add_id = [&](const std::string& id) {
    for (const auto& existing : ids)
      if (existing == id) return;
    ids.push_back(id);
  };
  for (const auto& [id, a] : anns) add_id(id);
  for (const auto& [id, d] : preds) add_id(id);

  std::vector<froc::ScanEval> evals;
  for (const std::string& id : ids) {
    froc::ScanEval e;
    for (const auto& [pid, det] : preds)
      if (pid == id) e.detections.push_back(det);
    for (const auto& [aid, ann] : anns)
      if (aid == id) e.annotations.push_back(ann);
    evals.push_back(std::move(e));
  }

  const auto curve = froc::froc_curve(evals);
  const auto res = froc::froc_at_points(curve);
  print_froc_table(res);
  if (!out_path.empty()) froc::write_report(out_path, res, curve);
  return kExitOk;
}

int cmd_gradcheck(std::uint64_t seed, const std::string& out_path) {
  auto results = checks::kernel_gradient_suite(seed);
  const auto detector_results = checks::detector_gradient_suite(seed);
  results.insert(results.end(), detector_results.begin(), detector_results.end());
  for (const auto& r : results)
    std::printf("[%s] %-34s worst_rel_err=%.3g cases=%d %s\n", r.passed ? "PASS" : "FAIL",
                r.name.c_str(), r.worst_rel_err, r.cases, r.detail.c_str());
  if (!out_path.empty())
    write_json_report(out_path, {{"seed", seed},
                                 {"checks", checks_to_json(results)},
                                 {"passed", checks::all_passed(results)}});
  if (!checks::all_passed(results)) throw CheckFailure("gradient checks failed");
  return kExitOk;
}

int cmd_selftest(std::uint64_t seed, const std::string& out_path) {
  const auto results = checks::invariant_suite(seed);
  for (const auto& r : results)
    std::printf("[%s] %-42s cases=%d %s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.cases,
                r.detail.c_str());
  if (!out_path.empty())
    write_json_report(out_path, {{"seed", seed},
                                 {"checks", checks_to_json(results)},
                                 {"passed", checks::all_passed(results)}});
  if (!checks::all_passed(results)) throw CheckFailure("invariant checks failed");
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "supici - source-free domain adaptation for 3D nodule detection\n"
      "Two-step adaptation of a pre-trained detector to an unlabeled target domain:\n"
      "instance-level contrastive fine-tuning, then teacher-student mutual training\n"
      "with a weighted entropy loss. Evaluation is FROC averaged over 7 operating\n"
      "points (0.125 to 8 false positives per scan)."};
  app.require_subcommand(1);
  app.footer(config::render_key_docs());

  CommonArgs common;
  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "JSON run configuration");
    sub->add_option("--seed", common.seed, "override the config seed");
    sub->add_option("--out", common.out_dir, "override the config out_dir");
    sub->add_option("--workers", common.workers, "cap worker threads");
  };

  std::string data_dir, ckpt, step = "all", domain = "target", split = "test";
  std::string pred_path, ann_path, report_path;
  std::uint64_t check_seed = 17;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic two-domain corpus");
  add_common(gen);
  gen->add_option("--data", data_dir, "dataset directory (default <out_dir>/data)");

  auto* train = app.add_subcommand("train-source", "train the detector on labeled source scans");
  add_common(train);
  train->add_option("--data", data_dir, "dataset directory");

  auto* adapt_cmd = app.add_subcommand("adapt", "run the two-step source-free adaptation");
  add_common(adapt_cmd);
  adapt_cmd->add_option("--step", step, "1, 2, or all")->check(CLI::IsMember({"1", "2", "all"}));
  adapt_cmd->add_option("--data", data_dir, "dataset directory");
  adapt_cmd->add_option("--ckpt", ckpt, "starting checkpoint (default source model)");

  auto* infer = app.add_subcommand("infer", "write detections for a domain/split as CSV");
  add_common(infer);
  infer->add_option("--data", data_dir, "dataset directory");
  infer->add_option("--ckpt", ckpt, "checkpoint (default adapted model)");
  infer->add_option("--domain", domain, "source or target");
  infer->add_option("--split", split, "train, val, or test");
  infer->add_option("--pred", pred_path, "output CSV (default <out_dir>/predictions.csv)");

  auto* froc_cmd = app.add_subcommand("froc", "FROC evaluation of a predictions CSV");
  froc_cmd->add_option("--pred", pred_path, "predictions CSV")->required();
  froc_cmd->add_option("--ann", ann_path, "annotations CSV")->required();
  froc_cmd->add_option("--report", report_path, "JSON report path");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  gradcheck->add_option("--seed", check_seed, "suite seed");
  gradcheck->add_option("--report", report_path, "JSON report path");

  auto* selftest = app.add_subcommand("selftest", "monotonicity and invariant verification");
  selftest->add_option("--seed", check_seed, "suite seed");
  selftest->add_option("--report", report_path, "JSON report path");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(load_run_config(common), data_dir);
    if (train->parsed()) return cmd_train_source(load_run_config(common), data_dir);
    if (adapt_cmd->parsed()) return cmd_adapt(load_run_config(common), step, data_dir, ckpt);
    if (infer->parsed())
      return cmd_infer(load_run_config(common), data_dir, ckpt, domain, split, pred_path);
    if (froc_cmd->parsed()) return cmd_froc(pred_path, ann_path, report_path);
    if (gradcheck->parsed()) return cmd_gradcheck(check_seed, report_path);
    if (selftest->parsed()) return cmd_selftest(check_seed, report_path);
  } catch (const config::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const CheckFailure& e) {
    std::cerr << "check failure: " << e.what() << "\n";
    return kExitCheckFailed;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid argument: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  }
  return kExitOk;
}
