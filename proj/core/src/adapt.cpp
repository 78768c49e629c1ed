#include "supici/adapt.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "supici/data.hpp"

namespace supici::adapt {

namespace {

constexpr double kFeatureNormFloor = 1e-6;  // guards cosine similarity stability

double pooled_norm(const std::vector<double>& v) {
  double s = 0.0;
  for (const double x : v) s += x * x;
  return std::sqrt(s);
}

struct PatchSet {
  std::vector<VolumeU8> patches;
};

PatchSet collect_patches(const std::vector<data::ScanRecord>& scans, const AdaptConfig& cfg) {
  PatchSet set;
  for (const data::ScanRecord& scan : scans)
    for (data::Patch& p : data::crop_patches(scan.voxels, cfg.patch_side, cfg.patch_overlap))
      set.patches.push_back(std::move(p.voxels));
  if (set.patches.empty()) throw std::invalid_argument("adapt: no patches in target scans");
  return set;
}

nlohmann::json config_to_json(const AdaptConfig& cfg) {
  return {
      {"t_fg", cfg.t_fg},
      {"t_bg", cfg.t_bg},
      {"max_fg", cfg.max_fg},
      {"max_bg", cfg.max_bg},
      {"delta", cfg.delta},
      {"beta", cfg.beta},
      {"eta", cfg.eta},
      {"omega", cfg.contrastive.omega},
      {"sim_clamp_eps", cfg.contrastive.sim_clamp_eps},
      {"tau1", cfg.we.tau1},
      {"tau2", cfg.we.tau2},
      {"gamma", cfg.we.gamma},
      {"alpha", cfg.we.alpha},
      {"detach_we_factor", cfg.we.detach_modulating_factor},
      {"epochs_per_step", cfg.epochs_per_step},
      {"nms_iou", cfg.nms_iou},
      {"top_n", cfg.top_n},
      {"batch_size", cfg.batch_size},
      {"patch_side", cfg.patch_side},
      {"patch_overlap", cfg.patch_overlap},
      {"lr", cfg.lr},
      {"momentum", cfg.momentum},
      {"weight_decay", cfg.weight_decay},
      {"pos_iou", cfg.assign.pos_iou},
      {"neg_iou", cfg.assign.neg_iou},
      {"rpn_neg_base", cfg.rpn_neg_base},
      {"rpn_neg_pos_ratio", cfg.rpn_neg_pos_ratio},
      {"max_grad_norm", cfg.max_grad_norm},
      {"step1_max_grad_norm", cfg.step1_max_grad_norm},
  };
}

nlohmann::json step_to_json(const StepLog& log) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const EpochLog& e : log.epochs)
    epochs.push_back({{"mean_loss", e.mean_loss},
                      {"fg_per_patch", e.fg_per_patch},
                      {"bg_per_patch", e.bg_per_patch},
                      {"pseudo_per_patch", e.pseudo_per_patch},
                      {"we_active_per_patch", e.we_active_per_patch}});
  return {{"epochs", epochs}};
}

}  // namespace

void AdaptConfig::validate() const {
  if (!(t_bg >= 0.0 && t_bg < t_fg && t_fg <= 1.0))
    throw std::invalid_argument("AdaptConfig: require 0 <= t_bg < t_fg <= 1");
  if (max_fg < 0 || max_bg < 0) throw std::invalid_argument("AdaptConfig: negative instance cap");
  if (!(delta >= 0.0 && delta <= 1.0))
    throw std::invalid_argument("AdaptConfig: delta must be in [0,1]");
  if (!(beta >= 0.0 && beta <= 1.0))
    throw std::invalid_argument("AdaptConfig: beta must be in [0,1]");
  if (eta < 0.0) throw std::invalid_argument("AdaptConfig: eta must be >= 0");
  if (contrastive.omega < 0.0 || !std::isfinite(contrastive.omega))
    throw std::invalid_argument("AdaptConfig: omega must be finite and >= 0");
  if (!(contrastive.sim_clamp_eps > 0.0 && contrastive.sim_clamp_eps <= 0.1))
    throw std::invalid_argument("AdaptConfig: sim_clamp_eps must be in (0, 0.1]");
  if (!(we.tau1 > 0.0 && we.tau1 < we.tau2 && we.tau2 < 1.0))
    throw std::invalid_argument("AdaptConfig: require 0 < tau1 < tau2 < 1");
  if (we.gamma < 0.0 || we.alpha < 0.0 || we.alpha > 1.0)
    throw std::invalid_argument("AdaptConfig: require gamma >= 0 and alpha in [0,1]");
  if (epochs_per_step < 0 || batch_size < 1 || top_n < 1 || patch_side < 4 ||
      patch_side % detector::kStride != 0)
    throw std::invalid_argument("AdaptConfig: bad training geometry");
  if (!(nms_iou >= 0.0 && nms_iou <= 1.0))
    throw std::invalid_argument("AdaptConfig: nms_iou must be in [0,1]");
  if (lr <= 0.0 || momentum < 0.0 || weight_decay < 0.0)
    throw std::invalid_argument("AdaptConfig: bad optimizer settings");
}

std::vector<detector::ContrastiveSelection> select_instances(
    const std::vector<detector::Proposal>& proposals, const detector::Tensor4& feature_map,
    const AdaptConfig& cfg, rng::Engine& bg_rng) {
  std::vector<int> fg_idx, bg_idx;
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    const bool is_fg = proposals[i].score >= cfg.t_fg;
    const bool is_bg = proposals[i].score <= cfg.t_bg;
    if (!is_fg && !is_bg) continue;
    if (pooled_norm(detector::roi_features(feature_map, proposals[i].box)) < kFeatureNormFloor)
      continue;
    (is_fg ? fg_idx : bg_idx).push_back(static_cast<int>(i));
  }

  // proposals come score-descending, so the first max_fg are the highest
  if (static_cast<int>(fg_idx.size()) > cfg.max_fg) fg_idx.resize(cfg.max_fg);
  if (static_cast<int>(bg_idx.size()) > cfg.max_bg) {
    bg_rng.shuffle(bg_idx);
    bg_idx.resize(cfg.max_bg);
    std::sort(bg_idx.begin(), bg_idx.end());
  }

  std::vector<detector::ContrastiveSelection> out;
  for (const int i : fg_idx) out.push_back({proposals[i].box, true});
  for (const int i : bg_idx) out.push_back({proposals[i].box, false});
  return out;
}

losses::InstanceFeatures auto_label_instances(const std::vector<detector::Proposal>& proposals,
                                              const detector::Tensor4& feature_map,
                                              const AdaptConfig& cfg, rng::Engine& bg_rng) {
  std::vector<std::vector<double>> fg, bg;
  for (const detector::ContrastiveSelection& sel :
       select_instances(proposals, feature_map, cfg, bg_rng)) {
    auto pooled = detector::roi_features(feature_map, sel.box);
    (sel.foreground ? fg : bg).push_back(std::move(pooled));
  }
  return losses::InstanceFeatures(std::move(fg), std::move(bg));
}

std::vector<PseudoNodule> make_pseudo_labels(const detector::DetectorParams& teacher,
                                             const VolumeU8& patch, const AdaptConfig& cfg) {
  const detector::ForwardResult fwd = detector::forward(teacher, patch);
  std::vector<PseudoNodule> out;
  for (const detector::Proposal& p : detector::propose(fwd.rpn, patch, cfg.top_n, cfg.nms_iou))
    if (p.score >= cfg.delta) out.push_back({p.box, p.score});
  return out;
}

std::vector<losses::InstanceTarget> assign_targets(const std::vector<PseudoNodule>& pseudo,
                                                   const std::vector<geom::Box3>& candidates,
                                                   const AdaptConfig& cfg) {
  std::vector<geom::Box3> gt;
  gt.reserve(pseudo.size());
  for (const PseudoNodule& p : pseudo) gt.push_back(p.box);
  return detector::assign_box_targets(gt, candidates, cfg.assign);
}

void ema_update(TeacherStudent& ts, double beta) {
  if (!(beta >= 0.0 && beta <= 1.0))
    throw std::invalid_argument("ema_update: beta must be in [0,1]");
  auto& t = ts.teacher.values();
  const auto& s = ts.student.values();
  if (t.size() != s.size()) throw std::invalid_argument("ema_update: shape mismatch");
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = beta * t[i] + (1.0 - beta) * s[i];
}

detector::DetectorParams step1_adapt(const detector::DetectorParams& source_model,
                                     const std::vector<data::ScanRecord>& target_scans,
                                     const AdaptConfig& cfg, std::uint64_t seed, StepLog* log) {
  cfg.validate();
  PatchSet set = collect_patches(target_scans, cfg);

  detector::DetectorParams params = source_model;
  const std::vector<std::uint8_t> mask = detector::layer_mask({"conv1", "conv2", "rpn"});
  detector::OptimState opt{cfg.lr, cfg.momentum, cfg.weight_decay, {}};

  std::vector<std::size_t> order(set.patches.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = 0; epoch < cfg.epochs_per_step; ++epoch) {
    rng::Engine shuffler(rng::derive_seed(seed, 0xA000 + epoch));
    shuffler.shuffle(order);

    double loss_sum = 0.0;
    std::size_t fg_count = 0, bg_count = 0, n_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      detector::LossPlan plan;
      plan.spec = detector::LossSpec::Contrastive;
      plan.contrastive = cfg.contrastive;
      plan.workers = cfg.workers;
      plan.patches.resize(end - start);

      detector::parallel_for_ordered(end - start, cfg.workers, [&](std::size_t i) {
        const VolumeU8& patch = set.patches[order[start + i]];
        const detector::ForwardResult fwd = detector::forward(params, patch);
        const auto proposals = detector::propose(fwd.rpn, patch, cfg.top_n, cfg.nms_iou);
        rng::Engine bg_rng(rng::derive_seed(
            seed, 0xB0000000ull + std::uint64_t(epoch) * 1000003ull + (start + i)));
        const auto selections = select_instances(proposals, fwd.feature_map, cfg, bg_rng);
        plan.patches[i] = detector::build_contrastive_patch_plan(patch, selections,
                                                                 fwd.rpn.feature_dims);
      });

      for (const detector::PatchPlan& p : plan.patches)
        for (const detector::ContrastivePlanInstance& inst : p.instances)
          (inst.foreground ? fg_count : bg_count) += 1;

      detector::LossGradient lg = detector::loss_gradient(params, plan);
      detector::clip_gradient(lg.grad, cfg.step1_max_grad_norm);
      if (lg.active) detector::sgd_step(params, lg.grad, opt, &mask);
      loss_sum += lg.value;
      ++n_batches;
    }
    if (log) {
      EpochLog e;
      e.mean_loss = n_batches ? loss_sum / double(n_batches) : 0.0;
      e.fg_per_patch = double(fg_count) / double(set.patches.size());
      e.bg_per_patch = double(bg_count) / double(set.patches.size());
      log->epochs.push_back(e);
    }
  }
  return params;
}

detector::DetectorParams step2_adapt(const detector::DetectorParams& adapted_model,
                                     const std::vector<data::ScanRecord>& target_scans,
                                     const AdaptConfig& cfg, std::uint64_t seed, StepLog* log) {
  cfg.validate();
  PatchSet set = collect_patches(target_scans, cfg);

  TeacherStudent ts{adapted_model, adapted_model};
  detector::OptimState opt{cfg.lr, cfg.momentum, cfg.weight_decay, {}};

  detector::PlanOptions opts;
  opts.proposal = {cfg.top_n, cfg.nms_iou};
  opts.assign = cfg.assign;
  opts.add_gt_to_roi = true;
  opts.supervise_empty = false;  // no pseudo labels means no supervision signal
  opts.we_instances = true;
  opts.we = cfg.we;
  opts.neg_base = cfg.rpn_neg_base;
  opts.neg_pos_ratio = cfg.rpn_neg_pos_ratio;

  std::vector<std::size_t> order(set.patches.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = 0; epoch < cfg.epochs_per_step; ++epoch) {
    rng::Engine shuffler(rng::derive_seed(seed, 0xC000 + epoch));
    shuffler.shuffle(order);

    double loss_sum = 0.0;
    std::size_t pseudo_count = 0, we_active = 0, n_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      detector::LossPlan plan;
      plan.spec = detector::LossSpec::StudentTotal;
      plan.eta = cfg.eta;
      plan.we = cfg.we;
      plan.workers = cfg.workers;
      plan.patches.resize(end - start);
      std::vector<std::size_t> pseudo_counts(end - start, 0);

      detector::parallel_for_ordered(end - start, cfg.workers, [&](std::size_t i) {
        const VolumeU8& patch = set.patches[order[start + i]];
        const std::vector<PseudoNodule> pseudo = make_pseudo_labels(ts.teacher, patch, cfg);
        pseudo_counts[i] = pseudo.size();
        std::vector<geom::Box3> gt;
        gt.reserve(pseudo.size());
        for (const PseudoNodule& p : pseudo) gt.push_back(p.box);
        detector::PlanOptions po = opts;
        po.sample_seed = rng::derive_seed(
            seed, 0xE0000000ull + std::uint64_t(epoch) * 1000003ull + (start + i));
        plan.patches[i] = detector::build_patch_plan(ts.student, patch, gt, po);
      });

      for (const std::size_t c : pseudo_counts) pseudo_count += c;
      for (const detector::PatchPlan& p : plan.patches)
        for (const detector::RoiPlanInstance& inst : p.roi)
          if (inst.in_we && inst.we_branch != 0) ++we_active;

      detector::LossGradient lg = detector::loss_gradient(ts.student, plan);
      detector::clip_gradient(lg.grad, cfg.max_grad_norm);
      if (lg.active) detector::sgd_step(ts.student, lg.grad, opt);
      ema_update(ts, cfg.beta);  // once per training iteration
      loss_sum += lg.value;
      ++n_batches;
    }
    if (log) {
      EpochLog e;
      e.mean_loss = n_batches ? loss_sum / double(n_batches) : 0.0;
      e.pseudo_per_patch = double(pseudo_count) / double(set.patches.size());
      e.we_active_per_patch = double(we_active) / double(set.patches.size());
      log->epochs.push_back(e);
    }
  }
  return ts.student;
}

PipelineResult adapt_pipeline(
    const detector::DetectorParams& source_model,
    const std::vector<data::ScanRecord>& target_scans, const AdaptConfig& cfg, std::uint64_t seed,
    const std::function<double(const detector::DetectorParams&)>& froc_snapshot) {
  PipelineResult result;
  result.report.seed = seed;
  if (froc_snapshot) result.report.froc_source = froc_snapshot(source_model);

  const detector::DetectorParams adapted =
      step1_adapt(source_model, target_scans, cfg, seed, &result.report.step1);
  if (froc_snapshot) result.report.froc_after_step1 = froc_snapshot(adapted);

  result.params = step2_adapt(adapted, target_scans, cfg, seed, &result.report.step2);
  if (froc_snapshot) result.report.froc_after_step2 = froc_snapshot(result.params);
  return result;
}

void write_run_report(const std::filesystem::path& path, const RunReport& report,
                      const AdaptConfig& cfg) {
  nlohmann::json j;
  j["seed"] = report.seed;
  j["config"] = config_to_json(cfg);
  if (!report.run_config_json.empty())
    j["run_config"] = nlohmann::json::parse(report.run_config_json);
  j["step1"] = step_to_json(report.step1);
  j["step2"] = step_to_json(report.step2);
  nlohmann::json froc;
  if (report.froc_source >= 0.0) froc["source"] = report.froc_source;
  if (report.froc_after_step1 >= 0.0) froc["after_step1"] = report.froc_after_step1;
  if (report.froc_after_step2 >= 0.0) froc["after_step2"] = report.froc_after_step2;
  j["froc_snapshots"] = froc;

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

}  // namespace supici::adapt
