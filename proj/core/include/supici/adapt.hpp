#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "supici/detector.hpp"
#include "supici/geom.hpp"
#include "supici/losses.hpp"
#include "supici/rng.hpp"
#include "supici/volume.hpp"

namespace supici::data {
struct ScanRecord;
}

namespace supici::adapt {

struct AdaptConfig {
  // auto-labeling thresholds and per-patch caps for contrastive instances
  double t_fg = 0.9;
  double t_bg = 0.1;
  int max_fg = 16;
  int max_bg = 32;

  double delta = 0.7;    // teacher pseudo-label confidence threshold
  double beta = 0.9996;  // EMA rate for the teacher update
  double eta = 1.0;      // balance between pseudo-supervised and WE loss

  losses::ContrastiveConfig contrastive;
  losses::WEConfig we;

  int epochs_per_step = 100;
  double nms_iou = 0.1;
  int top_n = 64;
  int batch_size = 8;
  int patch_side = 32;
  int patch_overlap = 0;

  double lr = 5e-4;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  detector::AssignConfig assign;
  int rpn_neg_base = 256;     // sampled negative anchors per patch (0 = all)
  int rpn_neg_pos_ratio = 8;
  double max_grad_norm = 10.0;        // step-2 L2 clip on batch gradients (0 = off)
  double step1_max_grad_norm = 0.25;  // step-1 clip; contrastive fine-tuning
                                      // works in a small-movement regime

  int workers = 1;

  void validate() const;  // throws std::invalid_argument
};

/// theta_t / theta_s pair; initialized equal.
struct TeacherStudent {
  detector::DetectorParams teacher;
  detector::DetectorParams student;
};

/// Teacher detection retained above the confidence threshold delta.
struct PseudoNodule {
  geom::Box3 box;
  double score = 0.0;  // >= delta by construction
};

/// Score-threshold selection of contrastive instances: proposals with score
/// >= t_fg become foreground (top max_fg by score), proposals with score
/// <= t_bg become background (max_bg drawn by seeded uniform choice).
/// Instances whose pooled feature norm is below 1e-6 are dropped.
std::vector<detector::ContrastiveSelection> select_instances(
    const std::vector<detector::Proposal>& proposals, const detector::Tensor4& feature_map,
    const AdaptConfig& cfg, rng::Engine& bg_rng);

/// Pooled feature sets for the selected instances.
losses::InstanceFeatures auto_label_instances(const std::vector<detector::Proposal>& proposals,
                                              const detector::Tensor4& feature_map,
                                              const AdaptConfig& cfg, rng::Engine& bg_rng);

/// Teacher forward + propose + keep scores >= delta.
std::vector<PseudoNodule> make_pseudo_labels(const detector::DetectorParams& teacher,
                                             const VolumeU8& patch, const AdaptConfig& cfg);

/// Same IoU rule as supervised assignment, against pseudo ground truths.
std::vector<losses::InstanceTarget> assign_targets(const std::vector<PseudoNodule>& pseudo,
                                                   const std::vector<geom::Box3>& candidates,
                                                   const AdaptConfig& cfg);

/// theta_t <- beta * theta_t + (1 - beta) * theta_s.
void ema_update(TeacherStudent& ts, double beta);

struct EpochLog {
  double mean_loss = 0.0;
  double fg_per_patch = 0.0;         // step 1: selected foreground instances
  double bg_per_patch = 0.0;         // step 1: selected background instances
  double pseudo_per_patch = 0.0;     // step 2: teacher pseudo nodules
  double we_active_per_patch = 0.0;  // step 2: RoI probs outside [tau1, tau2]
};

struct StepLog {
  std::vector<EpochLog> epochs;
};

/// Step 1: instance-level contrastive adaptation. Only backbone and RPN
/// parameters are updated; batches on which every contrastive term is
/// inactive change nothing.
detector::DetectorParams step1_adapt(const detector::DetectorParams& source_model,
                                     const std::vector<data::ScanRecord>& target_scans,
                                     const AdaptConfig& cfg, std::uint64_t seed,
                                     StepLog* log = nullptr);

/// Step 2: teacher-student mutual training with the weighted entropy loss.
/// Per batch: teacher pseudo labels -> student supervised + WE loss ->
/// SGD on all student parameters -> one EMA teacher update.
detector::DetectorParams step2_adapt(const detector::DetectorParams& adapted_model,
                                     const std::vector<data::ScanRecord>& target_scans,
                                     const AdaptConfig& cfg, std::uint64_t seed,
                                     StepLog* log = nullptr);

struct RunReport {
  std::uint64_t seed = 0;
  StepLog step1;
  StepLog step2;
  double froc_source = -1.0;       // snapshots, -1 when not evaluated
  double froc_after_step1 = -1.0;
  double froc_after_step2 = -1.0;
  std::string run_config_json;     // full run configuration snapshot (optional)
};

struct PipelineResult {
  detector::DetectorParams params;
  RunReport report;
};

/// step1_adapt then step2_adapt; the optional evaluator provides FROC
/// snapshots before adaptation, after step 1, and after step 2.
PipelineResult adapt_pipeline(const detector::DetectorParams& source_model,
                              const std::vector<data::ScanRecord>& target_scans,
                              const AdaptConfig& cfg, std::uint64_t seed,
                              const std::function<double(const detector::DetectorParams&)>&
                                  froc_snapshot = nullptr);

/// Deterministic JSON dump of the report plus the config snapshot.
void write_run_report(const std::filesystem::path& path, const RunReport& report,
                      const AdaptConfig& cfg);

}  // namespace supici::adapt
