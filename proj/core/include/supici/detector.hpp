#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "supici/geom.hpp"
#include "supici/losses.hpp"
#include "supici/volume.hpp"

namespace supici::data {
struct ScanRecord;
}

namespace supici::detector {

// Minimal two-stage 3D detector:
//   backbone : conv 3^3 stride 2 (1 -> 8) + ReLU, conv 3^3 stride 2 (8 -> 16) + ReLU
//   rpn head : 1^3 conv, 16 -> A*(1+6) outputs per feature voxel, A = 3 anchors
//   roi head : pooled 16-vector -> 32 (ReLU) -> 1 class logit + 6 offsets
// All parameters live in one flat vector described by the shape manifest.

inline constexpr int kStride = 4;
inline constexpr int kAnchorsPerVoxel = 3;
inline constexpr std::array<double, 3> kAnchorSides{6.0, 10.0, 16.0};
inline constexpr int kFeatureChannels = 16;

struct LayerInfo {
  std::string name;
  std::vector<int> shape;
  std::size_t offset;
  std::size_t size;
};

const std::vector<LayerInfo>& shape_manifest();
std::size_t param_count();

class DetectorParams {
public:
  DetectorParams();  // zero-initialized

  /// He-style initialization, biases zero, deterministic per seed.
  static DetectorParams random_init(std::uint64_t seed, double scale = 1.0);

  std::vector<double>& values() { return v_; }
  const std::vector<double>& values() const { return v_; }

  std::span<double> layer(std::string_view name);
  std::span<const double> layer(std::string_view name) const;

private:
  std::vector<double> v_;
};

/// Versioned checkpoint: magic line, JSON shape manifest line, then the flat
/// parameter vector as little-endian 64-bit floats.
inline constexpr std::string_view kCheckpointMagic = "SUPICI-CKPT-1";
void save_checkpoint(const std::filesystem::path& path, const DetectorParams& params);
DetectorParams load_checkpoint(const std::filesystem::path& path);

/// Update mask with 1 for every parameter of the listed layer-name prefixes.
std::vector<std::uint8_t> layer_mask(const std::vector<std::string>& prefixes);

struct AnchorGrid {
  Dims3 feature_dims;

  int count() const {
    return static_cast<int>(feature_dims.total()) * kAnchorsPerVoxel;
  }
  /// Cubic anchor centered at ((index + 0.5) * stride) per axis.
  geom::Box3 anchor_box(int z, int y, int x, int a) const;
  geom::Box3 anchor_box(int flat) const;
};

/// Channel-major dense 4D tensor: index = ((c * nz + z) * ny + y) * nx + x.
struct Tensor4 {
  int channels = 0;
  Dims3 sp;
  std::vector<double> v;

  Tensor4() = default;
  Tensor4(int c, Dims3 s) : channels(c), sp(s), v(std::size_t(c) * s.total(), 0.0) {}
  double& at(int c, int z, int y, int x) { return v[index(c, z, y, x)]; }
  double at(int c, int z, int y, int x) const { return v[index(c, z, y, x)]; }
  std::size_t index(int c, int z, int y, int x) const {
    return ((std::size_t(c) * sp.nz + z) * sp.ny + y) * sp.nx + x;
  }
};

struct RpnOutput {
  Dims3 feature_dims;
  std::vector<double> probs;                    // per anchor, sigmoid of logit
  std::vector<geom::Offsets> offsets;           // per anchor
  int count() const { return static_cast<int>(probs.size()); }
};

struct ForwardResult {
  Tensor4 feature_map;  // post-ReLU backbone output, 16 channels
  RpnOutput rpn;
};

/// Deterministic forward pass. Patch dims must be divisible by 4; uint8
/// voxels are rescaled to [0,1] internally.
ForwardResult forward(const DetectorParams& params, const VolumeU8& patch);

struct Proposal {
  geom::Box3 box;  // clipped to patch bounds
  double score;
  int anchor_index;
};

/// Decode all anchors, clip to the patch, NMS, keep the top_n by score.
std::vector<Proposal> propose(const RpnOutput& rpn, const VolumeU8& patch, int top_n,
                              double nms_iou);

/// Spatial feature-map voxels whose centers fall inside the box (box given in
/// patch coordinates); falls back to the single nearest voxel when empty.
std::vector<int> roi_member_voxels(Dims3 feature_dims, const geom::Box3& box);

/// Average-pooled feature vector over the member voxels.
std::vector<double> roi_features(const Tensor4& feature_map, const geom::Box3& box);

struct RoiOutput {
  double prob = 0.5;
  geom::Offsets offsets{};
};

RoiOutput forward_roi(const DetectorParams& params, std::span<const double> pooled);

/// Max-IoU assignment: positive at IoU >= pos_iou or as a gt box's argmax
/// candidate, negative below neg_iou, ignored in between. Regression targets
/// are encoded offsets of the best gt against the candidate.
struct AssignConfig {
  double pos_iou = 0.3;
  double neg_iou = 0.1;
};
std::vector<losses::InstanceTarget> assign_box_targets(const std::vector<geom::Box3>& gt,
                                                       const std::vector<geom::Box3>& candidates,
                                                       const AssignConfig& cfg = {});

// ---- loss plans ----
//
// A plan freezes every discrete decision of one evaluation: proposal boxes,
// pooling footprints, assigned targets, instance selections, and weighted
// entropy branches. Given the plan, the loss is a smooth function of the
// parameters, which is what both backpropagation and the finite-difference
// oracle differentiate.

enum class LossSpec { Contrastive, Supervised, StudentTotal };

struct RoiPlanInstance {
  geom::Box3 box;
  std::vector<int> members;  // spatial feature-map indices
  losses::InstanceTarget target;
  bool in_we = false;
  int we_branch = 0;  // -1: p < tau1, 0: dead zone, +1: p > tau2 (frozen)
};

struct ContrastivePlanInstance {
  std::vector<int> members;
  bool foreground = false;
};

struct PatchPlan {
  VolumeU8 patch;
  std::vector<losses::InstanceTarget> rpn_targets;   // empty => no RPN supervision
  std::vector<RoiPlanInstance> roi;
  std::vector<ContrastivePlanInstance> instances;    // contrastive selections
};

struct LossPlan {
  LossSpec spec = LossSpec::Supervised;
  double eta = 1.0;
  losses::ContrastiveConfig contrastive;
  losses::WEConfig we;
  std::vector<PatchPlan> patches;  // batch loss = mean over patches
  int workers = 1;                 // patches evaluated in parallel, reduced in order
};

struct ProposalConfig {
  int top_n = 64;
  double nms_iou = 0.1;
};

struct PlanOptions {
  ProposalConfig proposal;
  AssignConfig assign;
  bool add_gt_to_roi = true;     // append gt boxes as extra RoI instances
  bool supervise_empty = false;  // gt-free patch: true => all anchors negative,
                                 // false => no supervision (pseudo-label mode)
  bool we_instances = false;     // mark RoI instances for the WE term
  losses::WEConfig we;
  // Standard two-stage convention: only a seeded random sample of negative
  // anchors enters the RPN loss, max(neg_base, neg_pos_ratio * positives).
  // neg_base = 0 keeps every negative.
  int neg_base = 0;
  int neg_pos_ratio = 8;
  std::uint64_t sample_seed = 0;
};

/// Supervision plan for one patch against the given ground-truth (or pseudo
/// ground-truth) boxes, proposals taken from the current parameters.
PatchPlan build_patch_plan(const DetectorParams& params, const VolumeU8& patch,
                           const std::vector<geom::Box3>& gt_boxes, const PlanOptions& opts);

struct ContrastiveSelection {
  geom::Box3 box;
  bool foreground;
};

PatchPlan build_contrastive_patch_plan(const VolumeU8& patch,
                                       const std::vector<ContrastiveSelection>& selections,
                                       Dims3 feature_dims);

/// Loss value for a frozen plan; smooth in params.
double eval_loss(const DetectorParams& params, const LossPlan& plan);

struct LossGradient {
  double value = 0.0;
  std::vector<double> grad;  // same length as the parameter vector
  bool active = true;
};

/// Exact gradient of eval_loss with respect to every parameter. Throws on a
/// non-finite loss, naming the offending patch and term.
LossGradient loss_gradient(const DetectorParams& params, const LossPlan& plan);

// ---- optimization ----

struct OptimState {
  double lr = 5e-4;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::vector<double> velocity;  // lazily sized
};

/// Rescale grad in place to the given L2 norm when it exceeds it
/// (max_norm <= 0 disables). Returns the pre-clip norm.
double clip_gradient(std::vector<double>& grad, double max_norm);

/// v <- momentum * v + grad + weight_decay * params; params <- params - lr * v.
/// Entries with mask 0 are left untouched (mask may be null).
void sgd_step(DetectorParams& params, const std::vector<double>& grad, OptimState& opt,
              const std::vector<std::uint8_t>* update_mask = nullptr);

// ---- source training ----

struct TrainConfig {
  int epochs = 40;
  int batch_size = 8;
  double lr = 5e-4;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double init_scale = 1.0;
  int patch_side = 32;
  int patch_overlap = 0;
  ProposalConfig proposal;
  AssignConfig assign;
  int rpn_neg_base = 0;       // sampled negative anchors per patch (0 = all)
  int rpn_neg_pos_ratio = 8;
  int workers = 1;
};

struct TrainReport {
  std::vector<double> epoch_losses;
};

/// Supervised training against true annotations; deterministic per seed.
/// Writes a checkpoint per epoch when checkpoint_dir is non-null.
DetectorParams train_source(const std::vector<data::ScanRecord>& scans, const TrainConfig& cfg,
                            std::uint64_t seed,
                            const std::filesystem::path* checkpoint_dir = nullptr,
                            TrainReport* report = nullptr);

// ---- inference ----

struct InferConfig {
  int top_n = 64;
  double nms_iou = 0.1;
  int max_detections = 64;
  double min_score = 0.0;
};

/// Whole-scan inference: pad to a multiple of 4 with the dataset pad value,
/// propose, refine through the RoI head, suppress, cap.
std::vector<geom::Detection> infer_scan(const DetectorParams& params, const VolumeU8& scan,
                                        const InferConfig& cfg);

/// Patches computed in parallel but reduced in input order.
void parallel_for_ordered(std::size_t n, int workers, const std::function<void(std::size_t)>& fn);

}  // namespace supici::detector
