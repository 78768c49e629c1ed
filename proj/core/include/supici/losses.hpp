#pragma once

#include <array>
#include <span>
#include <vector>

namespace supici::losses {

/// Clamp applied to similarities and probabilities before any log.
inline constexpr double kClampEps = 1e-6;

struct ContrastiveConfig {
  double omega = 0.25;          // rank-weight smoothing, >= 0
  double sim_clamp_eps = kClampEps;  // in (0, 0.1]
};

struct WEConfig {
  double tau1 = 0.25;  // lower confidence threshold, in (0,1)
  double tau2 = 0.75;  // upper confidence threshold, in (0,1), tau1 < tau2
  double gamma = 4.0;  // focusing parameter, >= 0
  double alpha = 0.1;  // class-imbalance weight, in [0,1]
  // When true the modulating factor is held constant during differentiation
  // instead of being differentiated through.
  bool detach_modulating_factor = false;
};

/// Foreground (nodule) and background instance feature vectors. All vectors
/// share one dimension d >= 1 and have norm >= 1e-12; both checks are
/// enforced on construction.
class InstanceFeatures {
public:
  InstanceFeatures(std::vector<std::vector<double>> foreground,
                   std::vector<std::vector<double>> background);

  const std::vector<std::vector<double>>& foreground() const { return fg_; }
  const std::vector<std::vector<double>>& background() const { return bg_; }
  int foreground_count() const { return static_cast<int>(fg_.size()); }
  int background_count() const { return static_cast<int>(bg_.size()); }
  int dim() const { return dim_; }

private:
  std::vector<std::vector<double>> fg_;
  std::vector<std::vector<double>> bg_;
  int dim_ = 0;
};

/// Scalar loss with the gradient of a flat view of its differentiable inputs.
/// `active` is false when every term of the loss was structurally inactive
/// (empty pair sets, empty targets) and the zero value carries no signal.
struct LossOutput {
  double value = 0.0;
  std::vector<double> grad;
  bool active = true;
};

struct FeatureGradients {
  std::vector<std::vector<double>> foreground;
  std::vector<std::vector<double>> background;
};

struct ContrastiveLossOutput {
  double value = 0.0;
  FeatureGradients grad;  // same shapes as the input features
  bool active = false;
};

/// dot(f,g) / (|f| |g|), unclamped. Throws on dimension mismatch.
double cosine_sim(std::span<const double> f, std::span<const double> g);

/// exp(-omega * rank) with ranks assigned by descending similarity;
/// the most similar pair gets rank 0 and ties share the smallest rank of
/// their group (competition ranking).
std::vector<double> rank_weights(const std::vector<double>& sims, double omega);

/// -(1/mk) sum log(1 - s_ij) over all foreground-background pairs.
ContrastiveLossOutput contrastive_neg_loss(const InstanceFeatures& feat,
                                           const ContrastiveConfig& cfg);

/// Rank-weighted positive terms over foreground-foreground and
/// background-background pairs. Rank weights are recomputed per evaluation
/// but held constant during differentiation.
ContrastiveLossOutput contrastive_pos_loss(const InstanceFeatures& feat,
                                           const ContrastiveConfig& cfg);

/// Positive plus negative component; value is exactly the sum of the two.
ContrastiveLossOutput contrastive_loss(const InstanceFeatures& feat,
                                       const ContrastiveConfig& cfg);

/// Binary cross-entropy on a probability clamped to [eps, 1-eps].
/// grad has size 1 (d value / d p).
LossOutput bce_loss(double p, int target);

/// Sum over the 6 coordinates of 0.5 x^2 for |x| < 1 else |x| - 0.5,
/// x = pred - target. grad has size 6 (w.r.t. pred).
LossOutput smooth_l1(const std::array<double, 6>& pred, const std::array<double, 6>& target);

enum class TargetLabel { Ignore = -1, Negative = 0, Positive = 1 };

struct InstancePrediction {
  double prob = 0.5;
  std::array<double, 6> offsets{};
};

struct InstanceTarget {
  TargetLabel label = TargetLabel::Ignore;
  std::array<double, 6> offsets{};  // encoded regression target, used when Positive
};

struct PredictionGradients {
  std::vector<double> prob;
  std::vector<std::array<double, 6>> offsets;
};

struct DetectionLossOutput {
  double value = 0.0;
  PredictionGradients rpn;
  PredictionGradients roi;
  bool active = true;
};

/// Classification (BCE) plus regression (smooth-L1, positives only) summed
/// over RPN and RoI instances. Empty target sets yield value 0, zero
/// gradients, active=false, and a warning on stderr.
DetectionLossOutput sup_detection_loss(const std::vector<InstancePrediction>& rpn_preds,
                                       const std::vector<InstanceTarget>& rpn_targets,
                                       const std::vector<InstancePrediction>& roi_preds,
                                       const std::vector<InstanceTarget>& roi_targets);

/// Weighted entropy over RoI nodule probabilities. Instances with
/// tau1 <= p <= tau2 contribute exactly 0. grad has one entry per prob.
LossOutput we_loss(const std::vector<double>& probs, const WEConfig& cfg);

/// eta * sup + unsup, values and flat gradients combined linearly.
/// Either gradient may be empty (treated as zeros). Throws on negative eta.
LossOutput student_total_loss(const LossOutput& sup, const LossOutput& unsup, double eta);

}  // namespace supici::losses
