#include "supici/losses.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <stdexcept>

namespace supici::losses {

namespace {

double norm(std::span<const double> v) {
  double s = 0.0;
  for (const double x : v) s += x * x;
  return std::sqrt(s);
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// d sim / d f = g/(|f||g|) - sim * f/|f|^2, accumulated into out with weight w.
void accumulate_cosine_grad(std::span<const double> f, std::span<const double> g,
                            double sim, double w, std::vector<double>& out) {
  const double nf = norm(f), ng = norm(g);
  const double inv = 1.0 / (nf * ng);
  const double self = sim / (nf * nf);
  for (std::size_t i = 0; i < f.size(); ++i) out[i] += w * (g[i] * inv - self * f[i]);
}

FeatureGradients zero_gradients(const InstanceFeatures& feat) {
  FeatureGradients g;
  g.foreground.assign(feat.foreground_count(), std::vector<double>(feat.dim(), 0.0));
  g.background.assign(feat.background_count(), std::vector<double>(feat.dim(), 0.0));
  return g;
}

struct UnorderedPair {
  int i, j;
  double sim;
};

std::vector<UnorderedPair> pair_sims(const std::vector<std::vector<double>>& vecs) {
  std::vector<UnorderedPair> pairs;
  const int n = static_cast<int>(vecs.size());
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      pairs.push_back({i, j, cosine_sim(vecs[i], vecs[j])});
  return pairs;
}

}  // namespace

InstanceFeatures::InstanceFeatures(std::vector<std::vector<double>> foreground,
                                   std::vector<std::vector<double>> background)
    : fg_(std::move(foreground)), bg_(std::move(background)) {
  const std::vector<double>* first = nullptr;
  for (const auto* list : {&fg_, &bg_}) {
    for (const auto& v : *list) {
      if (v.empty()) throw std::invalid_argument("InstanceFeatures: empty feature vector");
      if (!first) {
        first = &v;
        dim_ = static_cast<int>(v.size());
      }
      if (static_cast<int>(v.size()) != dim_)
        throw std::invalid_argument("InstanceFeatures: inconsistent feature dimension");
      if (norm(v) < 1e-12)
        throw std::invalid_argument("InstanceFeatures: feature vector norm below 1e-12");
    }
  }
}

double cosine_sim(std::span<const double> f, std::span<const double> g) {
  if (f.size() != g.size())
    throw std::invalid_argument("cosine_sim: dimension mismatch");
  if (f.empty()) throw std::invalid_argument("cosine_sim: empty vectors");
  return dot(f, g) / (norm(f) * norm(g));
}

std::vector<double> rank_weights(const std::vector<double>& sims, double omega) {
  const std::size_t n = sims.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return sims[a] > sims[b]; });

  // competition ranking: rank = number of strictly more similar pairs,
  // so tied groups share the smallest rank of their group
  std::vector<double> weights(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && sims[order[j]] == sims[order[i]]) ++j;
    const double w = std::exp(-omega * static_cast<double>(i));
    for (std::size_t k = i; k < j; ++k) weights[order[k]] = w;
    i = j;
  }
  return weights;
}

ContrastiveLossOutput contrastive_neg_loss(const InstanceFeatures& feat,
                                           const ContrastiveConfig& cfg) {
  ContrastiveLossOutput out;
  out.grad = zero_gradients(feat);
  const int m = feat.foreground_count(), k = feat.background_count();
  if (m < 1 || k < 1) return out;  // inactive

  out.active = true;
  const double eps = cfg.sim_clamp_eps;
  const double scale = 1.0 / (double(m) * double(k));
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < k; ++j) {
      const auto& f = feat.foreground()[i];
      const auto& g = feat.background()[j];
      const double s_raw = cosine_sim(f, g);
      const double s = std::clamp(s_raw, -1.0 + eps, 1.0 - eps);
      out.value += -scale * std::log(1.0 - s);
      if (s_raw > -1.0 + eps && s_raw < 1.0 - eps) {
        const double dval_ds = scale / (1.0 - s);
        accumulate_cosine_grad(f, g, s_raw, dval_ds, out.grad.foreground[i]);
        accumulate_cosine_grad(g, f, s_raw, dval_ds, out.grad.background[j]);
      }
    }
  }
  return out;
}

ContrastiveLossOutput contrastive_pos_loss(const InstanceFeatures& feat,
                                           const ContrastiveConfig& cfg) {
  ContrastiveLossOutput out;
  out.grad = zero_gradients(feat);
  const double eps = cfg.sim_clamp_eps;

  const auto add_component = [&](const std::vector<std::vector<double>>& vecs,
                                 std::vector<std::vector<double>>& grad) {
    const int n = static_cast<int>(vecs.size());
    if (n < 2) return;
    out.active = true;

    const auto pairs = pair_sims(vecs);
    std::vector<double> sims(pairs.size());
    for (std::size_t p = 0; p < pairs.size(); ++p) sims[p] = pairs[p].sim;
    const std::vector<double> weights = rank_weights(sims, cfg.omega);

    // each unordered pair appears in both ordered directions
    const double scale = 2.0 / (double(n) * double(n - 1));
    for (std::size_t p = 0; p < pairs.size(); ++p) {
      const double s_raw = pairs[p].sim;
      const double s = std::clamp(s_raw, eps, 1.0 - eps);
      out.value += -scale * weights[p] * std::log(s);
      if (s_raw > eps && s_raw < 1.0 - eps) {
        // weights constant w.r.t. the gradient; rank() is piecewise constant
        const double dval_ds = -scale * weights[p] / s;
        const auto& f = vecs[pairs[p].i];
        const auto& g = vecs[pairs[p].j];
        accumulate_cosine_grad(f, g, s_raw, dval_ds, grad[pairs[p].i]);
        accumulate_cosine_grad(g, f, s_raw, dval_ds, grad[pairs[p].j]);
      }
    }
  };

  add_component(feat.foreground(), out.grad.foreground);
  add_component(feat.background(), out.grad.background);
  return out;
}

ContrastiveLossOutput contrastive_loss(const InstanceFeatures& feat,
                                       const ContrastiveConfig& cfg) {
  const ContrastiveLossOutput pos = contrastive_pos_loss(feat, cfg);
  const ContrastiveLossOutput neg = contrastive_neg_loss(feat, cfg);
  ContrastiveLossOutput out;
  out.value = pos.value + neg.value;
  out.active = pos.active || neg.active;
  out.grad = pos.grad;
  for (int i = 0; i < feat.foreground_count(); ++i)
    for (int d = 0; d < feat.dim(); ++d) out.grad.foreground[i][d] += neg.grad.foreground[i][d];
  for (int j = 0; j < feat.background_count(); ++j)
    for (int d = 0; d < feat.dim(); ++d) out.grad.background[j][d] += neg.grad.background[j][d];
  return out;
}

LossOutput bce_loss(double p, int target) {
  if (target != 0 && target != 1)
    throw std::invalid_argument("bce_loss: target must be 0 or 1");
  const double eps = kClampEps;
  const double pc = std::clamp(p, eps, 1.0 - eps);
  LossOutput out;
  out.value = -(target * std::log(pc) + (1 - target) * std::log(1.0 - pc));
  double g = 0.0;
  if (p > eps && p < 1.0 - eps) g = (pc - target) / (pc * (1.0 - pc));
  out.grad = {g};
  return out;
}

LossOutput smooth_l1(const std::array<double, 6>& pred, const std::array<double, 6>& target) {
  LossOutput out;
  out.grad.assign(6, 0.0);
  for (int i = 0; i < 6; ++i) {
    const double x = pred[i] - target[i];
    if (std::abs(x) < 1.0) {
      out.value += 0.5 * x * x;
      out.grad[i] = x;
    } else {
      out.value += std::abs(x) - 0.5;
      out.grad[i] = x > 0.0 ? 1.0 : -1.0;
    }
  }
  return out;
}

DetectionLossOutput sup_detection_loss(const std::vector<InstancePrediction>& rpn_preds,
                                       const std::vector<InstanceTarget>& rpn_targets,
                                       const std::vector<InstancePrediction>& roi_preds,
                                       const std::vector<InstanceTarget>& roi_targets) {
  if (rpn_preds.size() != rpn_targets.size() || roi_preds.size() != roi_targets.size())
    throw std::invalid_argument("sup_detection_loss: prediction/target size mismatch");

  DetectionLossOutput out;
  out.rpn.prob.assign(rpn_preds.size(), 0.0);
  out.rpn.offsets.assign(rpn_preds.size(), {});
  out.roi.prob.assign(roi_preds.size(), 0.0);
  out.roi.offsets.assign(roi_preds.size(), {});

  if (rpn_targets.empty() && roi_targets.empty()) {
    std::cerr << "[losses] warning: sup_detection_loss called with empty target sets\n";
    out.active = false;
    return out;
  }

  const auto add_stage = [&](const std::vector<InstancePrediction>& preds,
                             const std::vector<InstanceTarget>& targets,
                             PredictionGradients& grads) {
    for (std::size_t i = 0; i < preds.size(); ++i) {
      if (targets[i].label == TargetLabel::Ignore) continue;
      const int cls = targets[i].label == TargetLabel::Positive ? 1 : 0;
      const LossOutput cls_out = bce_loss(preds[i].prob, cls);
      out.value += cls_out.value;
      grads.prob[i] += cls_out.grad[0];
      if (targets[i].label == TargetLabel::Positive) {
        const LossOutput reg = smooth_l1(preds[i].offsets, targets[i].offsets);
        out.value += reg.value;
        for (int d = 0; d < 6; ++d) grads.offsets[i][d] += reg.grad[d];
      }
    }
  };
  add_stage(rpn_preds, rpn_targets, out.rpn);
  add_stage(roi_preds, roi_targets, out.roi);
  return out;
}

LossOutput we_loss(const std::vector<double>& probs, const WEConfig& cfg) {
  if (!(cfg.tau1 > 0.0 && cfg.tau1 < 1.0 && cfg.tau2 > 0.0 && cfg.tau2 < 1.0 && cfg.tau1 < cfg.tau2))
    throw std::invalid_argument("we_loss: require 0 < tau1 < tau2 < 1");
  if (cfg.gamma < 0.0 || cfg.alpha < 0.0 || cfg.alpha > 1.0)
    throw std::invalid_argument("we_loss: require gamma >= 0 and alpha in [0,1]");

  const double eps = kClampEps;
  LossOutput out;
  out.grad.assign(probs.size(), 0.0);
  out.active = false;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = std::clamp(probs[i], eps, 1.0 - eps);
    const bool clamped = !(probs[i] > eps && probs[i] < 1.0 - eps);
    const double lp = std::log(p);
    if (p < cfg.tau1) {
      out.active = true;
      const double factor = (1.0 - cfg.alpha) * std::pow(p, cfg.gamma);
      out.value += -factor * p * lp;
      if (!clamped) {
        out.grad[i] = cfg.detach_modulating_factor
                          ? -factor * (lp + 1.0)
                          : -(1.0 - cfg.alpha) * std::pow(p, cfg.gamma) *
                                ((cfg.gamma + 1.0) * lp + 1.0);
      }
    } else if (p > cfg.tau2) {
      out.active = true;
      const double factor = cfg.alpha * std::pow(1.0 - p, cfg.gamma);
      out.value += -factor * p * lp;
      if (!clamped) {
        if (cfg.detach_modulating_factor) {
          out.grad[i] = -factor * (lp + 1.0);
        } else {
          const double dfactor =
              cfg.gamma > 0.0 ? -cfg.alpha * cfg.gamma * std::pow(1.0 - p, cfg.gamma - 1.0) : 0.0;
          out.grad[i] = -(dfactor * p * lp + factor * (lp + 1.0));
        }
      }
    }
    // tau1 <= p <= tau2: neglected, contributes exactly 0
  }
  return out;
}

LossOutput student_total_loss(const LossOutput& sup, const LossOutput& unsup, double eta) {
  if (eta < 0.0) throw std::invalid_argument("student_total_loss: eta must be >= 0");
  if (!sup.grad.empty() && !unsup.grad.empty() && sup.grad.size() != unsup.grad.size())
    throw std::invalid_argument("student_total_loss: gradient size mismatch");

  LossOutput out;
  out.value = eta * sup.value + unsup.value;
  out.active = sup.active || unsup.active;
  out.grad.assign(std::max(sup.grad.size(), unsup.grad.size()), 0.0);
  for (std::size_t i = 0; i < sup.grad.size(); ++i) out.grad[i] += eta * sup.grad[i];
  for (std::size_t i = 0; i < unsup.grad.size(); ++i) out.grad[i] += unsup.grad[i];
  return out;
}

}  // namespace supici::losses
