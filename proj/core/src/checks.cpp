#include "supici/checks.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <set>

#include "supici/adapt.hpp"
#include "supici/data.hpp"
#include "supici/detector.hpp"
#include "supici/froc.hpp"
#include "supici/geom.hpp"
#include "supici/losses.hpp"
#include "supici/rng.hpp"

namespace supici::checks {

namespace {

constexpr double kKernelH = 1e-5;
constexpr double kKernelTol = 1e-4;
constexpr double kModelH = 1e-4;
constexpr double kModelTol = 1e-3;

double rel_err(double fd, double analytic) {
  return std::abs(fd - analytic) / std::max({std::abs(fd), std::abs(analytic), 1e-3});
}

/// Central finite differences of value_fn over every coordinate of x,
/// compared against the analytic gradient; returns the worst relative error.
double fd_worst(const std::function<double()>& value_fn, std::vector<double>& x,
                const std::vector<double>& grad, double h) {
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double fp = value_fn();
    x[i] = saved - h;
    const double fm = value_fn();
    x[i] = saved;
    worst = std::max(worst, rel_err((fp - fm) / (2.0 * h), grad[i]));
  }
  return worst;
}

// ---- kernel instance generators (rejection keeps FD off non-smooth loci) ----

std::vector<std::vector<double>> random_vectors(rng::Engine& eng, int n, int d) {
  std::vector<std::vector<double>> out(n, std::vector<double>(d));
  for (auto& v : out)
    for (double& e : v) e = eng.normal();
  return out;
}

bool sims_well_separated(const std::vector<std::vector<double>>& vecs, double eps) {
  std::vector<double> sims;
  for (std::size_t i = 0; i < vecs.size(); ++i)
    for (std::size_t j = i + 1; j < vecs.size(); ++j)
      sims.push_back(losses::cosine_sim(vecs[i], vecs[j]));
  for (std::size_t a = 0; a < sims.size(); ++a) {
    if (std::abs(sims[a] - eps) < 1e-3 || std::abs(sims[a] - (1.0 - eps)) < 1e-3) return false;
    for (std::size_t b = a + 1; b < sims.size(); ++b)
      if (std::abs(sims[a] - sims[b]) < 2e-3) return false;  // rank tie boundary
  }
  return true;
}

bool cross_sims_ok(const std::vector<std::vector<double>>& fg,
                   const std::vector<std::vector<double>>& bg, double eps) {
  for (const auto& f : fg)
    for (const auto& g : bg) {
      const double s = losses::cosine_sim(f, g);
      if (std::abs(s - (1.0 - eps)) < 1e-3 || std::abs(s - (-1.0 + eps)) < 1e-3) return false;
    }
  return true;
}

struct ContrastiveInstance {
  std::vector<std::vector<double>> fg, bg;
};

ContrastiveInstance gen_contrastive_instance(rng::Engine& eng, int min_fg, int min_bg,
                                             double eps) {
  for (;;) {
    const int d = eng.uniform_int(3, 6);
    const int m = eng.uniform_int(min_fg, min_fg + 2);
    const int k = eng.uniform_int(min_bg, min_bg + 2);
    ContrastiveInstance inst{random_vectors(eng, m, d), random_vectors(eng, k, d)};
    if (sims_well_separated(inst.fg, eps) && sims_well_separated(inst.bg, eps) &&
        cross_sims_ok(inst.fg, inst.bg, eps))
      return inst;
  }
}

std::vector<double> flatten(const ContrastiveInstance& inst) {
  std::vector<double> x;
  for (const auto& v : inst.fg) x.insert(x.end(), v.begin(), v.end());
  for (const auto& v : inst.bg) x.insert(x.end(), v.begin(), v.end());
  return x;
}

losses::InstanceFeatures unflatten(const std::vector<double>& x, int m, int k, int d) {
  std::vector<std::vector<double>> fg(m, std::vector<double>(d)), bg(k, std::vector<double>(d));
  std::size_t p = 0;
  for (auto& v : fg)
    for (double& e : v) e = x[p++];
  for (auto& v : bg)
    for (double& e : v) e = x[p++];
  return losses::InstanceFeatures(std::move(fg), std::move(bg));
}

std::vector<double> flatten_feature_grad(const losses::ContrastiveLossOutput& out) {
  std::vector<double> g;
  for (const auto& v : out.grad.foreground) g.insert(g.end(), v.begin(), v.end());
  for (const auto& v : out.grad.background) g.insert(g.end(), v.begin(), v.end());
  return g;
}

CheckResult contrastive_fd_check(
    const std::string& name, std::uint64_t seed, int instances, int min_fg, int min_bg,
    const std::function<losses::ContrastiveLossOutput(const losses::InstanceFeatures&,
                                                      const losses::ContrastiveConfig&)>& kernel) {
  CheckResult res{name, true, 0.0, instances, ""};
  rng::Engine eng(seed);
  losses::ContrastiveConfig cfg;
  for (int i = 0; i < instances; ++i) {
    const ContrastiveInstance inst = gen_contrastive_instance(eng, min_fg, min_bg,
                                                              cfg.sim_clamp_eps);
    const int m = static_cast<int>(inst.fg.size());
    const int k = static_cast<int>(inst.bg.size());
    const int d = static_cast<int>(inst.fg.empty() ? inst.bg[0].size() : inst.fg[0].size());
    std::vector<double> x = flatten(inst);
    const losses::ContrastiveLossOutput out = kernel(unflatten(x, m, k, d), cfg);
    const std::vector<double> grad = flatten_feature_grad(out);
    const double worst = fd_worst([&] { return kernel(unflatten(x, m, k, d), cfg).value; }, x,
                                  grad, kKernelH);
    res.worst_rel_err = std::max(res.worst_rel_err, worst);
  }
  res.passed = res.worst_rel_err <= kKernelTol;
  return res;
}

CheckResult bce_fd_check(std::uint64_t seed, int instances) {
  CheckResult res{"kernel/bce", true, 0.0, instances, ""};
  rng::Engine eng(seed);
  for (int i = 0; i < instances; ++i) {
    const int target = eng.uniform() < 0.5 ? 0 : 1;
    std::vector<double> x{eng.uniform(0.05, 0.95)};
    const losses::LossOutput out = losses::bce_loss(x[0], target);
    res.worst_rel_err = std::max(
        res.worst_rel_err,
        fd_worst([&] { return losses::bce_loss(x[0], target).value; }, x, out.grad, kKernelH));
  }
  res.passed = res.worst_rel_err <= kKernelTol;
  return res;
}

CheckResult smooth_l1_fd_check(std::uint64_t seed, int instances) {
  CheckResult res{"kernel/smooth_l1", true, 0.0, instances, ""};
  rng::Engine eng(seed);
  for (int i = 0; i < instances; ++i) {
    std::array<double, 6> pred, target;
    for (;;) {
      bool ok = true;
      for (int d = 0; d < 6; ++d) {
        pred[d] = eng.normal() * 1.5;
        target[d] = eng.normal() * 1.5;
        if (std::abs(std::abs(pred[d] - target[d]) - 1.0) < 1e-3) ok = false;
      }
      if (ok) break;
    }
    std::vector<double> x(pred.begin(), pred.end());
    const auto eval = [&] {
      std::array<double, 6> p;
      std::copy_n(x.begin(), 6, p.begin());
      return losses::smooth_l1(p, target);
    };
    const losses::LossOutput out = eval();
    res.worst_rel_err = std::max(res.worst_rel_err,
                                 fd_worst([&] { return eval().value; }, x, out.grad, kKernelH));
  }
  res.passed = res.worst_rel_err <= kKernelTol;
  return res;
}

std::vector<double> gen_we_probs(rng::Engine& eng, const losses::WEConfig& cfg, int n) {
  std::vector<double> probs(n);
  for (double& p : probs) {
    do {
      p = eng.uniform(0.02, 0.98);
    } while (std::abs(p - cfg.tau1) < 1e-3 || std::abs(p - cfg.tau2) < 1e-3);
  }
  return probs;
}

CheckResult we_fd_check(std::uint64_t seed, int instances) {
  CheckResult res{"kernel/we", true, 0.0, instances, ""};
  rng::Engine eng(seed);
  losses::WEConfig cfg;
  for (int i = 0; i < instances; ++i) {
    std::vector<double> x = gen_we_probs(eng, cfg, eng.uniform_int(1, 8));
    const losses::LossOutput out = losses::we_loss(x, cfg);
    res.worst_rel_err = std::max(
        res.worst_rel_err,
        fd_worst([&] { return losses::we_loss(x, cfg).value; }, x, out.grad, kKernelH));
  }
  res.passed = res.worst_rel_err <= kKernelTol;
  return res;
}

// The detached variant holds the modulating factor constant under
// differentiation, so its gradient is checked against the factor-frozen
// objective rather than the raw value.
CheckResult we_detached_fd_check(std::uint64_t seed, int instances) {
  CheckResult res{"kernel/we_detached", true, 0.0, instances, ""};
  rng::Engine eng(seed);
  losses::WEConfig cfg;
  cfg.detach_modulating_factor = true;
  for (int i = 0; i < instances; ++i) {
    std::vector<double> x = gen_we_probs(eng, cfg, eng.uniform_int(1, 8));
    std::vector<double> frozen_factor(x.size(), 0.0);
    for (std::size_t j = 0; j < x.size(); ++j) {
      if (x[j] < cfg.tau1)
        frozen_factor[j] = (1.0 - cfg.alpha) * std::pow(x[j], cfg.gamma);
      else if (x[j] > cfg.tau2)
        frozen_factor[j] = cfg.alpha * std::pow(1.0 - x[j], cfg.gamma);
    }
    const auto frozen_value = [&] {
      double v = 0.0;
      for (std::size_t j = 0; j < x.size(); ++j)
        v += frozen_factor[j] * (-x[j] * std::log(x[j]));
      return v;
    };
    const losses::LossOutput out = losses::we_loss(x, cfg);
    if (std::abs(out.value - frozen_value()) > 1e-12 * std::max(1.0, std::abs(out.value))) {
      res.passed = false;
      res.detail = "detached value mismatch at the base point";
      return res;
    }
    res.worst_rel_err = std::max(res.worst_rel_err, fd_worst(frozen_value, x, out.grad, kKernelH));
  }
  res.passed = res.worst_rel_err <= kKernelTol;
  return res;
}

struct DetectionInstance {
  std::vector<losses::InstancePrediction> rpn_preds, roi_preds;
  std::vector<losses::InstanceTarget> rpn_targets, roi_targets;
};

DetectionInstance gen_detection_instance(rng::Engine& eng) {
  const auto gen_stage = [&](std::vector<losses::InstancePrediction>& preds,
                             std::vector<losses::InstanceTarget>& targets, int n) {
    for (int i = 0; i < n; ++i) {
      losses::InstancePrediction p;
      p.prob = eng.uniform(0.05, 0.95);
      losses::InstanceTarget t;
      const double u = eng.uniform();
      t.label = u < 0.4   ? losses::TargetLabel::Positive
                : u < 0.8 ? losses::TargetLabel::Negative
                          : losses::TargetLabel::Ignore;
      for (int d = 0; d < 6; ++d) {
        do {
          p.offsets[d] = eng.normal();
          t.offsets[d] = eng.normal();
        } while (t.label == losses::TargetLabel::Positive &&
                 std::abs(std::abs(p.offsets[d] - t.offsets[d]) - 1.0) < 1e-3);
      }
      preds.push_back(p);
      targets.push_back(t);
    }
  };
  DetectionInstance inst;
  gen_stage(inst.rpn_preds, inst.rpn_targets, eng.uniform_int(1, 5));
  gen_stage(inst.roi_preds, inst.roi_targets, eng.uniform_int(1, 5));
  bool any = false;
  for (const auto& t : inst.rpn_targets)
    if (t.label != losses::TargetLabel::Ignore) any = true;
  for (const auto& t : inst.roi_targets)
    if (t.label != losses::TargetLabel::Ignore) any = true;
  if (!any) inst.rpn_targets[0].label = losses::TargetLabel::Negative;
  return inst;
}

std::vector<double> flatten_preds(const DetectionInstance& inst) {
  std::vector<double> x;
  for (const auto* stage : {&inst.rpn_preds, &inst.roi_preds})
    for (const auto& p : *stage) {
      x.push_back(p.prob);
      x.insert(x.end(), p.offsets.begin(), p.offsets.end());
    }
  return x;
}

void unflatten_preds(const std::vector<double>& x, DetectionInstance& inst) {
  std::size_t i = 0;
  for (auto* stage : {&inst.rpn_preds, &inst.roi_preds})
    for (auto& p : *stage) {
      p.prob = x[i++];
      for (int d = 0; d < 6; ++d) p.offsets[d] = x[i++];
    }
}

std::vector<double> flatten_detection_grad(const losses::DetectionLossOutput& out) {
  std::vector<double> g;
  for (const auto* stage : {&out.rpn, &out.roi})
    for (std::size_t i = 0; i < stage->prob.size(); ++i) {
      g.push_back(stage->prob[i]);
      g.insert(g.end(), stage->offsets[i].begin(), stage->offsets[i].end());
    }
  return g;
}

CheckResult sup_detection_fd_check(std::uint64_t seed, int instances) {
  CheckResult res{"kernel/sup_detection", true, 0.0, instances, ""};
  rng::Engine eng(seed);
  for (int i = 0; i < instances; ++i) {
    DetectionInstance inst = gen_detection_instance(eng);
    std::vector<double> x = flatten_preds(inst);
    const auto eval = [&] {
      unflatten_preds(x, inst);
      return losses::sup_detection_loss(inst.rpn_preds, inst.rpn_targets, inst.roi_preds,
                                        inst.roi_targets);
    };
    const std::vector<double> grad = flatten_detection_grad(eval());
    res.worst_rel_err =
        std::max(res.worst_rel_err, fd_worst([&] { return eval().value; }, x, grad, kKernelH));
  }
  res.passed = res.worst_rel_err <= kKernelTol;
  return res;
}

// Student total as the composite kernel over predictions: the weighted
// entropy term reads the same RoI probabilities the supervised term does.
CheckResult student_total_fd_check(std::uint64_t seed, int instances) {
  CheckResult res{"kernel/student_total", true, 0.0, instances, ""};
  rng::Engine eng(seed);
  losses::WEConfig we;
  for (int i = 0; i < instances; ++i) {
    DetectionInstance inst = gen_detection_instance(eng);
    for (auto& p : inst.roi_preds) {  // keep RoI probs off the tau thresholds
      while (std::abs(p.prob - we.tau1) < 1e-3 || std::abs(p.prob - we.tau2) < 1e-3)
        p.prob = eng.uniform(0.05, 0.95);
    }
    const double eta = eng.uniform(0.0, 2.0);
    std::vector<double> x = flatten_preds(inst);

    const auto eval = [&]() -> losses::LossOutput {
      unflatten_preds(x, inst);
      const losses::DetectionLossOutput sup = losses::sup_detection_loss(
          inst.rpn_preds, inst.rpn_targets, inst.roi_preds, inst.roi_targets);
      std::vector<double> roi_probs;
      for (const auto& p : inst.roi_preds) roi_probs.push_back(p.prob);
      const losses::LossOutput unsup = losses::we_loss(roi_probs, we);

      // flatten both gradients onto the prediction coordinates
      losses::LossOutput sup_flat{sup.value, flatten_detection_grad(sup), sup.active};
      losses::LossOutput unsup_flat{unsup.value, std::vector<double>(sup_flat.grad.size(), 0.0),
                                    unsup.active};
      const std::size_t roi_base = inst.rpn_preds.size() * 7;
      for (std::size_t r = 0; r < roi_probs.size(); ++r)
        unsup_flat.grad[roi_base + r * 7] = unsup.grad[r];
      return losses::student_total_loss(sup_flat, unsup_flat, eta);
    };
    const losses::LossOutput out = eval();
    res.worst_rel_err =
        std::max(res.worst_rel_err, fd_worst([&] { return eval().value; }, x, out.grad, kKernelH));
  }
  res.passed = res.worst_rel_err <= kKernelTol;
  return res;
}

// ---- detector-level FD ----

VolumeU8 synth_patch(std::uint64_t seed, int side) {
  data::SynthDomainSpec spec;
  spec.volume_side = side;
  spec.nodules_min = 1;
  spec.nodules_max = 2;
  spec.radius_min = 2.0;
  spec.radius_max = side / 4.0 - 0.5;
  spec.base_intensity = 80.0;
  spec.blob_peak = 120.0;
  spec.noise_sigma = 5.0;
  spec.seed = seed;
  return data::gen_synth_scan(spec, 0, "fd").voxels;
}

std::vector<geom::Box3> patch_gt_boxes(std::uint64_t seed, int side) {
  data::SynthDomainSpec spec;
  spec.volume_side = side;
  spec.nodules_min = 1;
  spec.nodules_max = 2;
  spec.radius_min = 2.0;
  spec.radius_max = side / 4.0 - 0.5;
  spec.base_intensity = 80.0;
  spec.blob_peak = 120.0;
  spec.noise_sigma = 5.0;
  spec.seed = seed;
  std::vector<geom::Box3> boxes;
  for (const geom::Annotation& ann : data::gen_synth_scan(spec, 0, "fd").annotations)
    boxes.push_back(geom::annotation_box(ann));
  return boxes;
}

CheckResult detector_fd_check(const std::string& name, const detector::DetectorParams& params,
                              const detector::LossPlan& plan, std::uint64_t seed,
                              int coords_per_layer) {
  CheckResult res{name, true, 0.0, 0, ""};
  const detector::LossGradient lg = detector::loss_gradient(params, plan);
  if (!lg.active) {
    res.passed = false;
    res.detail = "vacuous: loss plan inactive";
    return res;
  }

  rng::Engine eng(seed);
  detector::DetectorParams work = params;
  int refined = 0;
  const auto central_diff = [&](std::size_t idx, double h) {
    const double saved = work.values()[idx];
    work.values()[idx] = saved + h;
    const double fp = detector::eval_loss(work, plan);
    work.values()[idx] = saved - h;
    const double fm = detector::eval_loss(work, plan);
    work.values()[idx] = saved;
    return (fp - fm) / (2.0 * h);
  };
  for (const detector::LayerInfo& layer : detector::shape_manifest()) {
    for (int c = 0; c < coords_per_layer; ++c) {
      const std::size_t idx = layer.offset + eng.uniform_index(layer.size);
      double err = rel_err(central_diff(idx, kModelH), lg.grad[idx]);
      if (err > kModelTol) {
        // the h=1e-4 window straddled a ReLU/clamp kink; a wrong gradient
        // stays wrong at every step size, a kink crossing does not
        err = rel_err(central_diff(idx, 1e-6), lg.grad[idx]);
        ++refined;
      }
      res.worst_rel_err = std::max(res.worst_rel_err, err);
      ++res.cases;
    }
  }
  if (refined > 0) res.detail = std::to_string(refined) + " coords re-verified at h=1e-6";
  res.passed = res.worst_rel_err <= kModelTol;
  return res;
}

}  // namespace

std::vector<CheckResult> kernel_gradient_suite(std::uint64_t seed, int instances) {
  std::vector<CheckResult> results;
  results.push_back(contrastive_fd_check("kernel/contrastive_neg", rng::derive_seed(seed, 1),
                                         instances, 1, 1, losses::contrastive_neg_loss));
  results.push_back(contrastive_fd_check("kernel/contrastive_pos", rng::derive_seed(seed, 2),
                                         instances, 2, 2, losses::contrastive_pos_loss));
  results.push_back(contrastive_fd_check("kernel/contrastive_total", rng::derive_seed(seed, 3),
                                         instances, 2, 2, losses::contrastive_loss));
  results.push_back(bce_fd_check(rng::derive_seed(seed, 4), instances));
  results.push_back(smooth_l1_fd_check(rng::derive_seed(seed, 5), instances));
  results.push_back(sup_detection_fd_check(rng::derive_seed(seed, 6), instances));
  results.push_back(we_fd_check(rng::derive_seed(seed, 7), instances));
  results.push_back(we_detached_fd_check(rng::derive_seed(seed, 8), instances));
  results.push_back(student_total_fd_check(rng::derive_seed(seed, 9), instances));
  return results;
}

std::vector<CheckResult> detector_gradient_suite(std::uint64_t seed, int coords_per_layer) {
  std::vector<CheckResult> results;
  const int side = 16;
  const VolumeU8 patch = synth_patch(rng::derive_seed(seed, 11), side);
  const std::vector<geom::Box3> gt = patch_gt_boxes(rng::derive_seed(seed, 11), side);
  const detector::DetectorParams params =
      detector::DetectorParams::random_init(rng::derive_seed(seed, 12), 1.0);

  // supervised
  {
    detector::PlanOptions opts;
    opts.proposal = {16, 0.1};
    opts.supervise_empty = true;
    detector::LossPlan plan;
    plan.spec = detector::LossSpec::Supervised;
    plan.patches.push_back(detector::build_patch_plan(params, patch, gt, opts));
    results.push_back(detector_fd_check("detector/supervised", params, plan,
                                        rng::derive_seed(seed, 13), coords_per_layer));
  }

  // contrastive: top scores as foreground, bottom as background
  {
    const detector::ForwardResult fwd = detector::forward(params, patch);
    const auto proposals = detector::propose(fwd.rpn, patch, 16, 0.1);
    std::vector<detector::ContrastiveSelection> sel;
    for (std::size_t i = 0; i < proposals.size(); ++i)
      sel.push_back({proposals[i].box, i < std::min<std::size_t>(4, proposals.size() / 2)});
    detector::LossPlan plan;
    plan.spec = detector::LossSpec::Contrastive;
    plan.patches.push_back(
        detector::build_contrastive_patch_plan(patch, sel, fwd.rpn.feature_dims));
    results.push_back(detector_fd_check("detector/contrastive", params, plan,
                                        rng::derive_seed(seed, 14), coords_per_layer));
  }

  // student total: gt boxes as pseudo labels, thresholds tightened so the
  // weighted entropy term is exercised
  {
    detector::PlanOptions opts;
    opts.proposal = {16, 0.1};
    opts.we_instances = true;
    opts.we.tau1 = 0.49;
    opts.we.tau2 = 0.51;
    detector::LossPlan plan;
    plan.spec = detector::LossSpec::StudentTotal;
    plan.eta = 1.0;
    plan.we = opts.we;
    plan.patches.push_back(detector::build_patch_plan(params, patch, gt, opts));
    results.push_back(detector_fd_check("detector/student_total", params, plan,
                                        rng::derive_seed(seed, 15), coords_per_layer));
  }
  return results;
}

namespace {

// independent IoU + NMS used only for cross-checking geom::nms
double iou_oracle(const geom::Box3& a, const geom::Box3& b) {
  double inter = 1.0;
  const double alo[3] = {a.lo().z, a.lo().y, a.lo().x};
  const double ahi[3] = {a.hi().z, a.hi().y, a.hi().x};
  const double blo[3] = {b.lo().z, b.lo().y, b.lo().x};
  const double bhi[3] = {b.hi().z, b.hi().y, b.hi().x};
  for (int d = 0; d < 3; ++d) {
    const double lo = std::max(alo[d], blo[d]);
    const double hi = std::min(ahi[d], bhi[d]);
    if (hi <= lo) return 0.0;
    inter *= hi - lo;
  }
  return inter / (a.volume() + b.volume() - inter);
}

std::vector<geom::Detection> nms_oracle(const std::vector<geom::Detection>& dets, double thr) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
    return a < b;
  });
  std::vector<geom::Detection> kept;
  for (const std::size_t i : order) {
    bool ok = true;
    for (const geom::Detection& k : kept)
      if (iou_oracle(dets[i].box, k.box) >= thr) ok = false;
    if (ok) kept.push_back(dets[i]);
  }
  return kept;
}

geom::Box3 random_box(rng::Engine& eng) {
  return geom::Box3{{eng.uniform(0, 20), eng.uniform(0, 20), eng.uniform(0, 20)},
                    {eng.uniform(0.5, 6), eng.uniform(0.5, 6), eng.uniform(0.5, 6)}};
}

CheckResult check_ema(std::uint64_t seed) {
  CheckResult res{"invariant/ema_convexity_fixed_point", true, 0.0, 0, ""};
  rng::Engine eng(seed);
  for (int trial = 0; trial < 50 && res.passed; ++trial) {
    adapt::TeacherStudent base;
    for (auto& v : base.teacher.values()) v = eng.normal();
    for (auto& v : base.student.values()) v = eng.normal();
    for (int bi = 0; bi <= 10; ++bi) {
      const double beta = bi / 10.0;
      adapt::TeacherStudent ts = base;
      adapt::ema_update(ts, beta);
      for (std::size_t i = 0; i < ts.teacher.values().size(); ++i) {
        const double lo = std::min(base.teacher.values()[i], base.student.values()[i]);
        const double hi = std::max(base.teacher.values()[i], base.student.values()[i]);
        if (ts.teacher.values()[i] < lo - 1e-12 || ts.teacher.values()[i] > hi + 1e-12) {
          res.passed = false;
          res.detail = "convexity violated";
        }
      }
      ++res.cases;
    }
    // fixed point
    adapt::TeacherStudent fixed;
    fixed.teacher = base.student;
    fixed.student = base.student;
    adapt::ema_update(fixed, eng.uniform());
    for (std::size_t i = 0; i < fixed.teacher.values().size(); ++i)
      if (std::abs(fixed.teacher.values()[i] - base.student.values()[i]) >
          1e-12 * std::max(1.0, std::abs(base.student.values()[i]))) {
        res.passed = false;
        res.detail = "fixed point violated";
      }
  }
  return res;
}

CheckResult check_pseudo_antitone(std::uint64_t seed) {
  CheckResult res{"invariant/pseudo_label_delta_antitone", true, 0.0, 0, ""};
  rng::Engine eng(seed);
  for (int trial = 0; trial < 5 && res.passed; ++trial) {
    const VolumeU8 patch = synth_patch(rng::derive_seed(seed, 30 + trial), 32);
    const detector::DetectorParams params =
        detector::DetectorParams::random_init(rng::derive_seed(seed, 40 + trial), 1.0);
    adapt::AdaptConfig cfg;
    cfg.top_n = 32;
    const double deltas[] = {0.2, 0.4, 0.6, 0.8, 0.95};
    std::vector<std::vector<adapt::PseudoNodule>> sets;
    for (const double d : deltas) {
      adapt::AdaptConfig c = cfg;
      c.delta = d;
      sets.push_back(adapt::make_pseudo_labels(params, patch, c));
    }
    for (std::size_t hi = 1; hi < sets.size(); ++hi) {
      for (const adapt::PseudoNodule& p : sets[hi]) {
        bool found = false;
        for (const adapt::PseudoNodule& q : sets[hi - 1])
          if (q.score == p.score && q.box.center == p.box.center) found = true;
        if (!found) {
          res.passed = false;
          res.detail = "subset relation violated";
        }
        if (p.score < deltas[hi]) {
          res.passed = false;
          res.detail = "score below delta";
        }
      }
      ++res.cases;
    }
  }
  (void)eng;
  return res;
}

CheckResult check_we_properties(std::uint64_t seed) {
  CheckResult res{"invariant/we_dead_zone_and_monotonicity", true, 0.0, 0, ""};
  rng::Engine eng(seed);
  losses::WEConfig cfg;
  // dead zone: every prob inside [tau1, tau2] gives exactly zero
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> probs(eng.uniform_int(1, 6));
    for (double& p : probs) p = eng.uniform(cfg.tau1, cfg.tau2);
    const losses::LossOutput out = losses::we_loss(probs, cfg);
    if (out.value != 0.0) {
      res.passed = false;
      res.detail = "dead zone not exactly zero";
    }
    ++res.cases;
  }
  // value is nonnegative everywhere
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> probs(eng.uniform_int(1, 6));
    for (double& p : probs) p = eng.uniform(0.001, 0.999);
    if (losses::we_loss(probs, cfg).value < 0.0) {
      res.passed = false;
      res.detail = "negative value";
    }
    ++res.cases;
  }
  // modulating factor monotonicity on 1000-point grids
  double prev = -1.0;
  for (int i = 0; i < 1000; ++i) {
    const double p = cfg.tau1 * (i + 0.5) / 1000.0;
    const double factor = (1.0 - cfg.alpha) * std::pow(p, cfg.gamma);
    if (factor < prev - 1e-15) {
      res.passed = false;
      res.detail = "low-branch factor not non-decreasing";
    }
    prev = factor;
    ++res.cases;
  }
  prev = 2.0;
  for (int i = 0; i < 1000; ++i) {
    const double p = cfg.tau2 + (1.0 - cfg.tau2) * (i + 0.5) / 1000.0;
    const double factor = cfg.alpha * std::pow(1.0 - p, cfg.gamma);
    if (factor > prev + 1e-15) {
      res.passed = false;
      res.detail = "high-branch factor not non-increasing";
    }
    prev = factor;
    ++res.cases;
  }
  return res;
}

CheckResult check_contrastive_invariances(std::uint64_t seed) {
  CheckResult res{"invariant/contrastive_scale_permutation", true, 0.0, 0, ""};
  rng::Engine eng(seed);
  losses::ContrastiveConfig cfg;
  for (int trial = 0; trial < 50 && res.passed; ++trial) {
    const int d = eng.uniform_int(3, 6);
    std::vector<std::vector<double>> fg = random_vectors(eng, eng.uniform_int(2, 4), d);
    std::vector<std::vector<double>> bg = random_vectors(eng, eng.uniform_int(2, 4), d);
    const double base = losses::contrastive_loss(losses::InstanceFeatures(fg, bg), cfg).value;

    // positive rescaling of a single vector
    const double scales[] = {0.5, 2.0, 10.0, 3.7};
    for (const double c : scales) {
      auto fg2 = fg;
      const std::size_t pick = eng.uniform_index(fg2.size());
      for (double& e : fg2[pick]) e *= c;
      const double scaled = losses::contrastive_loss(losses::InstanceFeatures(fg2, bg), cfg).value;
      if (std::abs(scaled - base) > 1e-9) {
        res.passed = false;
        res.detail = "scale invariance violated";
      }
      ++res.cases;
    }

    // permutation of both lists
    auto fg_p = fg;
    auto bg_p = bg;
    eng.shuffle(fg_p);
    eng.shuffle(bg_p);
    const double permuted =
        losses::contrastive_loss(losses::InstanceFeatures(fg_p, bg_p), cfg).value;
    if (std::abs(permuted - base) > 1e-9) {
      res.passed = false;
      res.detail = "permutation invariance violated";
    }

    // composition is exact
    const losses::InstanceFeatures feat(fg, bg);
    const double total = losses::contrastive_loss(feat, cfg).value;
    const double sum = losses::contrastive_neg_loss(feat, cfg).value +
                       losses::contrastive_pos_loss(feat, cfg).value;
    if (total != sum) {
      res.passed = false;
      res.detail = "pos+neg composition not bit-exact";
    }
    ++res.cases;
  }
  return res;
}

CheckResult check_rank_weights(std::uint64_t seed) {
  CheckResult res{"invariant/rank_weights", true, 0.0, 0, ""};
  rng::Engine eng(seed);
  for (int trial = 0; trial < 100 && res.passed; ++trial) {
    std::vector<double> sims(eng.uniform_int(1, 10));
    for (double& s : sims) s = eng.uniform(-1.0, 1.0);
    const std::vector<double> w = losses::rank_weights(sims, 0.25);
    for (const double x : w)
      if (!(x > 0.0 && x <= 1.0)) {
        res.passed = false;
        res.detail = "weight outside (0,1]";
      }
    for (const double x : losses::rank_weights(sims, 0.0))
      if (x != 1.0) {
        res.passed = false;
        res.detail = "omega=0 must give weight 1";
      }
    // permutation equivariance
    std::vector<std::size_t> perm(sims.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    eng.shuffle(perm);
    std::vector<double> sims_p(sims.size());
    for (std::size_t i = 0; i < sims.size(); ++i) sims_p[i] = sims[perm[i]];
    const std::vector<double> w_p = losses::rank_weights(sims_p, 0.25);
    for (std::size_t i = 0; i < sims.size(); ++i)
      if (w_p[i] != w[perm[i]]) {
        res.passed = false;
        res.detail = "not permutation-equivariant";
      }
    ++res.cases;
  }
  return res;
}

CheckResult check_nms_oracle(std::uint64_t seed) {
  CheckResult res{"invariant/nms_brute_force", true, 0.0, 0, ""};
  rng::Engine eng(seed);
  for (int trial = 0; trial < 200 && res.passed; ++trial) {
    const int n = eng.uniform_int(0, 10);
    std::vector<geom::Detection> dets;
    for (int i = 0; i < n; ++i) dets.push_back({random_box(eng), eng.uniform()});
    const double thr = eng.uniform(0.05, 0.95);

    // keep the comparison off the suppression boundary
    bool near_boundary = false;
    for (int i = 0; i < n && !near_boundary; ++i)
      for (int j = i + 1; j < n; ++j)
        if (std::abs(geom::iou3d(dets[i].box, dets[j].box) - thr) < 1e-9) near_boundary = true;
    if (near_boundary) continue;

    const auto fast = geom::nms(dets, thr);
    const auto slow = nms_oracle(dets, thr);
    if (fast.size() != slow.size()) {
      res.passed = false;
      res.detail = "size mismatch";
    } else {
      for (std::size_t i = 0; i < fast.size(); ++i)
        if (fast[i].score != slow[i].score || !(fast[i].box.center == slow[i].box.center)) {
          res.passed = false;
          res.detail = "element mismatch";
        }
    }
    // retained pairs stay below the threshold
    for (std::size_t i = 0; i < fast.size(); ++i)
      for (std::size_t j = i + 1; j < fast.size(); ++j)
        if (geom::iou3d(fast[i].box, fast[j].box) >= thr) {
          res.passed = false;
          res.detail = "retained pair above threshold";
        }
    ++res.cases;
  }
  return res;
}

CheckResult check_hit_translation(std::uint64_t seed) {
  CheckResult res{"invariant/hit_translation_invariance", true, 0.0, 0, ""};
  rng::Engine eng(seed);
  for (int trial = 0; trial < 200; ++trial) {
    geom::Annotation ann{{eng.uniform(0, 30), eng.uniform(0, 30), eng.uniform(0, 30)},
                         eng.uniform(1.0, 5.0)};
    geom::Detection det{geom::Box3{{ann.center.z + eng.normal() * 3,
                                    ann.center.y + eng.normal() * 3,
                                    ann.center.x + eng.normal() * 3},
                                   {2, 2, 2}},
                        0.5};
    if (std::abs(geom::distance(det.box.center, ann.center) - ann.radius) < 1e-6) continue;
    const geom::Vec3 t{eng.uniform(-50, 50), eng.uniform(-50, 50), eng.uniform(-50, 50)};
    geom::Detection det2 = det;
    det2.box.center = det.box.center + t;
    geom::Annotation ann2 = ann;
    ann2.center = ann.center + t;
    if (geom::center_hit(det, ann) != geom::center_hit(det2, ann2)) {
      res.passed = false;
      res.detail = "translation changed the hit decision";
    }
    ++res.cases;
  }
  return res;
}

CheckResult check_geom_roundtrip(std::uint64_t seed) {
  CheckResult res{"invariant/iou_and_encode_decode", true, 0.0, 0, ""};
  rng::Engine eng(seed);
  for (int trial = 0; trial < 200; ++trial) {
    const geom::Box3 a = random_box(eng), b = random_box(eng);
    const double iab = geom::iou3d(a, b), iba = geom::iou3d(b, a);
    if (iab != iba || iab < 0.0 || iab > 1.0 || geom::iou3d(a, a) != 1.0) {
      res.passed = false;
      res.detail = "iou symmetry/range violated";
    }
    const geom::Box3 dec = geom::decode_offsets(geom::encode_offsets(a, b), b);
    const double err = std::max({std::abs(dec.center.z - a.center.z),
                                 std::abs(dec.center.y - a.center.y),
                                 std::abs(dec.center.x - a.center.x),
                                 std::abs(dec.size.z - a.size.z), std::abs(dec.size.y - a.size.y),
                                 std::abs(dec.size.x - a.size.x)});
    if (err > 1e-9) {
      res.passed = false;
      res.detail = "decode(encode) drifted";
    }
    ++res.cases;
  }
  return res;
}

CheckResult check_froc_oracle(std::uint64_t seed, int instances) {
  CheckResult res{"invariant/froc_brute_force", true, 0.0, 0, ""};
  rng::Engine eng(seed);
  for (int trial = 0; trial < instances; ++trial) {
    std::vector<froc::ScanEval> scans(eng.uniform_int(1, 5));
    bool any_ann = false;
    for (froc::ScanEval& s : scans) {
      const int n_ann = eng.uniform_int(0, 3);
      for (int a = 0; a < n_ann; ++a) {
        s.annotations.push_back({{eng.uniform(0, 30), eng.uniform(0, 30), eng.uniform(0, 30)},
                                 eng.uniform(1.0, 4.0)});
        any_ann = true;
      }
      const int n_det = eng.uniform_int(0, 8);
      for (int d = 0; d < n_det; ++d) {
        geom::Vec3 c{eng.uniform(0, 30), eng.uniform(0, 30), eng.uniform(0, 30)};
        if (!s.annotations.empty() && eng.uniform() < 0.5) {
          const geom::Annotation& ann = s.annotations[eng.uniform_index(s.annotations.size())];
          c = {ann.center.z + eng.normal(), ann.center.y + eng.normal(),
               ann.center.x + eng.normal()};
        }
        double score = eng.uniform();
        if (eng.uniform() < 0.5) score = std::floor(score * 10.0) / 10.0;  // exercise ties
        s.detections.push_back({geom::Box3{c, {3, 3, 3}}, score});
      }
    }
    if (!any_ann) {
      scans[0].annotations.push_back({{15, 15, 15}, 2.0});
    }
    const froc::FrocResult fast = froc::evaluate(scans);
    const froc::FrocResult slow = froc::evaluate_brute_force(scans);
    for (int t = 0; t < 7; ++t)
      if (fast.sensitivities[t] != slow.sensitivities[t]) {
        res.passed = false;
        res.detail = "sensitivity mismatch vs brute force";
      }
    if (fast.average != slow.average) {
      res.passed = false;
      res.detail = "average mismatch vs brute force";
    }
    ++res.cases;
  }
  return res;
}

}  // namespace

std::vector<CheckResult> invariant_suite(std::uint64_t seed) {
  std::vector<CheckResult> results;
  results.push_back(check_ema(rng::derive_seed(seed, 100)));
  results.push_back(check_pseudo_antitone(rng::derive_seed(seed, 101)));
  results.push_back(check_we_properties(rng::derive_seed(seed, 102)));
  results.push_back(check_contrastive_invariances(rng::derive_seed(seed, 103)));
  results.push_back(check_rank_weights(rng::derive_seed(seed, 104)));
  results.push_back(check_nms_oracle(rng::derive_seed(seed, 105)));
  results.push_back(check_hit_translation(rng::derive_seed(seed, 106)));
  results.push_back(check_geom_roundtrip(rng::derive_seed(seed, 107)));
  results.push_back(check_froc_oracle(rng::derive_seed(seed, 108), 50));
  return results;
}

bool all_passed(const std::vector<CheckResult>& results) {
  for (const CheckResult& r : results)
    if (!r.passed) return false;
  return true;
}

}  // namespace supici::checks
