#include "supici/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace supici::config {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& allowed,
                    const std::string& scope) {
  for (const auto& [key, value] : j.items())
    if (!allowed.count(key))
      throw ConfigError("unknown config key '" + (scope.empty() ? key : scope + "." + key) + "'");
}

template <typename T>
void get_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void load_domain(const json& j, const std::string& scope, data::SynthDomainSpec& spec) {
  reject_unknown(j,
                 {"nodules_min", "nodules_max", "radius_min", "radius_max", "base_intensity",
                  "blob_peak", "noise_sigma", "contrast", "edge_sharpness"},
                 scope);
  get_if(j, "nodules_min", spec.nodules_min);
  get_if(j, "nodules_max", spec.nodules_max);
  get_if(j, "radius_min", spec.radius_min);
  get_if(j, "radius_max", spec.radius_max);
  get_if(j, "base_intensity", spec.base_intensity);
  get_if(j, "blob_peak", spec.blob_peak);
  get_if(j, "noise_sigma", spec.noise_sigma);
  get_if(j, "contrast", spec.contrast);
  get_if(j, "edge_sharpness", spec.edge_sharpness);
}

json domain_to_json(const data::SynthDomainSpec& spec) {
  return {{"nodules_min", spec.nodules_min},   {"nodules_max", spec.nodules_max},
          {"radius_min", spec.radius_min},     {"radius_max", spec.radius_max},
          {"base_intensity", spec.base_intensity}, {"blob_peak", spec.blob_peak},
          {"noise_sigma", spec.noise_sigma},   {"contrast", spec.contrast},
          {"edge_sharpness", spec.edge_sharpness}};
}

}  // namespace

detector::TrainConfig RunConfig::train_config() const {
  detector::TrainConfig cfg;
  cfg.epochs = source_epochs;
  cfg.batch_size = adapt.batch_size;
  cfg.lr = adapt.lr;
  cfg.momentum = adapt.momentum;
  cfg.weight_decay = adapt.weight_decay;
  cfg.init_scale = init_scale;
  cfg.patch_side = adapt.patch_side;
  cfg.patch_overlap = adapt.patch_overlap;
  cfg.proposal = {adapt.top_n, adapt.nms_iou};
  cfg.assign = adapt.assign;
  cfg.rpn_neg_base = source_rpn_neg_base;
  cfg.rpn_neg_pos_ratio = source_rpn_neg_pos_ratio;
  cfg.workers = workers;
  return cfg;
}

detector::InferConfig RunConfig::infer_config() const {
  return {adapt.top_n, adapt.nms_iou, eval.max_detections, eval.min_score};
}

void RunConfig::validate() const {
  try {
    adapt.validate();
    source.validate();
    target.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (scans_per_domain < 1) throw ConfigError("data.scans_per_domain must be >= 1");
  if (source_epochs < 0) throw ConfigError("detector.source_epochs must be >= 0");
  if (init_scale <= 0.0) throw ConfigError("detector.init_scale must be > 0");
  if (workers < 1) throw ConfigError("workers must be >= 1");
  if (eval.max_detections < 1) throw ConfigError("eval.max_detections must be >= 1");
  if (eval.min_score < 0.0 || eval.min_score > 1.0)
    throw ConfigError("eval.min_score must be in [0,1]");
  if (source.volume_side != target.volume_side)
    throw ConfigError("data.volume_side is shared by both domains");
}

RunConfig default_config() {
  RunConfig cfg;
  cfg.adapt.workers = cfg.workers;
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("malformed config " + path.string() + ": " + e.what());
  }

  RunConfig cfg;
  try {
    reject_unknown(j, {"seed", "out_dir", "workers", "data", "detector", "adapt", "eval"}, "");
    get_if(j, "seed", cfg.seed);
    get_if(j, "out_dir", cfg.out_dir);
    get_if(j, "workers", cfg.workers);

    if (j.contains("data")) {
      const json& d = j.at("data");
      reject_unknown(d, {"scans_per_domain", "volume_side", "source", "target"}, "data");
      get_if(d, "scans_per_domain", cfg.scans_per_domain);
      int side = cfg.source.volume_side;
      get_if(d, "volume_side", side);
      cfg.source.volume_side = side;
      cfg.target.volume_side = side;
      if (d.contains("source")) load_domain(d.at("source"), "data.source", cfg.source);
      if (d.contains("target")) load_domain(d.at("target"), "data.target", cfg.target);
    }

    if (j.contains("detector")) {
      const json& d = j.at("detector");
      reject_unknown(d,
                     {"lr", "momentum", "weight_decay", "batch_size", "source_epochs",
                      "init_scale", "patch_side", "patch_overlap", "rpn_neg_base",
                      "rpn_neg_pos_ratio"},
                     "detector");
      get_if(d, "lr", cfg.adapt.lr);
      get_if(d, "momentum", cfg.adapt.momentum);
      get_if(d, "weight_decay", cfg.adapt.weight_decay);
      get_if(d, "batch_size", cfg.adapt.batch_size);
      get_if(d, "source_epochs", cfg.source_epochs);
      get_if(d, "init_scale", cfg.init_scale);
      get_if(d, "patch_side", cfg.adapt.patch_side);
      get_if(d, "patch_overlap", cfg.adapt.patch_overlap);
      get_if(d, "rpn_neg_base", cfg.source_rpn_neg_base);
      get_if(d, "rpn_neg_pos_ratio", cfg.source_rpn_neg_pos_ratio);
    }

    if (j.contains("adapt")) {
      const json& a = j.at("adapt");
      reject_unknown(a,
                     {"t_fg", "t_bg", "max_fg", "max_bg", "delta", "beta", "eta", "omega",
                      "sim_clamp_eps", "tau1", "tau2", "gamma", "alpha", "detach_we_factor",
                      "epochs_per_step", "nms_iou", "top_n", "pos_iou", "neg_iou",
                      "rpn_neg_base", "rpn_neg_pos_ratio", "max_grad_norm", "step1_max_grad_norm"},
                     "adapt");
      get_if(a, "t_fg", cfg.adapt.t_fg);
      get_if(a, "t_bg", cfg.adapt.t_bg);
      get_if(a, "max_fg", cfg.adapt.max_fg);
      get_if(a, "max_bg", cfg.adapt.max_bg);
      get_if(a, "delta", cfg.adapt.delta);
      get_if(a, "beta", cfg.adapt.beta);
      get_if(a, "eta", cfg.adapt.eta);
      get_if(a, "omega", cfg.adapt.contrastive.omega);
      get_if(a, "sim_clamp_eps", cfg.adapt.contrastive.sim_clamp_eps);
      get_if(a, "tau1", cfg.adapt.we.tau1);
      get_if(a, "tau2", cfg.adapt.we.tau2);
      get_if(a, "gamma", cfg.adapt.we.gamma);
      get_if(a, "alpha", cfg.adapt.we.alpha);
      get_if(a, "detach_we_factor", cfg.adapt.we.detach_modulating_factor);
      get_if(a, "epochs_per_step", cfg.adapt.epochs_per_step);
      get_if(a, "nms_iou", cfg.adapt.nms_iou);
      get_if(a, "top_n", cfg.adapt.top_n);
      get_if(a, "pos_iou", cfg.adapt.assign.pos_iou);
      get_if(a, "neg_iou", cfg.adapt.assign.neg_iou);
      get_if(a, "rpn_neg_base", cfg.adapt.rpn_neg_base);
      get_if(a, "rpn_neg_pos_ratio", cfg.adapt.rpn_neg_pos_ratio);
      get_if(a, "max_grad_norm", cfg.adapt.max_grad_norm);
      get_if(a, "step1_max_grad_norm", cfg.adapt.step1_max_grad_norm);
    }

    if (j.contains("eval")) {
      const json& e = j.at("eval");
      reject_unknown(e, {"max_detections", "min_score"}, "eval");
      get_if(e, "max_detections", cfg.eval.max_detections);
      get_if(e, "min_score", cfg.eval.min_score);
    }
  } catch (const json::exception& e) {
    throw ConfigError("bad value in config " + path.string() + ": " + e.what());
  }

  cfg.adapt.workers = cfg.workers;
  cfg.validate();
  return cfg;
}

std::string config_snapshot(const RunConfig& cfg) {
  json j;
  j["seed"] = cfg.seed;
  j["out_dir"] = cfg.out_dir;
  j["workers"] = cfg.workers;
  j["data"] = {{"scans_per_domain", cfg.scans_per_domain},
               {"volume_side", cfg.source.volume_side},
               {"source", domain_to_json(cfg.source)},
               {"target", domain_to_json(cfg.target)}};
  j["detector"] = {{"lr", cfg.adapt.lr},
                   {"momentum", cfg.adapt.momentum},
                   {"weight_decay", cfg.adapt.weight_decay},
                   {"batch_size", cfg.adapt.batch_size},
                   {"source_epochs", cfg.source_epochs},
                   {"init_scale", cfg.init_scale},
                   {"patch_side", cfg.adapt.patch_side},
                   {"patch_overlap", cfg.adapt.patch_overlap},
                   {"rpn_neg_base", cfg.source_rpn_neg_base},
                   {"rpn_neg_pos_ratio", cfg.source_rpn_neg_pos_ratio}};
  j["adapt"] = {{"t_fg", cfg.adapt.t_fg},
                {"t_bg", cfg.adapt.t_bg},
                {"max_fg", cfg.adapt.max_fg},
                {"max_bg", cfg.adapt.max_bg},
                {"delta", cfg.adapt.delta},
                {"beta", cfg.adapt.beta},
                {"eta", cfg.adapt.eta},
                {"omega", cfg.adapt.contrastive.omega},
                {"sim_clamp_eps", cfg.adapt.contrastive.sim_clamp_eps},
                {"tau1", cfg.adapt.we.tau1},
                {"tau2", cfg.adapt.we.tau2},
                {"gamma", cfg.adapt.we.gamma},
                {"alpha", cfg.adapt.we.alpha},
                {"detach_we_factor", cfg.adapt.we.detach_modulating_factor},
                {"epochs_per_step", cfg.adapt.epochs_per_step},
                {"nms_iou", cfg.adapt.nms_iou},
                {"top_n", cfg.adapt.top_n},
                {"pos_iou", cfg.adapt.assign.pos_iou},
                {"neg_iou", cfg.adapt.assign.neg_iou},
                {"rpn_neg_base", cfg.adapt.rpn_neg_base},
                {"rpn_neg_pos_ratio", cfg.adapt.rpn_neg_pos_ratio},
                {"max_grad_norm", cfg.adapt.max_grad_norm},
                {"step1_max_grad_norm", cfg.adapt.step1_max_grad_norm}};
  j["eval"] = {{"max_detections", cfg.eval.max_detections}, {"min_score", cfg.eval.min_score}};
  return j.dump(2);
}

const std::vector<KeyDoc>& config_key_docs() {
  // SUP-ICI reference values are the published settings of the method; the
  // shipped configs/reference.json pins all of them.
  static const std::vector<KeyDoc> docs = {
      {"seed", "master seed; every command is reproducible from (config, seed)"},
      {"out_dir", "output directory for datasets, checkpoints, and reports"},
      {"workers", "max threads for per-patch parallel work (deterministic reduction)"},
      {"data.scans_per_domain", "synthetic scans generated per domain"},
      {"data.volume_side", "synthetic scan side length in voxels (shared by both domains)"},
      {"data.source / data.target", "per-domain generator blocks with the keys below"},
      {"  .nodules_min/.nodules_max", "nodule count range per scan"},
      {"  .radius_min/.radius_max", "nodule radius range in voxels"},
      {"  .base_intensity", "background level before noise, in [0,255]"},
      {"  .blob_peak", "nodule amplitude above background"},
      {"  .noise_sigma", "Gaussian noise std before 3x3x3 smoothing"},
      {"  .contrast", "scale applied to the nodule amplitude"},
      {"  .edge_sharpness", "nodule falloff steepness (half amplitude at radius)"},
      {"detector.lr", "SGD learning rate; SUP-ICI reference value 0.0005"},
      {"detector.momentum", "SGD momentum; SUP-ICI reference value 0.9"},
      {"detector.weight_decay", "SGD weight decay; SUP-ICI reference value 0.0001"},
      {"detector.batch_size", "patches per SGD step; SUP-ICI reference value 8"},
      {"detector.source_epochs", "supervised source-training epochs"},
      {"detector.init_scale", "He-init scale for source training"},
      {"detector.patch_side", "training patch side (full-scale runs use 128)"},
      {"detector.patch_overlap", "patch tiling overlap in voxels"},
      {"detector.rpn_neg_base", "sampled negative anchors per patch in the RPN loss (0 = all)"},
      {"detector.rpn_neg_pos_ratio", "negative sample floor as a multiple of positives"},
      {"adapt.t_fg", "RPN auto-label foreground threshold for contrastive instances"},
      {"adapt.t_bg", "RPN auto-label background ceiling for contrastive instances"},
      {"adapt.max_fg", "per-patch cap on foreground instances"},
      {"adapt.max_bg", "per-patch cap on background instances (seeded uniform sample)"},
      {"adapt.delta", "teacher pseudo-label confidence threshold; SUP-ICI reference value 0.7"},
      {"adapt.beta", "EMA rate for the teacher update; SUP-ICI reference value 0.9996"},
      {"adapt.eta", "supervised/unsupervised loss balance; SUP-ICI reference value 1"},
      {"adapt.omega", "rank-weight smoothing for positive contrastive pairs"},
      {"adapt.sim_clamp_eps", "similarity/probability clamp before logs"},
      {"adapt.tau1", "weighted entropy lower confidence threshold"},
      {"adapt.tau2", "weighted entropy upper confidence threshold"},
      {"adapt.gamma", "weighted entropy focusing parameter; SUP-ICI reference value 4"},
      {"adapt.alpha", "weighted entropy class-imbalance weight; SUP-ICI reference value 0.1"},
      {"adapt.detach_we_factor", "hold the WE modulating factor constant in the gradient"},
      {"adapt.epochs_per_step",
       "max training epochs per adaptation step; SUP-ICI reference value 100"},
      {"adapt.nms_iou", "IoU threshold for proposal and inference NMS"},
      {"adapt.top_n", "proposals kept per patch after NMS"},
      {"adapt.pos_iou", "target-assignment positive IoU threshold"},
      {"adapt.neg_iou", "target-assignment negative IoU ceiling"},
      {"adapt.rpn_neg_base", "sampled negative anchors per patch during adaptation (0 = all)"},
      {"adapt.rpn_neg_pos_ratio", "adaptation negative sample floor as a multiple of positives"},
      {"adapt.max_grad_norm", "L2 clip applied to step-2 batch gradients (0 = off)"},
      {"adapt.step1_max_grad_norm", "L2 clip applied to step-1 batch gradients (0 = off)"},
      {"eval.max_detections", "detections kept per scan at inference"},
      {"eval.min_score", "score floor for emitted detections"},
  };
  return docs;
}

std::string render_key_docs() {
  std::ostringstream out;
  out << "Configuration keys (see configs/reference.json for the reference profile):\n";
  for (const KeyDoc& d : config_key_docs()) {
    out << "  " << d.key;
    for (std::size_t i = d.key.size(); i < 28; ++i) out << ' ';
    out << ' ' << d.text << "\n";
  }
  return out.str();
}

}  // namespace supici::config
