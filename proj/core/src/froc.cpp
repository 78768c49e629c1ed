#include "supici/froc.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace supici::froc {

MatchResult match_detections(const std::vector<geom::Detection>& dets,
                             const std::vector<geom::Annotation>& anns) {
  MatchResult res;
  res.labels.assign(dets.size(), DetLabel::FalsePositive);
  res.ann_hit.assign(anns.size(), false);

  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return dets[a].score > dets[b].score;
  });

  for (const std::size_t di : order) {
    bool hit_any = false;
    int best_ann = -1;
    double best_dist = std::numeric_limits<double>::infinity();
    for (std::size_t ai = 0; ai < anns.size(); ++ai) {
      if (!center_hit(dets[di], anns[ai])) continue;
      hit_any = true;
      if (res.ann_hit[ai]) continue;
      const double dist = geom::distance(dets[di].box.center, anns[ai].center);
      if (dist < best_dist) {
        best_dist = dist;
        best_ann = static_cast<int>(ai);
      }
    }
    if (best_ann >= 0) {
      res.labels[di] = DetLabel::TruePositive;
      res.ann_hit[best_ann] = true;
    } else if (hit_any) {
      // duplicate on an already-hit annotation: neither TP nor FP
      res.labels[di] = DetLabel::Ignored;
    }
  }
  return res;
}

std::vector<CurvePoint> froc_curve(const std::vector<ScanEval>& scans) {
  if (scans.empty()) throw std::invalid_argument("froc_curve: no scans");
  std::size_t total_anns = 0;
  for (const ScanEval& s : scans) total_anns += s.annotations.size();
  if (total_anns == 0)
    throw std::invalid_argument("froc_curve: no annotations, metric undefined");

  // Greedy matching is truncation-consistent: the labels computed over all
  // detections apply unchanged to any score-threshold prefix.
  struct Scored {
    double score;
    DetLabel label;
  };
  std::vector<Scored> all;
  for (const ScanEval& s : scans) {
    const MatchResult m = match_detections(s.detections, s.annotations);
    for (std::size_t i = 0; i < s.detections.size(); ++i)
      all.push_back({s.detections[i].score, m.labels[i]});
  }
  std::sort(all.begin(), all.end(),
            [](const Scored& a, const Scored& b) { return a.score > b.score; });

  std::vector<CurvePoint> curve;
  const double n_scans = static_cast<double>(scans.size());
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < all.size(); ++i) {
    if (all[i].label == DetLabel::TruePositive) ++tp;
    if (all[i].label == DetLabel::FalsePositive) ++fp;
    const bool last_of_threshold = i + 1 == all.size() || all[i + 1].score < all[i].score;
    if (last_of_threshold)
      curve.push_back({all[i].score, fp / n_scans, double(tp) / double(total_anns)});
  }
  if (curve.empty()) curve.push_back({1.0, 0.0, 0.0});  // no detections
  return curve;
}

FrocResult froc_at_points(const std::vector<CurvePoint>& curve) {
  FrocResult res;
  for (std::size_t t = 0; t < kFpTargets.size(); ++t) {
    double best = 0.0;
    for (const CurvePoint& p : curve)
      if (p.fp_per_scan <= kFpTargets[t]) best = std::max(best, p.sensitivity);
    res.sensitivities[t] = best;
  }
  res.average = std::accumulate(res.sensitivities.begin(), res.sensitivities.end(), 0.0) /
                static_cast<double>(kFpTargets.size());
  return res;
}

FrocResult evaluate(const std::vector<ScanEval>& scans) {
  return froc_at_points(froc_curve(scans));
}

std::vector<CurvePoint> froc_curve_brute_force(const std::vector<ScanEval>& scans) {
  if (scans.empty()) throw std::invalid_argument("froc_curve: no scans");
  std::size_t total_anns = 0;
  for (const ScanEval& s : scans) total_anns += s.annotations.size();
  if (total_anns == 0)
    throw std::invalid_argument("froc_curve: no annotations, metric undefined");

  std::vector<double> thresholds;
  for (const ScanEval& s : scans)
    for (const geom::Detection& d : s.detections) thresholds.push_back(d.score);
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  // re-derives the matching per threshold with its own greedy loop
  const auto count_scan = [](const std::vector<geom::Detection>& dets,
                             const std::vector<geom::Annotation>& anns, double threshold,
                             std::size_t& tp, std::size_t& fp) {
    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < dets.size(); ++i)
      if (dets[i].score >= threshold) order.push_back(i);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return dets[a].score > dets[b].score;
    });
    std::vector<bool> hit(anns.size(), false);
    for (const std::size_t di : order) {
      bool inside_any = false;
      int best = -1;
      double best_dist = std::numeric_limits<double>::infinity();
      for (std::size_t ai = 0; ai < anns.size(); ++ai) {
        const double dist = geom::distance(dets[di].box.center, anns[ai].center);
        if (dist > anns[ai].radius) continue;
        inside_any = true;
        if (!hit[ai] && dist < best_dist) {
          best_dist = dist;
          best = static_cast<int>(ai);
        }
      }
      if (best >= 0) {
        hit[best] = true;
        ++tp;
      } else if (!inside_any) {
        ++fp;
      }
    }
  };

  std::vector<CurvePoint> curve;
  for (const double t : thresholds) {
    std::size_t tp = 0, fp = 0;
    for (const ScanEval& s : scans) count_scan(s.detections, s.annotations, t, tp, fp);
    curve.push_back({t, double(fp) / double(scans.size()), double(tp) / double(total_anns)});
  }
  if (curve.empty()) curve.push_back({1.0, 0.0, 0.0});
  return curve;
}

FrocResult evaluate_brute_force(const std::vector<ScanEval>& scans) {
  const std::vector<CurvePoint> curve = froc_curve_brute_force(scans);
  FrocResult res;
  for (std::size_t t = 0; t < kFpTargets.size(); ++t) {
    double best = 0.0;
    for (const CurvePoint& p : curve)
      if (p.fp_per_scan <= kFpTargets[t]) best = std::max(best, p.sensitivity);
    res.sensitivities[t] = best;
  }
  res.average = std::accumulate(res.sensitivities.begin(), res.sensitivities.end(), 0.0) /
                static_cast<double>(kFpTargets.size());
  return res;
}

void write_report(const std::filesystem::path& path, const FrocResult& result,
                  const std::vector<CurvePoint>& curve) {
  nlohmann::json j;
  j["fp_targets"] = kFpTargets;
  j["sensitivities"] = result.sensitivities;
  j["average"] = result.average;
  j["curve"] = nlohmann::json::array();
  for (const CurvePoint& p : curve)
    j["curve"].push_back(
        {{"fp_per_scan", p.fp_per_scan}, {"sensitivity", p.sensitivity}, {"threshold", p.threshold}});
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

}  // namespace supici::froc
