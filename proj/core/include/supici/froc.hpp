#pragma once

#include <array>
#include <filesystem>
#include <vector>

#include "supici/geom.hpp"

namespace supici::froc {

/// False-positive-per-scan operating points the average is taken over.
inline constexpr std::array<double, 7> kFpTargets{0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0};

enum class DetLabel { TruePositive, FalsePositive, Ignored };

struct MatchResult {
  std::vector<DetLabel> labels;  // per detection, input order
  std::vector<bool> ann_hit;     // per annotation
};

/// Greedy matching per scan: detections are processed by descending score
/// (ties by input index); a detection hitting at least one annotation is
/// assigned to the nearest-center unhit one and becomes a true positive, or
/// is ignored when every annotation it hits is already hit. Detections
/// hitting nothing are false positives.
MatchResult match_detections(const std::vector<geom::Detection>& dets,
                             const std::vector<geom::Annotation>& anns);

struct ScanEval {
  std::vector<geom::Detection> detections;
  std::vector<geom::Annotation> annotations;
};

struct CurvePoint {
  double threshold;
  double fp_per_scan;
  double sensitivity;
};

/// Operating points enumerated over distinct scores descending. Throws when
/// there are no scans or no annotations at all.
std::vector<CurvePoint> froc_curve(const std::vector<ScanEval>& scans);

struct FrocResult {
  std::array<double, 7> sensitivities{};
  double average = 0.0;
};

/// Step interpolation: sensitivity at a target f is the maximum sensitivity
/// among curve points with fp_per_scan <= f, or 0 when none qualify.
FrocResult froc_at_points(const std::vector<CurvePoint>& curve);

FrocResult evaluate(const std::vector<ScanEval>& scans);

/// Independent threshold-enumeration oracle for equivalence testing: rebuilds
/// its own matching from scratch at every distinct score threshold instead of
/// reusing the single-pass evaluator above.
std::vector<CurvePoint> froc_curve_brute_force(const std::vector<ScanEval>& scans);
FrocResult evaluate_brute_force(const std::vector<ScanEval>& scans);

/// JSON report with the seven sensitivities, their average, and the curve.
void write_report(const std::filesystem::path& path, const FrocResult& result,
                  const std::vector<CurvePoint>& curve);

}  // namespace supici::froc
