#include <doctest.h>

#include <stdexcept>

#include <algorithm>

#include "supici/froc.hpp"
#include "supici/rng.hpp"

using namespace supici;
using froc::DetLabel;
using froc::ScanEval;
using geom::Annotation;
using geom::Box3;
using geom::Detection;

namespace {

Detection det_at(double z, double y, double x, double score) {
  return {Box3{{z, y, x}, {4, 4, 4}}, score};
}

ScanEval random_scan(rng::Engine& eng) {
  ScanEval s;
  const int n_ann = eng.uniform_int(0, 3);
  for (int a = 0; a < n_ann; ++a)
    s.annotations.push_back(
        {{eng.uniform(0, 30), eng.uniform(0, 30), eng.uniform(0, 30)}, eng.uniform(1.0, 4.0)});
  const int n_det = eng.uniform_int(0, 8);
  for (int d = 0; d < n_det; ++d) {
    geom::Vec3 c{eng.uniform(0, 30), eng.uniform(0, 30), eng.uniform(0, 30)};
    if (!s.annotations.empty() && eng.uniform() < 0.5) {
      const Annotation& ann = s.annotations[eng.uniform_index(s.annotations.size())];
      c = {ann.center.z + eng.normal(), ann.center.y + eng.normal(), ann.center.x + eng.normal()};
    }
    double score = eng.uniform();
    if (eng.uniform() < 0.4) score = std::floor(score * 8.0) / 8.0;  // score ties
    s.detections.push_back({Box3{c, {3, 3, 3}}, score});
  }
  return s;
}

}  // namespace

TEST_CASE("match_detections basic and duplicate rules") {
  const std::vector<Annotation> anns{{{10, 10, 10}, 5.0}};

  {
    const auto m = froc::match_detections({det_at(11, 10, 10, 0.9)}, anns);
    CHECK(m.labels[0] == DetLabel::TruePositive);
    CHECK(m.ann_hit[0]);
  }
  {
    // two detections inside R: one TP, one ignored, zero FP
    const auto m =
        froc::match_detections({det_at(11, 10, 10, 0.9), det_at(9, 10, 10, 0.7)}, anns);
    CHECK(m.labels[0] == DetLabel::TruePositive);
    CHECK(m.labels[1] == DetLabel::Ignored);
  }
  {
    // one hit, one miss
    const auto m =
        froc::match_detections({det_at(11, 10, 10, 0.9), det_at(30, 30, 30, 0.8)}, anns);
    CHECK(m.labels[0] == DetLabel::TruePositive);
    CHECK(m.labels[1] == DetLabel::FalsePositive);
  }
  {
    // nearest-center assignment between two overlapping annotations
    const std::vector<Annotation> two{{{10, 10, 10}, 6.0}, {{14, 10, 10}, 6.0}};
    const auto m = froc::match_detections({det_at(13, 10, 10, 0.9)}, two);
    CHECK(m.labels[0] == DetLabel::TruePositive);
    CHECK_FALSE(m.ann_hit[0]);
    CHECK(m.ann_hit[1]);
  }
}

TEST_CASE("froc_curve worked example and edge cases") {
  ScanEval scan;
  scan.annotations = {{{10, 10, 10}, 5.0}};
  scan.detections = {det_at(11, 10, 10, 0.9), det_at(30, 30, 30, 0.8)};

  const auto curve = froc::froc_curve({scan});
  REQUIRE(curve.size() == 2);
  CHECK(curve[0].fp_per_scan == 0.0);
  CHECK(curve[0].sensitivity == 1.0);
  CHECK(curve[1].fp_per_scan == 1.0);
  CHECK(curve[1].sensitivity == 1.0);

  const froc::FrocResult res = froc::froc_at_points(curve);
  for (const double s : res.sensitivities) CHECK(s == 1.0);
  CHECK(res.average == 1.0);

  // no detections: single implicit (0, 0) point
  ScanEval none;
  none.annotations = {{{5, 5, 5}, 2.0}};
  const auto empty_curve = froc::froc_curve({none});
  REQUIRE(empty_curve.size() == 1);
  CHECK(empty_curve[0].fp_per_scan == 0.0);
  CHECK(empty_curve[0].sensitivity == 0.0);
  CHECK(froc::froc_at_points(empty_curve).average == 0.0);

  // zero annotations: undefined metric
  ScanEval no_ann;
  no_ann.detections = {det_at(1, 1, 1, 0.5)};
  CHECK_THROWS_AS(froc::froc_curve({no_ann}), std::invalid_argument);
  CHECK_THROWS_AS(froc::froc_curve({}), std::invalid_argument);
}

TEST_CASE("froc sensitivities are monotone in the FP target and bounded") {
  rng::Engine eng(31);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<ScanEval> scans;
    const int n = eng.uniform_int(1, 5);
    bool any = false;
    for (int i = 0; i < n; ++i) {
      scans.push_back(random_scan(eng));
      any = any || !scans.back().annotations.empty();
    }
    if (!any) scans[0].annotations.push_back({{15, 15, 15}, 2.0});

    const froc::FrocResult res = froc::evaluate(scans);
    for (int t = 1; t < 7; ++t) CHECK(res.sensitivities[t] >= res.sensitivities[t - 1]);
    for (const double s : res.sensitivities) {
      CHECK(s >= 0.0);
      CHECK(s <= 1.0);
    }
  }
}

TEST_CASE("adding a pure FP never raises sensitivity; adding a TP never lowers it") {
  rng::Engine eng(32);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<ScanEval> scans{random_scan(eng)};
    scans[0].annotations.push_back(
        {{eng.uniform(40, 50), eng.uniform(40, 50), eng.uniform(40, 50)}, 2.0});
    const froc::FrocResult base = froc::evaluate(scans);

    auto with_fp = scans;
    with_fp[0].detections.push_back(det_at(100, 100, 100, eng.uniform()));
    const froc::FrocResult fp = froc::evaluate(with_fp);
    for (int t = 0; t < 7; ++t) CHECK(fp.sensitivities[t] <= base.sensitivities[t]);

    // a top-scored detection on an unhit annotation
    auto with_tp = scans;
    const Annotation& extra = with_tp[0].annotations.back();
    with_tp[0].detections.push_back(
        {Box3{extra.center, {3, 3, 3}}, 1.0});
    const froc::FrocResult tp = froc::evaluate(with_tp);
    for (int t = 0; t < 7; ++t) CHECK(tp.sensitivities[t] >= base.sensitivities[t]);
  }
}

TEST_CASE("scan order permutation leaves the result unchanged") {
  rng::Engine eng(33);
  std::vector<ScanEval> scans;
  for (int i = 0; i < 5; ++i) scans.push_back(random_scan(eng));
  scans[0].annotations.push_back({{15, 15, 15}, 2.0});

  const froc::FrocResult a = froc::evaluate(scans);
  std::reverse(scans.begin(), scans.end());
  const froc::FrocResult b = froc::evaluate(scans);
  for (int t = 0; t < 7; ++t) CHECK(a.sensitivities[t] == b.sensitivities[t]);
  CHECK(a.average == b.average);
}

TEST_CASE("fast evaluator equals the brute-force oracle on random instances") {
  rng::Engine eng(34);
  for (int trial = 0; trial < 15; ++trial) {
    std::vector<ScanEval> scans;
    const int n = eng.uniform_int(1, 5);
    bool any = false;
    for (int i = 0; i < n; ++i) {
      scans.push_back(random_scan(eng));
      any = any || !scans.back().annotations.empty();
    }
    if (!any) scans[0].annotations.push_back({{15, 15, 15}, 2.0});

    const froc::FrocResult fast = froc::evaluate(scans);
    const froc::FrocResult slow = froc::evaluate_brute_force(scans);
    for (int t = 0; t < 7; ++t) CHECK(fast.sensitivities[t] == slow.sensitivities[t]);
    CHECK(fast.average == slow.average);
  }
}
