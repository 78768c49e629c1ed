#include <doctest.h>

#include <stdexcept>

#include <cmath>

#include "supici/geom.hpp"
#include "supici/rng.hpp"

using namespace supici;
using geom::Annotation;
using geom::Box3;
using geom::Detection;

namespace {

Box3 cube(double z, double y, double x, double side) {
  return Box3{{z, y, x}, {side, side, side}};
}

// interval-arithmetic IoU, independent of geom::iou3d
double iou_by_intervals(const Box3& a, const Box3& b) {
  const auto overlap = [](double alo, double ahi, double blo, double bhi) {
    return std::max(0.0, std::min(ahi, bhi) - std::max(alo, blo));
  };
  const double inter = overlap(a.lo().z, a.hi().z, b.lo().z, b.hi().z) *
                       overlap(a.lo().y, a.hi().y, b.lo().y, b.hi().y) *
                       overlap(a.lo().x, a.hi().x, b.lo().x, b.hi().x);
  if (inter <= 0) return 0;
  return inter / (a.volume() + b.volume() - inter);
}

}  // namespace

TEST_CASE("iou3d on identical, disjoint, and partially overlapping boxes") {
  const Box3 a = cube(1, 1, 1, 2);
  CHECK(geom::iou3d(a, a) == 1.0);
  CHECK(geom::iou3d(a, cube(10, 10, 10, 2)) == 0.0);

  // side-2 cubes at (1,1,1) and (2,2,2): intersection 1, union 15
  const Box3 b = cube(2, 2, 2, 2);
  CHECK(geom::iou3d(a, b) == doctest::Approx(1.0 / 15.0).epsilon(1e-12));
  CHECK(geom::iou3d(a, b) == geom::iou3d(b, a));
}

TEST_CASE("iou3d matches an independent interval computation on random boxes") {
  rng::Engine eng(21);
  for (int i = 0; i < 200; ++i) {
    const Box3 a{{eng.uniform(0, 10), eng.uniform(0, 10), eng.uniform(0, 10)},
                 {eng.uniform(0.5, 5), eng.uniform(0.5, 5), eng.uniform(0.5, 5)}};
    const Box3 b{{eng.uniform(0, 10), eng.uniform(0, 10), eng.uniform(0, 10)},
                 {eng.uniform(0.5, 5), eng.uniform(0.5, 5), eng.uniform(0.5, 5)}};
    const double iou = geom::iou3d(a, b);
    CHECK(iou == doctest::Approx(iou_by_intervals(a, b)).epsilon(1e-12));
    CHECK(iou >= 0.0);
    CHECK(iou <= 1.0);
  }
}

TEST_CASE("Box3 rejects degenerate extents") {
  CHECK_THROWS_AS(Box3({0, 0, 0}, {0, 1, 1}), std::invalid_argument);
  CHECK_THROWS_AS(Box3({0, 0, 0}, {1, -2, 1}), std::invalid_argument);
  CHECK_THROWS_AS(Box3({0, 0, 0}, {1, 1, std::nan("")}), std::invalid_argument);
}

TEST_CASE("center_hit distance rule, boundary inclusive") {
  const Annotation ann{{10, 10, 10}, 5.0};
  CHECK(geom::center_hit({cube(10, 10, 10, 2), 0.5}, ann));    // zero distance
  CHECK(geom::center_hit({cube(11, 10, 10, 2), 0.5}, ann));    // distance 1
  CHECK(geom::center_hit({cube(10, 10, 15, 2), 0.5}, ann));    // exactly R
  CHECK_FALSE(geom::center_hit({cube(30, 30, 30, 2), 0.5}, ann));
}

TEST_CASE("nms suppression, ordering, and tie-breaking") {
  CHECK(geom::nms({}, 0.5).empty());

  // duplicate boxes: only the higher score survives
  std::vector<Detection> dup{{cube(5, 5, 5, 4), 0.8}, {cube(5, 5, 5, 4), 0.9}};
  const auto kept = geom::nms(dup, 0.5);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].score == 0.9);

  // boxes 1 and 2 overlap above threshold, box 3 is far away
  std::vector<Detection> three{{cube(5, 5, 5, 4), 0.9},
                               {cube(6, 5, 5, 4), 0.8},
                               {cube(50, 50, 50, 4), 0.7}};
  REQUIRE(geom::iou3d(three[0].box, three[1].box) > 0.5);
  const auto out = geom::nms(three, 0.5);
  REQUIRE(out.size() == 2);
  CHECK(out[0].score == 0.9);
  CHECK(out[1].score == 0.7);

  // equal scores break by input index
  std::vector<Detection> tie{{cube(5, 5, 5, 4), 0.8}, {cube(5.5, 5, 5, 4), 0.8}};
  const auto tied = geom::nms(tie, 0.3);
  REQUIRE(tied.size() == 1);
  CHECK(tied[0].box.center.z == 5.0);
}

TEST_CASE("nms output is a subset with pairwise iou below threshold") {
  rng::Engine eng(99);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Detection> dets;
    const int n = eng.uniform_int(0, 10);
    for (int i = 0; i < n; ++i)
      dets.push_back({Box3{{eng.uniform(0, 15), eng.uniform(0, 15), eng.uniform(0, 15)},
                           {eng.uniform(1, 5), eng.uniform(1, 5), eng.uniform(1, 5)}},
                      eng.uniform()});
    const double thr = eng.uniform(0.1, 0.9);
    const auto kept = geom::nms(dets, thr);
    CHECK(kept.size() <= dets.size());
    for (std::size_t i = 0; i < kept.size(); ++i) {
      for (std::size_t j = i + 1; j < kept.size(); ++j)
        CHECK(geom::iou3d(kept[i].box, kept[j].box) < thr);
      bool found = false;
      for (const Detection& d : dets)
        if (d.score == kept[i].score && d.box.center == kept[i].box.center) found = true;
      CHECK(found);
    }
  }
}

TEST_CASE("encode_offsets formula values") {
  const Box3 anchor = cube(0, 0, 0, 8);
  const auto zero = geom::encode_offsets(anchor, anchor);
  for (const double v : zero) CHECK(v == 0.0);

  const auto shifted = geom::encode_offsets(cube(4, 0, 0, 8), anchor);
  CHECK(shifted[0] == doctest::Approx(0.5));
  CHECK(shifted[1] == 0.0);
  CHECK(shifted[2] == 0.0);
  CHECK(shifted[3] == 0.0);

  const auto doubled = geom::encode_offsets(cube(0, 0, 0, 16), anchor);
  CHECK(doubled[3] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(doubled[4] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(doubled[5] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("decode_offsets inverts encode_offsets") {
  const Box3 unit = cube(0, 0, 0, 1);
  const Box3 same = geom::decode_offsets({0, 0, 0, 0, 0, 0}, unit);
  CHECK(same.center == unit.center);
  CHECK(same.size == unit.size);

  const Box3 grown = geom::decode_offsets({0, 0, 0, std::log(2.0), 0, 0}, unit);
  CHECK(grown.size.z == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(grown.size.y == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(grown.size.x == doctest::Approx(1.0).epsilon(1e-12));

  rng::Engine eng(5);
  for (int i = 0; i < 100; ++i) {
    const Box3 gt{{eng.uniform(-20, 20), eng.uniform(-20, 20), eng.uniform(-20, 20)},
                  {eng.uniform(0.5, 12), eng.uniform(0.5, 12), eng.uniform(0.5, 12)}};
    const Box3 anchor{{eng.uniform(-20, 20), eng.uniform(-20, 20), eng.uniform(-20, 20)},
                      {eng.uniform(0.5, 12), eng.uniform(0.5, 12), eng.uniform(0.5, 12)}};
    const Box3 back = geom::decode_offsets(geom::encode_offsets(gt, anchor), anchor);
    CHECK(std::abs(back.center.z - gt.center.z) <= 1e-9);
    CHECK(std::abs(back.center.y - gt.center.y) <= 1e-9);
    CHECK(std::abs(back.center.x - gt.center.x) <= 1e-9);
    CHECK(std::abs(back.size.z - gt.size.z) <= 1e-9);
    CHECK(std::abs(back.size.y - gt.size.y) <= 1e-9);
    CHECK(std::abs(back.size.x - gt.size.x) <= 1e-9);
  }
}

TEST_CASE("decode_offsets clamps runaway sizes") {
  const Box3 decoded = geom::decode_offsets({0, 0, 0, 50.0, 0, 0}, cube(0, 0, 0, 4));
  CHECK(decoded.size.z == geom::kMaxDecodedSize);
}

TEST_CASE("annotation_box is a cube of side 2R") {
  const Box3 b = geom::annotation_box({{3, 4, 5}, 2.5});
  CHECK(b.center.z == 3.0);
  CHECK(b.size.z == 5.0);
  CHECK(b.size.y == 5.0);
  CHECK(b.size.x == 5.0);
}
