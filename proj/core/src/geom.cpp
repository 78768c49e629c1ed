#include "supici/geom.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace supici::geom {

namespace {

bool positive_finite(double v) { return std::isfinite(v) && v > 0.0; }

double overlap_1d(double lo_a, double hi_a, double lo_b, double hi_b) {
  return std::max(0.0, std::min(hi_a, hi_b) - std::max(lo_a, lo_b));
}

}  // namespace

double distance(const Vec3& a, const Vec3& b) {
  const double dz = a.z - b.z, dy = a.y - b.y, dx = a.x - b.x;
  return std::sqrt(dz * dz + dy * dy + dx * dx);
}

Box3::Box3(Vec3 center_, Vec3 size_) : center(center_), size(size_) {
  if (!positive_finite(size.z) || !positive_finite(size.y) || !positive_finite(size.x))
    throw std::invalid_argument("Box3: extents must be strictly positive and finite");
  if (!std::isfinite(center.z) || !std::isfinite(center.y) || !std::isfinite(center.x))
    throw std::invalid_argument("Box3: center must be finite");
}

double iou3d(const Box3& a, const Box3& b) {
  const Vec3 alo = a.lo(), ahi = a.hi();
  const Vec3 blo = b.lo(), bhi = b.hi();
  const double inter = overlap_1d(alo.z, ahi.z, blo.z, bhi.z) *
                       overlap_1d(alo.y, ahi.y, blo.y, bhi.y) *
                       overlap_1d(alo.x, ahi.x, blo.x, bhi.x);
  if (inter <= 0.0) return 0.0;
  // volumes from the same lo/hi representation as the intersection, so that
  // identical boxes give exactly 1
  const double vol_a = (ahi.z - alo.z) * (ahi.y - alo.y) * (ahi.x - alo.x);
  const double vol_b = (bhi.z - blo.z) * (bhi.y - blo.y) * (bhi.x - blo.x);
  return std::clamp(inter / (vol_a + vol_b - inter), 0.0, 1.0);
}

bool center_hit(const Detection& det, const Annotation& ann) {
  return distance(det.box.center, ann.center) <= ann.radius;
}

std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return dets[a].score > dets[b].score;
  });

  std::vector<Detection> kept;
  for (const std::size_t i : order) {
    bool suppressed = false;
    for (const Detection& k : kept) {
      if (iou3d(dets[i].box, k.box) >= iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(dets[i]);
  }
  return kept;
}

Offsets encode_offsets(const Box3& gt, const Box3& anchor) {
  return {(gt.center.z - anchor.center.z) / anchor.size.z,
          (gt.center.y - anchor.center.y) / anchor.size.y,
          (gt.center.x - anchor.center.x) / anchor.size.x,
          std::log(gt.size.z / anchor.size.z),
          std::log(gt.size.y / anchor.size.y),
          std::log(gt.size.x / anchor.size.x)};
}

Box3 decode_offsets(const Offsets& offsets, const Box3& anchor) {
  const auto decode_size = [](double t, double anchor_extent) {
    return std::min(std::exp(t) * anchor_extent, kMaxDecodedSize);
  };
  return Box3{{anchor.center.z + offsets[0] * anchor.size.z,
               anchor.center.y + offsets[1] * anchor.size.y,
               anchor.center.x + offsets[2] * anchor.size.x},
              {decode_size(offsets[3], anchor.size.z),
               decode_size(offsets[4], anchor.size.y),
               decode_size(offsets[5], anchor.size.x)}};
}

Box3 annotation_box(const Annotation& ann) {
  const double side = 2.0 * ann.radius;
  return Box3{ann.center, {side, side, side}};
}

}  // namespace supici::geom
