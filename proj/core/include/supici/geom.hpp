#pragma once

#include <array>
#include <vector>

namespace supici::geom {

/// Voxel-space coordinates, (z, y, x) order throughout.
struct Vec3 {
  double z = 0.0;
  double y = 0.0;
  double x = 0.0;

  Vec3 operator+(const Vec3& o) const { return {z + o.z, y + o.y, x + o.x}; }
  Vec3 operator-(const Vec3& o) const { return {z - o.z, y - o.y, x - o.x}; }
  bool operator==(const Vec3&) const = default;
};

double distance(const Vec3& a, const Vec3& b);

/// Axis-aligned 3D box: center plus (d, h, w) extents, all extents > 0.
struct Box3 {
  Vec3 center;
  Vec3 size;  // (d, h, w), strictly positive and finite

  Box3() : size{1.0, 1.0, 1.0} {}
  Box3(Vec3 center_, Vec3 size_);

  double volume() const { return size.z * size.y * size.x; }
  Vec3 lo() const { return {center.z - size.z / 2, center.y - size.y / 2, center.x - size.x / 2}; }
  Vec3 hi() const { return {center.z + size.z / 2, center.y + size.y / 2, center.x + size.x / 2}; }
};

/// Ground-truth nodule: center plus radius in voxels.
struct Annotation {
  Vec3 center;
  double radius = 1.0;
};

/// Scored prediction.
struct Detection {
  Box3 box;
  double score = 0.0;  // in [0, 1]
};

/// Intersection volume over union volume; 0 when disjoint, symmetric.
double iou3d(const Box3& a, const Box3& b);

/// True iff the detection center lies within distance R (inclusive) of the
/// annotation center.
bool center_hit(const Detection& det, const Annotation& ann);

/// Greedy score-descending suppression. Retained pairs have iou3d strictly
/// below the threshold; ties in score break by input index. Output is sorted
/// by descending score.
std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold);

/// Box regression offsets: (tz, ty, tx, td, th, tw) with
/// t_center = (gt - anchor) / anchor_size and t_size = ln(gt_size / anchor_size).
using Offsets = std::array<double, 6>;

Offsets encode_offsets(const Box3& gt, const Box3& anchor);

/// Inverse of encode_offsets. Decoded extents are clamped to kMaxDecodedSize
/// so untrained regressors cannot overflow exp().
inline constexpr double kMaxDecodedSize = 1e4;
Box3 decode_offsets(const Offsets& offsets, const Box3& anchor);

/// Cube of side 2R standing in for an annotated nodule during target
/// assignment.
Box3 annotation_box(const Annotation& ann);

}  // namespace supici::geom
