#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>

#include "scsf/densegrid.hpp"
#include "scsf/sparse4d.hpp"

// Evaluation suite: occupancy IoU, per-class mIoU, movable/static IoU,
// squared Chamfer distance, and complete-to-partial projection.

namespace scsf {

struct ClassCounts {
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t fn = 0;
};

struct MetricReport {
  double iou = 0.0;
  std::map<int, double> per_class_iou;  // classes present in gt or pred
  double miou = 0.0;
  std::optional<double> movable_iou;
  std::optional<double> static_iou;
  std::optional<double> chamfer;  // square meters, filled by point-level eval
  std::map<int, ClassCounts> counts;
};

// Occupancy IoU (non-empty as occupied); both-empty is defined as 1.
double iou(const SemanticVoxelGrid& pred, const SemanticVoxelGrid& gt);

// Per-class IoU over semantic labels (empty excluded), mean over classes
// present in gt or pred; absent classes are skipped.
MetricReport evaluate_grids(const SemanticVoxelGrid& pred, const SemanticVoxelGrid& gt);

double miou(const SemanticVoxelGrid& pred, const SemanticVoxelGrid& gt);
std::pair<std::optional<double>, std::optional<double>> movable_static_iou(
    const SemanticVoxelGrid& pred, const SemanticVoxelGrid& gt);

// Symmetric mean squared nearest-neighbor distance (square meters); point
// sets are row-major N x 3. Uses a spatial hash grid internally.
double chamfer(const MatRM& a, const MatRM& b);

// Casts one ray per image pixel; the first occupied voxel hit yields a point
// at the ray-voxel entry depth with the voxel label as its single feature.
// Pixels that hit nothing yield no point.
PointCloudFrame project_to_partial(const SemanticVoxelGrid& grid, const Pose& pose,
                                   const CameraIntrinsics& intrinsics);

// Line-oriented key=value form of a report.
void write_report(const MetricReport& report, const ClassTable& classes, std::ostream& os);

}  // namespace scsf
