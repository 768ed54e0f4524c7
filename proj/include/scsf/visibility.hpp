#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cstdint>
#include <limits>
#include <vector>

#include "scsf/densegrid.hpp"
#include "scsf/sparse4d.hpp"

// Visibility grids by ray casting from the depth camera: the space between
// the camera and a depth return is visible-empty, the return's voxel is
// surface, everything never touched stays occluded-or-unknown.

namespace scsf {

enum class VisLabel : std::uint8_t {
  kVisibleEmpty = 0,
  kSurface = 1,
  kOccludedUnknown = 2,
};

struct VisibilityGrid {
  GridGeometry geom;
  std::vector<std::uint8_t> labels;  // VisLabel values, one per cell

  static VisibilityGrid unknown(const GridGeometry& geom);
  VisLabel label(int i, int j, int k) const {
    return static_cast<VisLabel>(labels[geom.index(i, j, k)]);
  }
  void set_label(int i, int j, int k, VisLabel v) {
    labels[geom.index(i, j, k)] = static_cast<std::uint8_t>(v);
  }
  std::int64_t count(VisLabel v) const;

  // Persistence reuses the grid file format with a fixed 3-class table;
  // visible-empty maps to the implicit empty class.
  SemanticVoxelGrid to_semantic() const;
  static VisibilityGrid from_semantic(const SemanticVoxelGrid& g);
};

ClassTable visibility_class_table();

// Amanatides-Woo voxel traversal of the segment a->b clipped to the grid
// box. Visits exactly the cells the continuous segment passes through, in
// order from a to b; axis ties break x before y before z.
template <typename Visitor>
void traverse_segment(const GridGeometry& geom, const Eigen::Vector3d& a,
                      const Eigen::Vector3d& b, Visitor&& visit) {
  const Eigen::Vector3d d = b - a;
  const Eigen::Vector3d lo = geom.min_corner();
  const Eigen::Vector3d hi = geom.max_corner();

  double t0 = 0.0, t1 = 1.0;
  for (int axis = 0; axis < 3; ++axis) {
    if (d[axis] == 0.0) {
      if (a[axis] < lo[axis] || a[axis] > hi[axis]) return;
      continue;
    }
    double ta = (lo[axis] - a[axis]) / d[axis];
    double tb = (hi[axis] - a[axis]) / d[axis];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
    if (t0 > t1) return;
  }

  const Eigen::Vector3d start = a + t0 * d;
  int cell[3];
  int step[3];
  double t_max[3], t_delta[3];
  for (int axis = 0; axis < 3; ++axis) {
    const int n = axis == 0 ? geom.nx : (axis == 1 ? geom.ny : geom.nz);
    int c = static_cast<int>(std::floor((start[axis] - lo[axis]) / geom.voxel_size));
    cell[axis] = std::clamp(c, 0, n - 1);
    if (d[axis] > 0) {
      step[axis] = 1;
      t_max[axis] = (lo[axis] + (cell[axis] + 1) * geom.voxel_size - a[axis]) / d[axis];
      t_delta[axis] = geom.voxel_size / d[axis];
    } else if (d[axis] < 0) {
      step[axis] = -1;
      t_max[axis] = (lo[axis] + cell[axis] * geom.voxel_size - a[axis]) / d[axis];
      t_delta[axis] = -geom.voxel_size / d[axis];
    } else {
      step[axis] = 0;
      t_max[axis] = std::numeric_limits<double>::infinity();
      t_delta[axis] = std::numeric_limits<double>::infinity();
    }
  }

  while (true) {
    visit(cell[0], cell[1], cell[2]);
    int axis = 0;
    if (t_max[1] < t_max[axis]) axis = 1;
    if (t_max[2] < t_max[axis]) axis = 2;
    if (t_max[axis] > t1) return;
    cell[axis] += step[axis];
    const int n = axis == 0 ? geom.nx : (axis == 1 ? geom.ny : geom.nz);
    if (cell[axis] < 0 || cell[axis] >= n) return;
    t_max[axis] += t_delta[axis];
  }
}

// Casts one ray per depth point from the camera center (pose translation).
// Traversed voxels become visible-empty, the voxel containing the point
// becomes surface (surface wins conflicts), everything else stays
// occluded-or-unknown. Points coincident with the camera are skipped and
// counted into *skipped when given.
VisibilityGrid compute_visibility_grid(const PointCloudFrame& frame, const Pose& pose,
                                       const GridGeometry& geom, int* skipped = nullptr);

// visible-empty if visible-empty in any frame and never surface in the
// latest; surface of the latest frame dominates; else occluded-or-unknown.
VisibilityGrid merge_visibility(const std::vector<VisibilityGrid>& per_frame);

}  // namespace scsf
