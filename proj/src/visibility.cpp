#include "scsf/visibility.hpp"

#include <stdexcept>

namespace scsf {

VisibilityGrid VisibilityGrid::unknown(const GridGeometry& geom) {
  VisibilityGrid g;
  g.geom = geom;
  g.labels.assign(geom.cell_count(), static_cast<std::uint8_t>(VisLabel::kOccludedUnknown));
  return g;
}

std::int64_t VisibilityGrid::count(VisLabel v) const {
  std::int64_t n = 0;
  for (std::uint8_t l : labels) n += (l == static_cast<std::uint8_t>(v));
  return n;
}

ClassTable visibility_class_table() {
  ClassTable t;
  t.names = {"visible-empty", "surface", "occluded-or-unknown"};
  t.movable = {false, false, false};
  return t;
}

SemanticVoxelGrid VisibilityGrid::to_semantic() const {
  SemanticVoxelGrid g;
  g.geom = geom;
  g.classes = visibility_class_table();
  g.labels = labels;
  return g;
}

VisibilityGrid VisibilityGrid::from_semantic(const SemanticVoxelGrid& g) {
  if (!(g.classes == visibility_class_table())) {
    throw std::invalid_argument("not a visibility grid class table");
  }
  VisibilityGrid v;
  v.geom = g.geom;
  v.labels = g.labels;
  return v;
}

VisibilityGrid compute_visibility_grid(const PointCloudFrame& frame, const Pose& pose,
                                       const GridGeometry& geom, int* skipped) {
  // An empty frame is allowed here and yields an all-unknown grid.
  if (frame.count() > 0) frame.validate();
  VisibilityGrid grid = VisibilityGrid::unknown(geom);
  if (skipped) *skipped = 0;
  const Eigen::Vector3d cam = pose.block<3, 1>(0, 3);
  int skipped_count = 0;

  for (int i = 0; i < frame.count(); ++i) {
    const Eigen::Vector3d p = frame.coords.row(i).transpose();
    if ((p - cam).squaredNorm() < 1e-24) {
      ++skipped_count;
      continue;
    }
    const Eigen::Vector3i pc = geom.cell_of(p);
    const bool point_inside = geom.contains(pc.x(), pc.y(), pc.z());
    traverse_segment(geom, cam, p, [&](int x, int y, int z) {
      if (point_inside && x == pc.x() && y == pc.y() && z == pc.z()) return;
      std::uint8_t& l = grid.labels[geom.index(x, y, z)];
      if (l != static_cast<std::uint8_t>(VisLabel::kSurface)) {
        l = static_cast<std::uint8_t>(VisLabel::kVisibleEmpty);
      }
    });
    if (point_inside) grid.set_label(pc.x(), pc.y(), pc.z(), VisLabel::kSurface);
  }
  if (skipped) *skipped = skipped_count;
  return grid;
}

VisibilityGrid merge_visibility(const std::vector<VisibilityGrid>& per_frame) {
  if (per_frame.empty()) throw std::invalid_argument("merge_visibility: no grids");
  const GridGeometry& geom = per_frame.front().geom;
  for (const VisibilityGrid& g : per_frame) {
    if (!g.geom.same_as(geom)) throw std::invalid_argument("merge_visibility: geometry mismatch");
  }
  VisibilityGrid out = VisibilityGrid::unknown(geom);
  for (const VisibilityGrid& g : per_frame) {
    for (std::int64_t c = 0; c < geom.cell_count(); ++c) {
      if (g.labels[c] == static_cast<std::uint8_t>(VisLabel::kVisibleEmpty)) {
        out.labels[c] = static_cast<std::uint8_t>(VisLabel::kVisibleEmpty);
      }
    }
  }
  const VisibilityGrid& latest = per_frame.back();
  for (std::int64_t c = 0; c < geom.cell_count(); ++c) {
    if (latest.labels[c] == static_cast<std::uint8_t>(VisLabel::kSurface)) {
      out.labels[c] = static_cast<std::uint8_t>(VisLabel::kSurface);
    }
  }
  return out;
}

}  // namespace scsf
