#include "scsf/metrics.hpp"

#include <algorithm>
#include <climits>
#include <cmath>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "scsf/visibility.hpp"

namespace scsf {

namespace {

void check_geometry(const SemanticVoxelGrid& pred, const SemanticVoxelGrid& gt) {
  if (!pred.geom.same_as(gt.geom)) throw std::invalid_argument("metric: geometry mismatch");
}

}  // namespace

double iou(const SemanticVoxelGrid& pred, const SemanticVoxelGrid& gt) {
  check_geometry(pred, gt);
  std::int64_t inter = 0, uni = 0;
  for (size_t c = 0; c < gt.labels.size(); ++c) {
    const bool p = pred.labels[c] != 0;
    const bool g = gt.labels[c] != 0;
    inter += (p && g);
    uni += (p || g);
  }
  if (uni == 0) return 1.0;  // both empty: vacuous truth
  return static_cast<double>(inter) / static_cast<double>(uni);
}

MetricReport evaluate_grids(const SemanticVoxelGrid& pred, const SemanticVoxelGrid& gt) {
  check_geometry(pred, gt);
  if (!(pred.classes == gt.classes)) throw std::invalid_argument("metric: class table mismatch");

  MetricReport report;
  report.iou = iou(pred, gt);

  const int n_classes = gt.classes.count();
  std::vector<ClassCounts> counts(n_classes);
  for (size_t c = 0; c < gt.labels.size(); ++c) {
    const int p = pred.labels[c];
    const int g = gt.labels[c];
    if (p == g) {
      if (p != 0) counts[p].tp++;
    } else {
      if (p != 0) counts[p].fp++;
      if (g != 0) counts[g].fn++;
    }
  }

  double total = 0.0;
  int kept = 0;
  double movable_total = 0.0;
  int movable_kept = 0;
  double static_total = 0.0;
  int static_kept = 0;
  for (int cls = 1; cls < n_classes; ++cls) {
    const ClassCounts& c = counts[cls];
    const std::int64_t denom = c.tp + c.fp + c.fn;
    if (denom == 0) continue;  // absent from both pred and gt
    const double class_iou = static_cast<double>(c.tp) / static_cast<double>(denom);
    report.per_class_iou[cls] = class_iou;
    report.counts[cls] = c;
    total += class_iou;
    ++kept;
    if (gt.classes.movable[cls]) {
      movable_total += class_iou;
      ++movable_kept;
    } else {
      static_total += class_iou;
      ++static_kept;
    }
  }
  report.miou = kept ? total / kept : 0.0;
  if (gt.classes.any_movable() && movable_kept > 0) {
    report.movable_iou = movable_total / movable_kept;
  }
  if (static_kept > 0) report.static_iou = static_total / static_kept;
  return report;
}

double miou(const SemanticVoxelGrid& pred, const SemanticVoxelGrid& gt) {
  return evaluate_grids(pred, gt).miou;
}

std::pair<std::optional<double>, std::optional<double>> movable_static_iou(
    const SemanticVoxelGrid& pred, const SemanticVoxelGrid& gt) {
  MetricReport r = evaluate_grids(pred, gt);
  return {r.movable_iou, r.static_iou};
}

// ---------------------------------------------------------------------------
// Chamfer distance with a spatial hash grid
// ---------------------------------------------------------------------------

namespace {

struct HashGrid {
  double cell = 1.0;
  Eigen::Vector3d lo = Eigen::Vector3d::Zero();
  Eigen::Vector3i min_cell = Eigen::Vector3i::Zero();
  Eigen::Vector3i max_cell = Eigen::Vector3i::Zero();
  std::unordered_map<std::uint64_t, std::vector<int>> buckets;
  const MatRM* pts = nullptr;

  static std::uint64_t key(int x, int y, int z) {
    auto u = [](int v) { return static_cast<std::uint64_t>(static_cast<std::uint32_t>(v)); };
    return (u(x) << 42) ^ (u(y) << 21) ^ u(z);
  }

  void build(const MatRM& points) {
    pts = &points;
    lo = points.colwise().minCoeff().transpose();
    const Eigen::Vector3d hi = points.colwise().maxCoeff().transpose();
    const double diag = (hi - lo).norm();
    const double target = diag / std::cbrt(static_cast<double>(points.rows()));
    cell = std::max(target, 1e-9);
    min_cell = Eigen::Vector3i::Constant(INT_MAX);
    max_cell = Eigen::Vector3i::Constant(INT_MIN);
    for (int i = 0; i < points.rows(); ++i) {
      const Eigen::Vector3d p = points.row(i).transpose();
      const Eigen::Vector3i c = cell_of(p);
      buckets[key(c.x(), c.y(), c.z())].push_back(i);
      min_cell = min_cell.cwiseMin(c);
      max_cell = max_cell.cwiseMax(c);
    }
  }

  Eigen::Vector3i cell_of(const Eigen::Vector3d& p) const {
    return Eigen::Vector3i(static_cast<int>(std::floor((p.x() - lo.x()) / cell)),
                           static_cast<int>(std::floor((p.y() - lo.y()) / cell)),
                           static_cast<int>(std::floor((p.z() - lo.z()) / cell)));
  }

  // Exact nearest squared distance via expanding Chebyshev rings; a ring at
  // distance r cannot contain anything nearer than (r-1)*cell, and rings past
  // the occupied box cannot contain anything at all.
  double nearest_sq(const Eigen::Vector3d& p) const {
    const Eigen::Vector3i c = cell_of(p);
    int last_ring = 0;
    for (int axis = 0; axis < 3; ++axis) {
      last_ring = std::max(last_ring, std::abs(c[axis] - min_cell[axis]));
      last_ring = std::max(last_ring, std::abs(c[axis] - max_cell[axis]));
    }
    double best = std::numeric_limits<double>::infinity();
    for (int ring = 0; ring <= last_ring; ++ring) {
      const double ring_lower = (ring - 1) * cell;
      if (ring_lower > 0 && ring_lower * ring_lower > best) break;
      for (int dx = -ring; dx <= ring; ++dx) {
        for (int dy = -ring; dy <= ring; ++dy) {
          for (int dz = -ring; dz <= ring; ++dz) {
            if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != ring) continue;
            auto it = buckets.find(key(c.x() + dx, c.y() + dy, c.z() + dz));
            if (it == buckets.end()) continue;
            for (int idx : it->second) {
              best = std::min(best, (pts->row(idx).transpose() - p).squaredNorm());
            }
          }
        }
      }
    }
    return best;
  }
};

double one_way_mean_sq(const MatRM& from, const HashGrid& to) {
  double total = 0.0;
  for (int i = 0; i < from.rows(); ++i) {
    total += to.nearest_sq(from.row(i).transpose());
  }
  return total / static_cast<double>(from.rows());
}

}  // namespace

double chamfer(const MatRM& a, const MatRM& b) {
  if (a.rows() == 0 || b.rows() == 0) throw std::invalid_argument("chamfer: empty point set");
  if (a.cols() != 3 || b.cols() != 3) throw std::invalid_argument("chamfer: points must be Nx3");
  HashGrid ga, gb;
  ga.build(a);
  gb.build(b);
  return one_way_mean_sq(a, gb) + one_way_mean_sq(b, ga);
}

// ---------------------------------------------------------------------------
// Complete-to-partial projection
// ---------------------------------------------------------------------------

PointCloudFrame project_to_partial(const SemanticVoxelGrid& grid, const Pose& pose,
                                   const CameraIntrinsics& intrinsics) {
  if (intrinsics.fx == 0 || intrinsics.fy == 0 || intrinsics.width < 1 || intrinsics.height < 1) {
    throw std::invalid_argument("project_to_partial: degenerate intrinsics");
  }
  const Eigen::Vector3d cam = pose.block<3, 1>(0, 3);
  const Eigen::Matrix3d rot = pose.block<3, 3>(0, 0);
  const GridGeometry& geom = grid.geom;

  // Longest possible in-grid ray.
  const double reach =
      (geom.max_corner() - geom.min_corner()).norm() + (cam - geom.min_corner()).norm() +
      (cam - geom.max_corner()).norm();

  std::vector<Eigen::Vector3d> hits;
  std::vector<double> hit_labels;
  for (int v = 0; v < intrinsics.height; ++v) {
    for (int u = 0; u < intrinsics.width; ++u) {
      Eigen::Vector3d dir_cam((u + 0.5 - intrinsics.cx) / intrinsics.fx,
                              (v + 0.5 - intrinsics.cy) / intrinsics.fy, 1.0);
      const Eigen::Vector3d dir = (rot * dir_cam).normalized();
      const Eigen::Vector3d far = cam + dir * reach;

      int hit_i = -1, hit_j = -1, hit_k = -1;
      traverse_segment(geom, cam, far, [&](int i, int j, int k) {
        if (hit_i >= 0) return;
        if (grid.label(i, j, k) != 0) {
          hit_i = i;
          hit_j = j;
          hit_k = k;
        }
      });
      if (hit_i < 0) continue;

      // Entry depth of the ray into the hit voxel.
      const Eigen::Vector3d lo = geom.origin + Eigen::Vector3d(hit_i, hit_j, hit_k) * geom.voxel_size;
      const Eigen::Vector3d hi = lo + Eigen::Vector3d::Constant(geom.voxel_size);
      double t_entry = 0.0;
      for (int axis = 0; axis < 3; ++axis) {
        if (dir[axis] == 0.0) continue;
        double ta = (lo[axis] - cam[axis]) / dir[axis];
        double tb = (hi[axis] - cam[axis]) / dir[axis];
        if (ta > tb) std::swap(ta, tb);
        t_entry = std::max(t_entry, ta);
      }
      hits.push_back(cam + dir * t_entry);
      hit_labels.push_back(static_cast<double>(grid.label(hit_i, hit_j, hit_k)));
    }
  }

  PointCloudFrame out;
  out.coords.resize(static_cast<int>(hits.size()), 3);
  out.features.resize(static_cast<int>(hits.size()), 1);
  for (size_t i = 0; i < hits.size(); ++i) {
    out.coords.row(static_cast<int>(i)) = hits[i].transpose();
    out.features(static_cast<int>(i), 0) = hit_labels[i];
  }
  return out;
}

void write_report(const MetricReport& report, const ClassTable& classes, std::ostream& os) {
  os << "iou=" << report.iou << '\n';
  os << "miou=" << report.miou << '\n';
  if (report.movable_iou) {
    os << "movable_iou=" << *report.movable_iou << '\n';
  } else {
    os << "movable_iou=absent\n";
  }
  if (report.static_iou) {
    os << "static_iou=" << *report.static_iou << '\n';
  } else {
    os << "static_iou=absent\n";
  }
  if (report.chamfer) os << "chamfer=" << *report.chamfer << '\n';
  for (const auto& [cls, value] : report.per_class_iou) {
    os << "iou." << classes.names[cls] << '=' << value << '\n';
    const ClassCounts& c = report.counts.at(cls);
    os << "counts." << classes.names[cls] << "=tp:" << c.tp << ",fp:" << c.fp << ",fn:" << c.fn
       << '\n';
  }
}

}  // namespace scsf
