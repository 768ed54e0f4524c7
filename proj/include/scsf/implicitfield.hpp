#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <span>
#include <vector>

#include "scsf/densegrid.hpp"
#include "scsf/mlp.hpp"
#include "scsf/tensor.hpp"
#include "scsf/visibility.hpp"

// The semantic-occupancy implicit field: trilinear interpolation over the
// base grid E, an MLP classifier head, training-point sampling, the
// high-resolution cross-entropy loss, and dense rendering.

namespace scsf {

struct ImplicitField {
  DenseGrid base;  // E
  Mlp head;        // base.channels() -> ... -> class count (empty included)

  int class_count() const { return head.out_width(); }
};

struct TrainingSample {
  Eigen::Vector3d point;  // a GT-grid voxel centroid
  int label = 0;          // semantic-or-empty id
};

// Standard 8-corner trilinear weights on the centroid lattice; points outside
// the centroid hull clamp to the nearest face. Differentiable w.r.t. the grid
// features. points is N x 3.
Tensor trilinear_interpolate(const DenseGrid& grid, const MatRM& points);

// Logits over {empty} ∪ classes for a batch of points; batched querying is
// row-wise and identical to per-point querying.
Tensor query_semantic(const ImplicitField& f, const MatRM& points);

// Argmax label with ties broken toward the lowest class id.
int argmax_label(std::span<const double> logits);
int query_label(const ImplicitField& f, const Eigen::Vector3d& p);

// Uniform without-replacement sampling over ALL grid centroids (empty and
// non-empty); deterministic given the seed. n > voxel count samples all.
std::vector<TrainingSample> sample_training_points(const SemanticVoxelGrid& gt, std::int64_t n,
                                                   std::uint64_t seed);

// Mean cross-entropy of query_semantic logits vs labels; optional per-class
// weights (empty span = unweighted).
Tensor scsf_loss(const ImplicitField& f, const std::vector<TrainingSample>& samples,
                 std::span<const double> class_weights = {});

// Per-voxel argmax of centroid queries; voxels the mask labels visible-empty
// are forced to empty. Queries run without tape.
SemanticVoxelGrid render_high_res(const ImplicitField& f, const GridGeometry& out_geom,
                                  const ClassTable& classes,
                                  const VisibilityGrid* mask = nullptr);

}  // namespace scsf
