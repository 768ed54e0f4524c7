#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <iosfwd>
#include <vector>

#include "scsf/tensor.hpp"

// Coordinate-hashed 4D sparse tensors over an (x,y,z,t) integer lattice,
// point-cloud voxelization, and generalized sparse convolution with stride.
//
// Coordinates always live on the finest lattice of the tensor's origin; a
// stride-s convolution leaves them on that lattice as multiples of the new
// cumulative stride, so voxel_size / spatial_stride is invariant through the
// scale ladder.

namespace scsf {

struct CameraIntrinsics {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;
};

// Rigid camera-to-world transform.
using Pose = Eigen::Matrix4d;

struct PointCloudFrame {
  MatRM coords;    // N x 3, meters
  MatRM features;  // N x C
  std::int64_t timestamp = 0;

  int count() const { return static_cast<int>(coords.rows()); }
  int channels() const { return static_cast<int>(features.cols()); }
  void validate() const;  // N >= 1, finite coords, aligned feature rows
};

struct Sequence {
  std::vector<PointCloudFrame> frames;
  std::vector<Pose> poses;  // camera-to-world, one per frame
  CameraIntrinsics intrinsics;

  int length() const { return static_cast<int>(frames.size()); }
  void validate() const;  // L >= 1, strictly increasing timestamps
};

struct Coord4 {
  int x = 0, y = 0, z = 0, t = 0;
  friend bool operator==(const Coord4&, const Coord4&) = default;
};

// Lexicographic (x, y, z, t); the canonical storage order.
bool coord_less(const Coord4& a, const Coord4& b);

struct Coord4Hash {
  std::size_t operator()(const Coord4& c) const;
};

struct SparseTensor4D {
  std::vector<Coord4> coords;  // unique, lexicographically sorted
  Tensor features;             // M x D
  double voxel_size = 0;       // meters, current cell size
  int spatial_stride = 1;
  int temporal_stride = 1;
  Eigen::Vector3d origin = Eigen::Vector3d::Zero();

  int count() const { return static_cast<int>(coords.size()); }
  int channels() const { return features.extent(1); }
  double base_cell_size() const { return voxel_size / spatial_stride; }
  Eigen::Vector3d voxel_center(const Coord4& c) const;
  void validate() const;  // unique coords, row alignment, stride multiples
};

// Voxel index = floor((p - origin) / voxel_size) per axis plus the frame
// timestamp; features of points sharing a voxel are averaged. Aggregation
// order is canonicalized so the result is invariant to point order.
SparseTensor4D voxelize(const Sequence& seq, double voxel_size, const Eigen::Vector3d& origin);

struct KernelExtents {
  int kx = 1, ky = 1, kz = 1, kt = 1;
  int offset_count() const { return kx * ky * kz * kt; }
};

struct Stride4 {
  int x = 1, y = 1, z = 1, t = 1;
};

// Offset k covers extents in row-major (x, y, z, t) order; odd extents are
// centered, even extents span {0 .. e-1} input steps.
std::vector<std::array<int, 4>> kernel_offsets(const KernelExtents& extents);

struct KernelWeights4D {
  KernelExtents extents;
  Tensor weights;  // [K, D_in, D_out], one matrix per kernel offset
  Tensor bias;     // [D_out]

  int in_channels() const { return weights.extent(1); }
  int out_channels() const { return weights.extent(2); }

  // He-style init scaled by fan-in over the whole footprint.
  static KernelWeights4D create(const KernelExtents& extents, int d_in, int d_out,
                                std::mt19937_64& rng);
};

struct KernelMapEntry {
  int input_row = 0;
  int output_row = 0;
  int offset_index = 0;
};

struct KernelMap {
  std::vector<Coord4> out_coords;        // sorted; finest-lattice coordinates
  std::vector<KernelMapEntry> entries;   // sorted by (offset, output, input)
  int out_spatial_stride = 1;
  int out_temporal_stride = 1;
};

// Output sites are exactly the strided lattice positions with at least one
// contributing input inside the kernel footprint (generalized convolution).
KernelMap build_kernel_map(const SparseTensor4D& in, const KernelExtents& extents,
                           const Stride4& stride);

// out[c_out] = bias + sum over the kernel map of W[offset] . in[c_in];
// differentiable w.r.t. weights, bias, and input features. Spatial stride
// must be isotropic; output voxel_size = input voxel_size * spatial stride.
SparseTensor4D sparse_conv(const SparseTensor4D& in, const KernelWeights4D& kernel,
                           const Stride4& stride);

// Mean-pools voxels sharing (x,y,z) across time into a single t=0 slice.
SparseTensor4D temporal_collapse(const SparseTensor4D& in);

// Debug/eval dump: lines "x y z t f0 f1 ...", lexicographic coordinate order.
void dump_sparse_text(const SparseTensor4D& s, std::ostream& os);

}  // namespace scsf
