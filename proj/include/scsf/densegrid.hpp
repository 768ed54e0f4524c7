#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "scsf/sparse4d.hpp"
#include "scsf/tensor.hpp"

// Dense 3D feature volumes and the decoder primitives: sparse-to-dense
// filling, dilated convolution, and transposed up-convolution.

namespace scsf {

struct GridGeometry {
  int nx = 0, ny = 0, nz = 0;
  double voxel_size = 0;
  Eigen::Vector3d origin = Eigen::Vector3d::Zero();

  std::int64_t cell_count() const { return static_cast<std::int64_t>(nx) * ny * nz; }
  std::int64_t index(int i, int j, int k) const {
    return (static_cast<std::int64_t>(i) * ny + j) * nz + k;
  }
  bool contains(int i, int j, int k) const {
    return i >= 0 && i < nx && j >= 0 && j < ny && k >= 0 && k < nz;
  }
  // World position of voxel (i,j,k) centroid = origin + (i+1/2, ...) * size.
  Eigen::Vector3d centroid(int i, int j, int k) const {
    return origin + Eigen::Vector3d((i + 0.5) * voxel_size, (j + 0.5) * voxel_size,
                                    (k + 0.5) * voxel_size);
  }
  Eigen::Vector3i cell_of(const Eigen::Vector3d& p) const;
  Eigen::Vector3d min_corner() const { return origin; }
  Eigen::Vector3d max_corner() const {
    return origin + Eigen::Vector3d(nx, ny, nz) * voxel_size;
  }
  bool same_as(const GridGeometry& other, double tol = 1e-9) const;
};

struct DenseGrid {
  GridGeometry geom;
  Tensor features;  // cell_count() x D, cells in (i*ny + j)*nz + k order

  int channels() const { return features.extent(1); }
  static DenseGrid zeros(const GridGeometry& geom, int channels);
};

// Class id 0 is reserved for empty space.
struct ClassTable {
  std::vector<std::string> names;  // index == id
  std::vector<bool> movable;

  int count() const { return static_cast<int>(names.size()); }
  int id_of(const std::string& name) const;  // -1 if absent
  bool any_movable() const;
  void validate() const;
  friend bool operator==(const ClassTable&, const ClassTable&) = default;
};

struct SemanticVoxelGrid {
  GridGeometry geom;
  ClassTable classes;
  std::vector<std::uint8_t> labels;  // cell_count() entries

  static SemanticVoxelGrid empty(const GridGeometry& geom, ClassTable classes);
  std::uint8_t label(int i, int j, int k) const { return labels[geom.index(i, j, k)]; }
  void set_label(int i, int j, int k, std::uint8_t v) { labels[geom.index(i, j, k)] = v; }
  std::int64_t occupied_count() const;
  void validate() const;
  bool structurally_equal(const SemanticVoxelGrid& other) const;
};

// ---------------------------------------------------------------------------
// Decoder primitives
// ---------------------------------------------------------------------------

struct FillResult {
  DenseGrid grid;
  int dropped = 0;  // sparse voxels outside the target extents
};

// Writes each single-time-slice sparse voxel's features into the dense cell
// containing its centroid; all other cells are zero. Requires matching voxel
// sizes. Differentiable w.r.t. the sparse features.
FillResult fill_dense(const SparseTensor4D& s, const GridGeometry& target);

// 3x3x3 per-offset weight matrices; offsets row-major over {-1,0,1}^3.
struct ConvWeights3D {
  Tensor weights;  // [27, D_in, D_out]
  Tensor bias;     // [D_out]
  static ConvWeights3D create(int d_in, int d_out, std::mt19937_64& rng);
  int in_channels() const { return weights.extent(1); }
  int out_channels() const { return weights.extent(2); }
};

// Same-extent convolution with zero padding; receptive offset = kernel
// offset * dilation.
DenseGrid dilated_conv3d(const DenseGrid& g, const ConvWeights3D& w, int dilation);

// 2x2x2 transposed convolution with stride 2: extents double, voxel_size
// halves, each input cell scatters into its 2x2x2 output block. Offsets
// row-major over {0,1}^3.
struct UpConvWeights3D {
  Tensor weights;  // [8, D_in, D_out]
  Tensor bias;     // [D_out]
  static UpConvWeights3D create(int d_in, int d_out, std::mt19937_64& rng);
  int in_channels() const { return weights.extent(1); }
  int out_channels() const { return weights.extent(2); }
};

DenseGrid up_conv3d(const DenseGrid& g, const UpConvWeights3D& w);

// ---------------------------------------------------------------------------
// Grid file format: text header (extents, voxel_size, origin, class table)
// followed by the non-empty voxels only, one "x y z label" line each.
// ---------------------------------------------------------------------------

void write_grid(const SemanticVoxelGrid& g, std::ostream& os);
SemanticVoxelGrid read_grid(std::istream& is);
void save_grid(const SemanticVoxelGrid& g, const std::string& path);
SemanticVoxelGrid load_grid(const std::string& path);

}  // namespace scsf
