#include "scsf/implicitfield.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace scsf {

Tensor trilinear_interpolate(const DenseGrid& grid, const MatRM& points) {
  if (points.cols() != 3) throw std::invalid_argument("trilinear_interpolate: points must be Nx3");
  const GridGeometry& geom = grid.geom;
  const int n = static_cast<int>(points.rows());
  const int d = grid.channels();
  const int cells = static_cast<int>(geom.cell_count());

  // Per point, 8 (cell, weight) corner pairs on the centroid lattice.
  std::vector<int> corner_cell(static_cast<std::size_t>(n) * 8);
  std::vector<double> corner_w(static_cast<std::size_t>(n) * 8);
  const int extents[3] = {geom.nx, geom.ny, geom.nz};
  for (int p = 0; p < n; ++p) {
    int lo[3];
    int hi[3];
    double frac[3];
    for (int axis = 0; axis < 3; ++axis) {
      const double u = (points(p, axis) - geom.origin[axis]) / geom.voxel_size - 0.5;
      const int ncells = extents[axis];
      if (ncells == 1) {
        lo[axis] = hi[axis] = 0;
        frac[axis] = 0.0;
      } else if (u <= 0.0) {
        lo[axis] = 0;
        hi[axis] = 1;
        frac[axis] = 0.0;
      } else if (u >= ncells - 1) {
        lo[axis] = ncells - 2;
        hi[axis] = ncells - 1;
        frac[axis] = 1.0;
      } else {
        lo[axis] = static_cast<int>(std::floor(u));
        hi[axis] = lo[axis] + 1;
        frac[axis] = u - lo[axis];
      }
    }
    int corner = 0;
    for (int a = 0; a < 2; ++a) {
      for (int b = 0; b < 2; ++b) {
        for (int c = 0; c < 2; ++c, ++corner) {
          const int i = a ? hi[0] : lo[0];
          const int j = b ? hi[1] : lo[1];
          const int k = c ? hi[2] : lo[2];
          const double w = (a ? frac[0] : 1.0 - frac[0]) * (b ? frac[1] : 1.0 - frac[1]) *
                           (c ? frac[2] : 1.0 - frac[2]);
          corner_cell[static_cast<std::size_t>(p) * 8 + corner] =
              static_cast<int>(geom.index(i, j, k));
          corner_w[static_cast<std::size_t>(p) * 8 + corner] = w;
        }
      }
    }
  }

  Vec out = Vec::Zero(static_cast<std::int64_t>(n) * d);
  {
    MatMap om(out.data(), n, d);
    ConstMatMap fm(grid.features.data(), cells, d);
    for (int p = 0; p < n; ++p) {
      for (int corner = 0; corner < 8; ++corner) {
        const double w = corner_w[static_cast<std::size_t>(p) * 8 + corner];
        if (w == 0.0) continue;
        om.row(p) += w * fm.row(corner_cell[static_cast<std::size_t>(p) * 8 + corner]);
      }
    }
  }

  return make_op({n, d}, std::move(out), {grid.features},
                 [corner_cell = std::move(corner_cell), corner_w = std::move(corner_w), n, d,
                  cells](const Vec& g, const std::vector<Vec*>& pg) {
                   if (!pg[0]) return;
                   ConstMatMap gm(g.data(), n, d);
                   MatMap dfm(pg[0]->data(), cells, d);
                   for (int p = 0; p < n; ++p) {
                     for (int corner = 0; corner < 8; ++corner) {
                       const double w = corner_w[static_cast<std::size_t>(p) * 8 + corner];
                       if (w == 0.0) continue;
                       dfm.row(corner_cell[static_cast<std::size_t>(p) * 8 + corner]) +=
                           w * gm.row(p);
                     }
                   }
                 });
}

Tensor query_semantic(const ImplicitField& f, const MatRM& points) {
  if (f.head.in_width() != f.base.channels()) {
    throw std::invalid_argument("implicit field head width does not match base grid");
  }
  Tensor feats = trilinear_interpolate(f.base, points);
  return f.head.forward(feats);
}

int argmax_label(std::span<const double> logits) {
  int best = 0;
  for (int j = 1; j < static_cast<int>(logits.size()); ++j) {
    if (logits[j] > logits[best]) best = j;  // ties keep the lowest id
  }
  return best;
}

int query_label(const ImplicitField& f, const Eigen::Vector3d& p) {
  NoGradGuard no_grad;
  MatRM pts(1, 3);
  pts.row(0) = p.transpose();
  Tensor logits = query_semantic(f, pts);
  return argmax_label(std::span<const double>(logits.data(), logits.size()));
}

std::vector<TrainingSample> sample_training_points(const SemanticVoxelGrid& gt, std::int64_t n,
                                                   std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("sample_training_points: n must be >= 1");
  const std::int64_t total = gt.geom.cell_count();
  const std::int64_t take = std::min(n, total);

  // Partial Fisher-Yates over all centroids, deterministic in the seed.
  std::vector<std::int64_t> cells(total);
  std::iota(cells.begin(), cells.end(), std::int64_t{0});
  std::mt19937_64 rng(seed);
  for (std::int64_t i = 0; i < take; ++i) {
    std::uniform_int_distribution<std::int64_t> pick(i, total - 1);
    std::swap(cells[i], cells[pick(rng)]);
  }

  std::vector<TrainingSample> samples(take);
  const std::int64_t yz = static_cast<std::int64_t>(gt.geom.ny) * gt.geom.nz;
  for (std::int64_t s = 0; s < take; ++s) {
    const std::int64_t cell = cells[s];
    const int i = static_cast<int>(cell / yz);
    const int j = static_cast<int>((cell / gt.geom.nz) % gt.geom.ny);
    const int k = static_cast<int>(cell % gt.geom.nz);
    samples[s].point = gt.geom.centroid(i, j, k);
    samples[s].label = gt.labels[cell];
  }
  return samples;
}

Tensor scsf_loss(const ImplicitField& f, const std::vector<TrainingSample>& samples,
                 std::span<const double> class_weights) {
  if (samples.empty()) throw std::invalid_argument("scsf_loss: no samples");
  MatRM points(static_cast<int>(samples.size()), 3);
  std::vector<int> labels(samples.size());
  for (size_t i = 0; i < samples.size(); ++i) {
    points.row(static_cast<int>(i)) = samples[i].point.transpose();
    labels[i] = samples[i].label;
  }
  Tensor logits = query_semantic(f, points);
  if (class_weights.empty()) return cross_entropy(logits, labels);
  std::vector<double> sample_weights(samples.size());
  for (size_t i = 0; i < samples.size(); ++i) {
    if (labels[i] >= static_cast<int>(class_weights.size())) {
      throw std::invalid_argument("scsf_loss: class weight missing for label");
    }
    sample_weights[i] = class_weights[labels[i]];
  }
  return cross_entropy(logits, labels, sample_weights);
}

SemanticVoxelGrid render_high_res(const ImplicitField& f, const GridGeometry& out_geom,
                                  const ClassTable& classes, const VisibilityGrid* mask) {
  if (out_geom.voxel_size > f.base.geom.voxel_size * (1.0 + 1e-9)) {
    throw std::invalid_argument("render_high_res: output must not be coarser than the base grid");
  }
  if (classes.count() != f.class_count()) {
    throw std::invalid_argument("render_high_res: class table size != field class count");
  }
  if (mask && !mask->geom.same_as(out_geom)) {
    throw std::invalid_argument("render_high_res: mask geometry mismatch");
  }

  SemanticVoxelGrid out = SemanticVoxelGrid::empty(out_geom, classes);
  const std::int64_t cells = out_geom.cell_count();
  const std::int64_t yz = static_cast<std::int64_t>(out_geom.ny) * out_geom.nz;
  const int c = f.class_count();
  constexpr std::int64_t kChunk = 8192;
  const std::int64_t n_chunks = (cells + kChunk - 1) / kChunk;

#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (std::int64_t chunk = 0; chunk < n_chunks; ++chunk) {
    NoGradGuard no_grad;  // per worker thread
    const std::int64_t begin = chunk * kChunk;
    const std::int64_t end = std::min(begin + kChunk, cells);
    MatRM points(static_cast<int>(end - begin), 3);
    for (std::int64_t cell = begin; cell < end; ++cell) {
      const int i = static_cast<int>(cell / yz);
      const int j = static_cast<int>((cell / out_geom.nz) % out_geom.ny);
      const int k = static_cast<int>(cell % out_geom.nz);
      points.row(static_cast<int>(cell - begin)) = out_geom.centroid(i, j, k).transpose();
    }
    Tensor logits = query_semantic(f, points);
    for (std::int64_t cell = begin; cell < end; ++cell) {
      const double* row = logits.data() + (cell - begin) * c;
      out.labels[cell] = static_cast<std::uint8_t>(argmax_label(std::span<const double>(row, c)));
    }
  }

  if (mask) {
    for (std::int64_t cell = 0; cell < cells; ++cell) {
      if (mask->labels[cell] == static_cast<std::uint8_t>(VisLabel::kVisibleEmpty)) {
        out.labels[cell] = 0;
      }
    }
  }
  return out;
}

}  // namespace scsf
