#include "scsf/densegrid.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace scsf {

Eigen::Vector3i GridGeometry::cell_of(const Eigen::Vector3d& p) const {
  return Eigen::Vector3i(static_cast<int>(std::floor((p.x() - origin.x()) / voxel_size)),
                         static_cast<int>(std::floor((p.y() - origin.y()) / voxel_size)),
                         static_cast<int>(std::floor((p.z() - origin.z()) / voxel_size)));
}

bool GridGeometry::same_as(const GridGeometry& other, double tol) const {
  return nx == other.nx && ny == other.ny && nz == other.nz &&
         std::abs(voxel_size - other.voxel_size) <= tol * std::max(1.0, std::abs(voxel_size)) &&
         (origin - other.origin).cwiseAbs().maxCoeff() <= tol;
}

DenseGrid DenseGrid::zeros(const GridGeometry& geom, int channels) {
  DenseGrid g;
  g.geom = geom;
  g.features = Tensor::zeros({static_cast<int>(geom.cell_count()), channels});
  return g;
}

int ClassTable::id_of(const std::string& name) const {
  for (int i = 0; i < count(); ++i) {
    if (names[i] == name) return i;
  }
  return -1;
}

bool ClassTable::any_movable() const {
  for (size_t i = 1; i < movable.size(); ++i) {
    if (movable[i]) return true;
  }
  return false;
}

void ClassTable::validate() const {
  if (names.empty()) throw std::invalid_argument("class table is empty");
  if (names.size() != movable.size()) throw std::invalid_argument("class table flag misalignment");
  for (const std::string& n : names) {
    if (n.empty() || n.find_first_of(" \t\n") != std::string::npos) {
      throw std::invalid_argument("class names must be non-empty single tokens");
    }
  }
}

SemanticVoxelGrid SemanticVoxelGrid::empty(const GridGeometry& geom, ClassTable classes) {
  classes.validate();
  SemanticVoxelGrid g;
  g.geom = geom;
  g.classes = std::move(classes);
  g.labels.assign(geom.cell_count(), 0);
  return g;
}

std::int64_t SemanticVoxelGrid::occupied_count() const {
  std::int64_t n = 0;
  for (std::uint8_t l : labels) n += (l != 0);
  return n;
}

void SemanticVoxelGrid::validate() const {
  classes.validate();
  if (static_cast<std::int64_t>(labels.size()) != geom.cell_count()) {
    throw std::invalid_argument("label array does not match grid extents");
  }
  for (std::uint8_t l : labels) {
    if (l >= classes.count()) throw std::invalid_argument("label outside class table");
  }
}

bool SemanticVoxelGrid::structurally_equal(const SemanticVoxelGrid& other) const {
  return geom.nx == other.geom.nx && geom.ny == other.geom.ny && geom.nz == other.geom.nz &&
         geom.voxel_size == other.geom.voxel_size && geom.origin == other.geom.origin &&
         classes == other.classes && labels == other.labels;
}

// ---------------------------------------------------------------------------
// fill_dense
// ---------------------------------------------------------------------------

FillResult fill_dense(const SparseTensor4D& s, const GridGeometry& target) {
  if (std::abs(s.voxel_size - target.voxel_size) >
      1e-9 * std::max(1.0, std::abs(target.voxel_size))) {
    throw std::invalid_argument("fill_dense: sparse voxel_size must equal the grid voxel_size");
  }
  for (const Coord4& c : s.coords) {
    if (c.t != 0) throw std::invalid_argument("fill_dense: input must be a single t=0 slice");
  }
  const int d = s.channels();
  const int cells = static_cast<int>(target.cell_count());

  // (dense cell, sparse row); later rows win on (degenerate) collisions.
  std::vector<std::pair<std::int64_t, int>> writes;
  writes.reserve(s.coords.size());
  int dropped = 0;
  for (int row = 0; row < s.count(); ++row) {
    const Eigen::Vector3i cell = target.cell_of(s.voxel_center(s.coords[row]));
    if (!target.contains(cell.x(), cell.y(), cell.z())) {
      ++dropped;
      continue;
    }
    writes.emplace_back(target.index(cell.x(), cell.y(), cell.z()), row);
  }
  std::stable_sort(writes.begin(), writes.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  // Keep the last write per cell.
  std::vector<std::pair<std::int64_t, int>> winners;
  winners.reserve(writes.size());
  for (size_t i = 0; i < writes.size(); ++i) {
    if (i + 1 < writes.size() && writes[i + 1].first == writes[i].first) continue;
    winners.push_back(writes[i]);
  }

  Vec out = Vec::Zero(static_cast<std::int64_t>(cells) * d);
  {
    MatMap om(out.data(), cells, d);
    ConstMatMap im(s.features.data(), s.count(), d);
    for (const auto& [cell, row] : winners) om.row(cell) = im.row(row);
  }

  FillResult result;
  result.dropped = dropped;
  result.grid.geom = target;
  const int n_in = s.count();
  result.grid.features =
      make_op({cells, d}, std::move(out), {s.features},
              [winners = std::move(winners), n_in, cells, d](const Vec& g,
                                                             const std::vector<Vec*>& pg) {
                if (!pg[0]) return;
                ConstMatMap gm(g.data(), cells, d);
                MatMap dim(pg[0]->data(), n_in, d);
                for (const auto& [cell, row] : winners) dim.row(row) += gm.row(cell);
              });
  return result;
}

// ---------------------------------------------------------------------------
// dilated_conv3d / up_conv3d
// ---------------------------------------------------------------------------

ConvWeights3D ConvWeights3D::create(int d_in, int d_out, std::mt19937_64& rng) {
  ConvWeights3D w;
  w.weights = Tensor::randn({27, d_in, d_out}, rng, std::sqrt(2.0 / (27.0 * d_in)), true);
  w.bias = Tensor::zeros({d_out}, true);
  return w;
}

DenseGrid dilated_conv3d(const DenseGrid& g, const ConvWeights3D& w, int dilation) {
  if (dilation < 1) throw std::invalid_argument("dilated_conv3d: dilation must be >= 1");
  if (w.in_channels() != g.channels()) {
    throw std::invalid_argument("dilated_conv3d: feature width mismatch");
  }
  const int nx = g.geom.nx, ny = g.geom.ny, nz = g.geom.nz;
  const int cells = static_cast<int>(g.geom.cell_count());
  const int d_in = w.in_channels(), d_out = w.out_channels();

  // Per offset, the list of (output cell, input cell) pairs inside bounds.
  std::vector<std::vector<std::pair<int, int>>> pairs(27);
  {
    int k = 0;
    for (int ox = -1; ox <= 1; ++ox) {
      for (int oy = -1; oy <= 1; ++oy) {
        for (int oz = -1; oz <= 1; ++oz, ++k) {
          auto& list = pairs[k];
          const int sx = ox * dilation, sy = oy * dilation, sz = oz * dilation;
          for (int i = std::max(0, -sx); i < std::min(nx, nx - sx); ++i) {
            for (int j = std::max(0, -sy); j < std::min(ny, ny - sy); ++j) {
              for (int l = std::max(0, -sz); l < std::min(nz, nz - sz); ++l) {
                list.emplace_back(static_cast<int>(g.geom.index(i, j, l)),
                                  static_cast<int>(g.geom.index(i + sx, j + sy, l + sz)));
              }
            }
          }
        }
      }
    }
  }

  Vec out(static_cast<std::int64_t>(cells) * d_out);
  {
    MatMap om(out.data(), cells, d_out);
    om.rowwise() = Eigen::Map<const Eigen::RowVectorXd>(w.bias.data(), d_out);
    ConstMatMap im(g.features.data(), cells, d_in);
    for (int k = 0; k < 27; ++k) {
      const auto& list = pairs[k];
      if (list.empty()) continue;
      MatRM gathered(static_cast<int>(list.size()), d_in);
      for (size_t e = 0; e < list.size(); ++e) gathered.row(e) = im.row(list[e].second);
      ConstMatMap wk(w.weights.data() + static_cast<std::int64_t>(k) * d_in * d_out, d_in, d_out);
      MatRM partial = gathered * wk;
      for (size_t e = 0; e < list.size(); ++e) om.row(list[e].first) += partial.row(e);
    }
  }

  DenseGrid result;
  result.geom = g.geom;
  Tensor in_feats = g.features;
  Tensor weights = w.weights;
  result.features = make_op(
      {cells, d_out}, std::move(out), {g.features, w.weights, w.bias},
      [pairs = std::move(pairs), cells, d_in, d_out, in_feats, weights](
          const Vec& gr, const std::vector<Vec*>& pg) {
        ConstMatMap gm(gr.data(), cells, d_out);
        ConstMatMap im(in_feats.data(), cells, d_in);
        if (pg[2]) Eigen::Map<Eigen::RowVectorXd>(pg[2]->data(), d_out) += gm.colwise().sum();
        for (int k = 0; k < 27; ++k) {
          const auto& list = pairs[k];
          if (list.empty()) continue;
          MatRM g_rows(static_cast<int>(list.size()), d_out);
          for (size_t e = 0; e < list.size(); ++e) g_rows.row(e) = gm.row(list[e].first);
          ConstMatMap wk(weights.data() + static_cast<std::int64_t>(k) * d_in * d_out, d_in,
                         d_out);
          if (pg[0]) {
            MatRM dx = g_rows * wk.transpose();
            MatMap dim(pg[0]->data(), cells, d_in);
            for (size_t e = 0; e < list.size(); ++e) dim.row(list[e].second) += dx.row(e);
          }
          if (pg[1]) {
            MatRM gathered(static_cast<int>(list.size()), d_in);
            for (size_t e = 0; e < list.size(); ++e) gathered.row(e) = im.row(list[e].second);
            MatMap dwk(pg[1]->data() + static_cast<std::int64_t>(k) * d_in * d_out, d_in, d_out);
            dwk.noalias() += gathered.transpose() * g_rows;
          }
        }
      });
  return result;
}

UpConvWeights3D UpConvWeights3D::create(int d_in, int d_out, std::mt19937_64& rng) {
  UpConvWeights3D w;
  w.weights = Tensor::randn({8, d_in, d_out}, rng, std::sqrt(2.0 / d_in), true);
  w.bias = Tensor::zeros({d_out}, true);
  return w;
}

DenseGrid up_conv3d(const DenseGrid& g, const UpConvWeights3D& w) {
  if (w.in_channels() != g.channels()) {
    throw std::invalid_argument("up_conv3d: feature width mismatch");
  }
  const int nx = g.geom.nx, ny = g.geom.ny, nz = g.geom.nz;
  const int in_cells = static_cast<int>(g.geom.cell_count());
  const int d_in = w.in_channels(), d_out = w.out_channels();

  GridGeometry out_geom;
  out_geom.nx = nx * 2;
  out_geom.ny = ny * 2;
  out_geom.nz = nz * 2;
  out_geom.voxel_size = g.geom.voxel_size * 0.5;
  out_geom.origin = g.geom.origin;
  const int out_cells = static_cast<int>(out_geom.cell_count());

  // Output cell (2i+a, 2j+b, 2k+c) receives exactly W[a,b,c] . in[i,j,k].
  std::vector<std::vector<std::pair<int, int>>> pairs(8);
  {
    for (int a = 0; a < 2; ++a) {
      for (int b = 0; b < 2; ++b) {
        for (int c = 0; c < 2; ++c) {
          auto& list = pairs[(a * 2 + b) * 2 + c];
          list.reserve(in_cells);
          for (int i = 0; i < nx; ++i) {
            for (int j = 0; j < ny; ++j) {
              for (int k = 0; k < nz; ++k) {
                list.emplace_back(
                    static_cast<int>(out_geom.index(2 * i + a, 2 * j + b, 2 * k + c)),
                    static_cast<int>(g.geom.index(i, j, k)));
              }
            }
          }
        }
      }
    }
  }

  Vec out(static_cast<std::int64_t>(out_cells) * d_out);
  {
    MatMap om(out.data(), out_cells, d_out);
    om.rowwise() = Eigen::Map<const Eigen::RowVectorXd>(w.bias.data(), d_out);
    ConstMatMap im(g.features.data(), in_cells, d_in);
    for (int k = 0; k < 8; ++k) {
      ConstMatMap wk(w.weights.data() + static_cast<std::int64_t>(k) * d_in * d_out, d_in, d_out);
      MatRM partial = im * wk;
      for (const auto& [out_cell, in_cell] : pairs[k]) om.row(out_cell) += partial.row(in_cell);
    }
  }

  DenseGrid result;
  result.geom = out_geom;
  Tensor in_feats = g.features;
  Tensor weights = w.weights;
  result.features = make_op(
      {out_cells, d_out}, std::move(out), {g.features, w.weights, w.bias},
      [pairs = std::move(pairs), in_cells, out_cells, d_in, d_out, in_feats, weights](
          const Vec& gr, const std::vector<Vec*>& pg) {
        ConstMatMap gm(gr.data(), out_cells, d_out);
        ConstMatMap im(in_feats.data(), in_cells, d_in);
        if (pg[2]) Eigen::Map<Eigen::RowVectorXd>(pg[2]->data(), d_out) += gm.colwise().sum();
        for (int k = 0; k < 8; ++k) {
          MatRM g_rows(in_cells, d_out);
          for (const auto& [out_cell, in_cell] : pairs[k]) g_rows.row(in_cell) = gm.row(out_cell);
          ConstMatMap wk(weights.data() + static_cast<std::int64_t>(k) * d_in * d_out, d_in,
                         d_out);
          if (pg[0]) {
            MatMap dim(pg[0]->data(), in_cells, d_in);
            dim.noalias() += g_rows * wk.transpose();
          }
          if (pg[1]) {
            MatMap dwk(pg[1]->data() + static_cast<std::int64_t>(k) * d_in * d_out, d_in, d_out);
            dwk.noalias() += im.transpose() * g_rows;
          }
        }
      });
  return result;
}

// ---------------------------------------------------------------------------
// Grid file format
// ---------------------------------------------------------------------------

void write_grid(const SemanticVoxelGrid& g, std::ostream& os) {
  g.validate();
  os << "SCSFGRID1\n";
  os << "extents " << g.geom.nx << ' ' << g.geom.ny << ' ' << g.geom.nz << '\n';
  os << std::setprecision(17);
  os << "voxel_size " << g.geom.voxel_size << '\n';
  os << "origin " << g.geom.origin.x() << ' ' << g.geom.origin.y() << ' ' << g.geom.origin.z()
     << '\n';
  os << "classes " << g.classes.count() << '\n';
  for (int i = 0; i < g.classes.count(); ++i) {
    os << i << ' ' << g.classes.names[i] << ' ' << (g.classes.movable[i] ? 1 : 0) << '\n';
  }
  os << "voxels " << g.occupied_count() << '\n';
  for (int i = 0; i < g.geom.nx; ++i) {
    for (int j = 0; j < g.geom.ny; ++j) {
      for (int k = 0; k < g.geom.nz; ++k) {
        const std::uint8_t l = g.label(i, j, k);
        if (l != 0) os << i << ' ' << j << ' ' << k << ' ' << static_cast<int>(l) << '\n';
      }
    }
  }
}

SemanticVoxelGrid read_grid(std::istream& is) {
  auto fail = [](const std::string& what) -> SemanticVoxelGrid {
    throw std::runtime_error("grid parse error: " + what);
  };
  std::string tok;
  is >> tok;
  if (tok != "SCSFGRID1") return fail("bad magic");
  SemanticVoxelGrid g;
  is >> tok;
  if (tok != "extents") return fail("extents");
  is >> g.geom.nx >> g.geom.ny >> g.geom.nz;
  is >> tok;
  if (tok != "voxel_size") return fail("voxel_size");
  is >> g.geom.voxel_size;
  is >> tok;
  if (tok != "origin") return fail("origin");
  is >> g.geom.origin.x() >> g.geom.origin.y() >> g.geom.origin.z();
  is >> tok;
  if (tok != "classes") return fail("classes");
  int n_classes = 0;
  is >> n_classes;
  g.classes.names.resize(n_classes);
  g.classes.movable.resize(n_classes);
  for (int i = 0; i < n_classes; ++i) {
    int id = 0, mov = 0;
    std::string name;
    is >> id >> name >> mov;
    if (id != i) return fail("class ids must be dense and ordered");
    g.classes.names[i] = name;
    g.classes.movable[i] = mov != 0;
  }
  is >> tok;
  if (tok != "voxels") return fail("voxels");
  std::int64_t n_voxels = 0;
  is >> n_voxels;
  if (!is) return fail("header");
  g.labels.assign(g.geom.cell_count(), 0);
  for (std::int64_t v = 0; v < n_voxels; ++v) {
    int i, j, k, l;
    is >> i >> j >> k >> l;
    if (!is) return fail("voxel line");
    if (!g.geom.contains(i, j, k)) return fail("voxel out of bounds");
    if (l <= 0 || l >= n_classes) return fail("voxel label out of range");
    g.set_label(i, j, k, static_cast<std::uint8_t>(l));
  }
  g.validate();
  return g;
}

void save_grid(const SemanticVoxelGrid& g, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open grid file for writing: " + path);
  write_grid(g, os);
  if (!os) throw std::runtime_error("grid write failed: " + path);
}

SemanticVoxelGrid load_grid(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open grid file: " + path);
  return read_grid(is);
}

}  // namespace scsf
