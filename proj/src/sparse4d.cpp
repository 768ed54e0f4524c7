#include "scsf/sparse4d.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <unordered_map>

namespace scsf {

namespace {

std::uint64_t mix64(std::uint64_t h) {
  h ^= h >> 30;
  h *= 0xbf58476d1ce4e5b9ULL;
  h ^= h >> 27;
  h *= 0x94d049bb133111ebULL;
  h ^= h >> 31;
  return h;
}

}  // namespace

bool coord_less(const Coord4& a, const Coord4& b) {
  if (a.x != b.x) return a.x < b.x;
  if (a.y != b.y) return a.y < b.y;
  if (a.z != b.z) return a.z < b.z;
  return a.t < b.t;
}

std::size_t Coord4Hash::operator()(const Coord4& c) const {
  std::uint64_t h = mix64(static_cast<std::uint32_t>(c.x));
  h = mix64(h ^ static_cast<std::uint32_t>(c.y));
  h = mix64(h ^ static_cast<std::uint32_t>(c.z));
  h = mix64(h ^ static_cast<std::uint32_t>(c.t));
  return static_cast<std::size_t>(h);
}

void PointCloudFrame::validate() const {
  if (coords.rows() < 1) throw std::invalid_argument("point cloud frame is empty");
  if (coords.cols() != 3) throw std::invalid_argument("point coords must be N x 3");
  if (features.rows() != coords.rows()) {
    throw std::invalid_argument("feature rows do not align with coordinate rows");
  }
  if (!coords.allFinite() || !features.allFinite()) {
    throw std::invalid_argument("non-finite values in point cloud frame");
  }
}

void Sequence::validate() const {
  if (frames.empty()) throw std::invalid_argument("sequence has no frames");
  if (poses.size() != frames.size()) throw std::invalid_argument("pose count != frame count");
  for (size_t i = 0; i < frames.size(); ++i) {
    frames[i].validate();
    if (i > 0 && frames[i].timestamp <= frames[i - 1].timestamp) {
      throw std::invalid_argument("timestamps must be strictly increasing");
    }
  }
}

Eigen::Vector3d SparseTensor4D::voxel_center(const Coord4& c) const {
  const double base = base_cell_size();
  return origin + Eigen::Vector3d((c.x + 0.5 * spatial_stride) * base,
                                  (c.y + 0.5 * spatial_stride) * base,
                                  (c.z + 0.5 * spatial_stride) * base);
}

void SparseTensor4D::validate() const {
  if (features.rank() != 2 || features.extent(0) != count()) {
    throw std::invalid_argument("sparse tensor feature rows do not match coordinate count");
  }
  for (size_t i = 0; i < coords.size(); ++i) {
    const Coord4& c = coords[i];
    if (c.x % spatial_stride || c.y % spatial_stride || c.z % spatial_stride ||
        c.t % temporal_stride) {
      throw std::invalid_argument("sparse coordinate not on the stride lattice");
    }
    if (i > 0 && !coord_less(coords[i - 1], c)) {
      throw std::invalid_argument("sparse coordinates not sorted/unique");
    }
  }
}

// ---------------------------------------------------------------------------
// Voxelization
// ---------------------------------------------------------------------------

SparseTensor4D voxelize(const Sequence& seq, double voxel_size, const Eigen::Vector3d& origin) {
  if (voxel_size <= 0) throw std::invalid_argument("voxelize: voxel_size must be > 0");
  seq.validate();
  const int channels = seq.frames[0].channels();
  for (const PointCloudFrame& f : seq.frames) {
    if (f.channels() != channels) throw std::invalid_argument("voxelize: channel widths differ");
  }

  struct Entry {
    Coord4 coord;
    const double* feature;  // row pointer, length = channels
  };
  std::vector<Entry> entries;
  std::size_t total = 0;
  for (const PointCloudFrame& f : seq.frames) total += f.count();
  entries.reserve(total);

  for (const PointCloudFrame& f : seq.frames) {
    for (int i = 0; i < f.count(); ++i) {
      Coord4 c;
      c.x = static_cast<int>(std::floor((f.coords(i, 0) - origin.x()) / voxel_size));
      c.y = static_cast<int>(std::floor((f.coords(i, 1) - origin.y()) / voxel_size));
      c.z = static_cast<int>(std::floor((f.coords(i, 2) - origin.z()) / voxel_size));
      c.t = static_cast<int>(f.timestamp);
      entries.push_back({c, f.features.row(i).data()});
    }
  }

  // Canonical order: coordinate, then feature row lexicographically, which
  // makes the mean independent of input point order.
  std::sort(entries.begin(), entries.end(), [channels](const Entry& a, const Entry& b) {
    if (!(a.coord == b.coord)) return coord_less(a.coord, b.coord);
    return std::lexicographical_compare(a.feature, a.feature + channels, b.feature,
                                        b.feature + channels);
  });

  std::vector<Coord4> coords;
  std::vector<double> feats;
  std::size_t i = 0;
  while (i < entries.size()) {
    std::size_t j = i;
    Vec acc = Vec::Zero(channels);
    while (j < entries.size() && entries[j].coord == entries[i].coord) {
      acc += Eigen::Map<const Vec>(entries[j].feature, channels);
      ++j;
    }
    acc /= static_cast<double>(j - i);
    coords.push_back(entries[i].coord);
    feats.insert(feats.end(), acc.data(), acc.data() + channels);
    i = j;
  }

  SparseTensor4D out;
  out.coords = std::move(coords);
  out.features = Tensor::from_data({static_cast<int>(out.coords.size()), channels}, feats);
  out.voxel_size = voxel_size;
  out.spatial_stride = 1;
  out.temporal_stride = 1;
  out.origin = origin;
  return out;
}

// ---------------------------------------------------------------------------
// Kernel map and sparse convolution
// ---------------------------------------------------------------------------

std::vector<std::array<int, 4>> kernel_offsets(const KernelExtents& extents) {
  auto axis = [](int e) {
    std::vector<int> offs(e);
    const int lo = (e % 2 == 1) ? -(e - 1) / 2 : 0;
    for (int i = 0; i < e; ++i) offs[i] = lo + i;
    return offs;
  };
  const auto ox = axis(extents.kx), oy = axis(extents.ky), oz = axis(extents.kz),
             ot = axis(extents.kt);
  std::vector<std::array<int, 4>> out;
  out.reserve(extents.offset_count());
  for (int a : ox)
    for (int b : oy)
      for (int c : oz)
        for (int d : ot) out.push_back({a, b, c, d});
  return out;
}

KernelWeights4D KernelWeights4D::create(const KernelExtents& extents, int d_in, int d_out,
                                        std::mt19937_64& rng) {
  if (d_in < 1 || d_out < 1) throw std::invalid_argument("kernel channels must be >= 1");
  const int k = extents.offset_count();
  const double stddev = std::sqrt(2.0 / (static_cast<double>(k) * d_in));
  KernelWeights4D w;
  w.extents = extents;
  w.weights = Tensor::randn({k, d_in, d_out}, rng, stddev, true);
  w.bias = Tensor::zeros({d_out}, true);
  return w;
}

KernelMap build_kernel_map(const SparseTensor4D& in, const KernelExtents& extents,
                           const Stride4& stride) {
  if (stride.x < 1 || stride.y < 1 || stride.z < 1 || stride.t < 1) {
    throw std::invalid_argument("stride must be >= 1 per axis");
  }
  const auto offsets = kernel_offsets(extents);
  const int sx = in.spatial_stride;
  const int st = in.temporal_stride;
  const int out_sx = sx * stride.x, out_sy = sx * stride.y, out_sz = sx * stride.z;
  const int out_st = st * stride.t;

  struct Triple {
    Coord4 out;
    int input_row;
    int offset_index;
  };
  std::vector<Triple> triples;
  triples.reserve(in.coords.size() * offsets.size() / 2 + 1);
  for (int row = 0; row < in.count(); ++row) {
    const Coord4& c = in.coords[row];
    for (int k = 0; k < static_cast<int>(offsets.size()); ++k) {
      const auto& off = offsets[k];
      Coord4 o{c.x - off[0] * sx, c.y - off[1] * sx, c.z - off[2] * sx, c.t - off[3] * st};
      if (o.x % out_sx || o.y % out_sy || o.z % out_sz || o.t % out_st) continue;
      triples.push_back({o, row, k});
    }
  }

  KernelMap map;
  map.out_spatial_stride = out_sx;
  map.out_temporal_stride = out_st;

  std::vector<Coord4> outs;
  outs.reserve(triples.size());
  for (const Triple& t : triples) outs.push_back(t.out);
  std::sort(outs.begin(), outs.end(), coord_less);
  outs.erase(std::unique(outs.begin(), outs.end()), outs.end());
  map.out_coords = std::move(outs);

  std::unordered_map<Coord4, int, Coord4Hash> out_row;
  out_row.reserve(map.out_coords.size() * 2);
  for (int i = 0; i < static_cast<int>(map.out_coords.size()); ++i) {
    out_row.emplace(map.out_coords[i], i);
  }

  map.entries.reserve(triples.size());
  for (const Triple& t : triples) {
    map.entries.push_back({t.input_row, out_row.at(t.out), t.offset_index});
  }
  std::sort(map.entries.begin(), map.entries.end(),
            [](const KernelMapEntry& a, const KernelMapEntry& b) {
              if (a.offset_index != b.offset_index) return a.offset_index < b.offset_index;
              if (a.output_row != b.output_row) return a.output_row < b.output_row;
              return a.input_row < b.input_row;
            });
  return map;
}

namespace {

// Gather-GEMM-scatter over a kernel map; one op node covering the whole
// convolution so the tape stays small.
Tensor sparse_conv_features(const Tensor& in_feats, const Tensor& weights, const Tensor& bias,
                            const KernelMap& map) {
  const int n_out = static_cast<int>(map.out_coords.size());
  const int d_in = weights.extent(1);
  const int d_out = weights.extent(2);
  const int n_offsets = weights.extent(0);

  // Entry ranges per offset (entries sorted by offset_index first).
  std::vector<std::pair<int, int>> ranges(n_offsets, {0, 0});
  {
    int i = 0;
    const int total = static_cast<int>(map.entries.size());
    for (int k = 0; k < n_offsets; ++k) {
      const int begin = i;
      while (i < total && map.entries[i].offset_index == k) ++i;
      ranges[k] = {begin, i};
    }
  }

  Vec out(static_cast<std::int64_t>(n_out) * d_out);
  {
    MatMap om(out.data(), n_out, d_out);
    om.rowwise() = Eigen::Map<const Eigen::RowVectorXd>(bias.data(), d_out);
    ConstMatMap im(in_feats.data(), in_feats.extent(0), d_in);
    for (int k = 0; k < n_offsets; ++k) {
      const auto [begin, end] = ranges[k];
      if (begin == end) continue;
      const int nk = end - begin;
      MatRM gathered(nk, d_in);
      for (int e = 0; e < nk; ++e) gathered.row(e) = im.row(map.entries[begin + e].input_row);
      ConstMatMap wk(weights.data() + static_cast<std::int64_t>(k) * d_in * d_out, d_in, d_out);
      MatRM partial = gathered * wk;
      for (int e = 0; e < nk; ++e) om.row(map.entries[begin + e].output_row) += partial.row(e);
    }
  }

  // The closure keeps its own copy of the map slices it needs.
  std::vector<KernelMapEntry> entries = map.entries;
  const int n_in = in_feats.extent(0);
  return make_op(
      {n_out, d_out}, std::move(out), {in_feats, weights, bias},
      [entries = std::move(entries), ranges, n_in, n_out, d_in, d_out, n_offsets, in_feats,
       weights](const Vec& g, const std::vector<Vec*>& pg) {
        ConstMatMap gm(g.data(), n_out, d_out);
        ConstMatMap im(in_feats.data(), n_in, d_in);
        if (pg[2]) {
          Eigen::Map<Eigen::RowVectorXd>(pg[2]->data(), d_out) += gm.colwise().sum();
        }
        for (int k = 0; k < n_offsets; ++k) {
          const auto [begin, end] = ranges[k];
          if (begin == end) continue;
          const int nk = end - begin;
          MatRM g_rows(nk, d_out);
          for (int e = 0; e < nk; ++e) g_rows.row(e) = gm.row(entries[begin + e].output_row);
          ConstMatMap wk(weights.data() + static_cast<std::int64_t>(k) * d_in * d_out, d_in,
                         d_out);
          if (pg[0]) {
            MatRM dx = g_rows * wk.transpose();
            MatMap dim(pg[0]->data(), n_in, d_in);
            for (int e = 0; e < nk; ++e) dim.row(entries[begin + e].input_row) += dx.row(e);
          }
          if (pg[1]) {
            MatRM gathered(nk, d_in);
            for (int e = 0; e < nk; ++e) gathered.row(e) = im.row(entries[begin + e].input_row);
            MatMap dwk(pg[1]->data() + static_cast<std::int64_t>(k) * d_in * d_out, d_in, d_out);
            dwk.noalias() += gathered.transpose() * g_rows;
          }
        }
      });
}

}  // namespace

SparseTensor4D sparse_conv(const SparseTensor4D& in, const KernelWeights4D& kernel,
                           const Stride4& stride) {
  if (kernel.in_channels() != in.channels()) {
    throw std::invalid_argument("sparse_conv: feature width mismatch");
  }
  if (stride.x != stride.y || stride.x != stride.z) {
    throw std::invalid_argument("sparse_conv: spatial stride must be isotropic");
  }
  if (stride.x == 1 &&
      (kernel.extents.kx % 2 == 0 || kernel.extents.ky % 2 == 0 || kernel.extents.kz % 2 == 0)) {
    throw std::invalid_argument("sparse_conv: stride-1 kernels need odd spatial extents");
  }
  KernelMap map = build_kernel_map(in, kernel.extents, stride);
  SparseTensor4D out;
  out.features = sparse_conv_features(in.features, kernel.weights, kernel.bias, map);
  out.coords = std::move(map.out_coords);
  out.voxel_size = in.voxel_size * stride.x;
  out.spatial_stride = map.out_spatial_stride;
  out.temporal_stride = map.out_temporal_stride;
  out.origin = in.origin;
  return out;
}

SparseTensor4D temporal_collapse(const SparseTensor4D& in) {
  if (in.count() == 0) throw std::invalid_argument("temporal_collapse: empty input");
  struct Ref {
    Coord4 key;  // t forced to 0
    int row;
  };
  std::vector<Ref> refs(in.count());
  for (int i = 0; i < in.count(); ++i) refs[i] = {{in.coords[i].x, in.coords[i].y, in.coords[i].z, 0}, i};
  std::sort(refs.begin(), refs.end(), [](const Ref& a, const Ref& b) {
    if (!(a.key == b.key)) return coord_less(a.key, b.key);
    return a.row < b.row;
  });

  std::vector<Coord4> coords;
  std::vector<int> group_of(in.count());
  std::vector<int> group_size;
  {
    int i = 0;
    while (i < in.count()) {
      int j = i;
      while (j < in.count() && refs[j].key == refs[i].key) ++j;
      coords.push_back(refs[i].key);
      for (int e = i; e < j; ++e) group_of[refs[e].row] = static_cast<int>(coords.size()) - 1;
      group_size.push_back(j - i);
      i = j;
    }
  }

  const int n_out = static_cast<int>(coords.size());
  const int d = in.channels();
  Vec out = Vec::Zero(static_cast<std::int64_t>(n_out) * d);
  {
    MatMap om(out.data(), n_out, d);
    ConstMatMap im(in.features.data(), in.count(), d);
    for (const Ref& r : refs) om.row(group_of[r.row]) += im.row(r.row);
    for (int j = 0; j < n_out; ++j) om.row(j) /= static_cast<double>(group_size[j]);
  }

  SparseTensor4D result;
  result.coords = std::move(coords);
  const int n_in = in.count();
  result.features = make_op(
      {n_out, d}, std::move(out), {in.features},
      [group_of, group_size, n_in, n_out, d](const Vec& g, const std::vector<Vec*>& pg) {
        if (!pg[0]) return;
        ConstMatMap gm(g.data(), n_out, d);
        MatMap dim(pg[0]->data(), n_in, d);
        for (int i = 0; i < n_in; ++i) {
          const int j = group_of[i];
          dim.row(i) += gm.row(j) / static_cast<double>(group_size[j]);
        }
      });
  result.voxel_size = in.voxel_size;
  result.spatial_stride = in.spatial_stride;
  result.temporal_stride = 1;
  result.origin = in.origin;
  return result;
}

void dump_sparse_text(const SparseTensor4D& s, std::ostream& os) {
  // coords are stored sorted, so lines come out in lexicographic order.
  ConstMatMap fm(s.features.data(), s.count(), s.channels());
  for (int i = 0; i < s.count(); ++i) {
    const Coord4& c = s.coords[i];
    os << c.x << ' ' << c.y << ' ' << c.z << ' ' << c.t;
    for (int j = 0; j < s.channels(); ++j) os << ' ' << fm(i, j);
    os << '\n';
  }
}

}  // namespace scsf
