#include <doctest.h>

#include <algorithm>
#include <random>
#include <sstream>

#include "oracles.hpp"
#include "scsf/sparse4d.hpp"
#include "test_util.hpp"

using namespace scsf;

namespace {

Sequence single_frame_sequence(const std::vector<std::array<double, 3>>& pts,
                               const std::vector<double>& feats, std::int64_t timestamp = 0) {
  PointCloudFrame f;
  f.coords.resize(static_cast<int>(pts.size()), 3);
  f.features.resize(static_cast<int>(pts.size()), 1);
  for (size_t i = 0; i < pts.size(); ++i) {
    for (int a = 0; a < 3; ++a) f.coords(static_cast<int>(i), a) = pts[i][a];
    f.features(static_cast<int>(i), 0) = feats[i];
  }
  f.timestamp = timestamp;
  Sequence seq;
  seq.frames.push_back(std::move(f));
  seq.poses.push_back(Pose::Identity());
  return seq;
}

SparseTensor4D random_sparse(std::mt19937_64& rng, int box, int t_extent, int channels,
                             double density = 0.3) {
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::uniform_real_distribution<double> val(-1.0, 1.0);
  std::vector<Coord4> coords;
  std::vector<double> feats;
  for (int x = 0; x < box; ++x)
    for (int y = 0; y < box; ++y)
      for (int z = 0; z < box; ++z)
        for (int t = 0; t < t_extent; ++t) {
          if (uni(rng) > density) continue;
          coords.push_back({x, y, z, t});
          for (int c = 0; c < channels; ++c) feats.push_back(val(rng));
        }
  if (coords.empty()) {
    coords.push_back({0, 0, 0, 0});
    for (int c = 0; c < channels; ++c) feats.push_back(val(rng));
  }
  SparseTensor4D s;
  s.coords = std::move(coords);
  s.features = Tensor::from_data({static_cast<int>(s.coords.size()), channels}, feats);
  s.voxel_size = 0.05;
  s.origin = Eigen::Vector3d::Zero();
  return s;
}

MatRM features_of(const SparseTensor4D& s) {
  return ConstMatMap(s.features.data(), s.count(), s.channels());
}

}  // namespace

TEST_SUITE("sparse4d") {

TEST_CASE("voxelize floor semantics and mean aggregation") {
  {
    auto seq = single_frame_sequence({{0.005, 0.005, 0.005}}, {2.5});
    SparseTensor4D s = voxelize(seq, 0.01, Eigen::Vector3d::Zero());
    REQUIRE(s.count() == 1);
    CHECK(s.coords[0] == Coord4{0, 0, 0, 0});
    CHECK(s.features.at({0, 0}) == 2.5);
    CHECK(s.voxel_size == 0.01);
    CHECK(s.temporal_stride == 1);
  }
  {
    auto seq = single_frame_sequence({{0.015, 0.0, 0.0}}, {1.0});
    SparseTensor4D s = voxelize(seq, 0.01, Eigen::Vector3d::Zero());
    CHECK(s.coords[0].x == 1);  // floor(1.5)
  }
  {
    auto seq = single_frame_sequence({{0.002, 0.002, 0.002}, {0.006, 0.006, 0.006}}, {2.0, 4.0});
    SparseTensor4D s = voxelize(seq, 0.01, Eigen::Vector3d::Zero());
    REQUIRE(s.count() == 1);
    CHECK(s.features.at({0, 0}) == 3.0);  // mean of 2 and 4
  }
  Sequence empty;
  CHECK_THROWS_AS(voxelize(empty, 0.01, Eigen::Vector3d::Zero()), std::invalid_argument);
}

TEST_CASE("voxelize is idempotent through centroids and order invariant") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> pos(-0.5, 0.5);
  std::uniform_real_distribution<double> val(-1, 1);
  std::vector<std::array<double, 3>> pts(64);
  std::vector<double> feats(64);
  for (int i = 0; i < 64; ++i) {
    pts[i] = {pos(rng), pos(rng), pos(rng)};
    feats[i] = val(rng);
  }
  auto seq = single_frame_sequence(pts, feats);
  SparseTensor4D a = voxelize(seq, 0.1, Eigen::Vector3d::Zero());

  // Devoxelize to centroids, voxelize again: identical structure + features.
  std::vector<std::array<double, 3>> centroids;
  std::vector<double> cfeats;
  for (int i = 0; i < a.count(); ++i) {
    Eigen::Vector3d c = a.voxel_center(a.coords[i]);
    centroids.push_back({c.x(), c.y(), c.z()});
    cfeats.push_back(a.features.at({i, 0}));
  }
  SparseTensor4D b = voxelize(single_frame_sequence(centroids, cfeats), 0.1,
                              Eigen::Vector3d::Zero());
  REQUIRE(b.count() == a.count());
  for (int i = 0; i < a.count(); ++i) {
    CHECK(b.coords[i] == a.coords[i]);
    CHECK(b.features.at({i, 0}) == a.features.at({i, 0}));
  }

  // Shuffled input points give bit-identical output.
  std::vector<int> perm(64);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::array<double, 3>> pts2(64);
  std::vector<double> feats2(64);
  for (int i = 0; i < 64; ++i) {
    pts2[i] = pts[perm[i]];
    feats2[i] = feats[perm[i]];
  }
  SparseTensor4D c = voxelize(single_frame_sequence(pts2, feats2), 0.1, Eigen::Vector3d::Zero());
  REQUIRE(c.count() == a.count());
  for (int i = 0; i < a.count(); ++i) {
    CHECK(c.coords[i] == a.coords[i]);
    CHECK(c.features.at({i, 0}) == a.features.at({i, 0}));
  }
}

TEST_CASE("kernel map identity, strided footprint, empty input") {
  SparseTensor4D one;
  one.coords = {{1, 1, 1, 0}};
  one.features = Tensor::constant({1, 1}, 1.0);
  one.voxel_size = 0.05;

  KernelMap self = build_kernel_map(one, KernelExtents{1, 1, 1, 1}, Stride4{});
  REQUIRE(self.entries.size() == 1);
  CHECK(self.out_coords[0] == Coord4{1, 1, 1, 0});
  CHECK(self.entries[0].input_row == 0);
  CHECK(self.entries[0].offset_index == 0);

  // Single voxel at (1,1,1,0), 3x3x3x1 kernel, stride 2: exhaustive footprint
  // enumeration says it feeds exactly the even positions within +-1.
  KernelMap strided = build_kernel_map(one, KernelExtents{3, 3, 3, 1}, Stride4{2, 2, 2, 1});
  std::vector<Coord4> expected;
  for (int x = 0; x <= 2; x += 2)
    for (int y = 0; y <= 2; y += 2)
      for (int z = 0; z <= 2; z += 2) expected.push_back({x, y, z, 0});
  REQUIRE(strided.out_coords.size() == expected.size());
  for (size_t i = 0; i < expected.size(); ++i) CHECK(strided.out_coords[i] == expected[i]);
  CHECK(strided.out_spatial_stride == 2);

  SparseTensor4D empty;
  empty.features = Tensor::zeros({0, 1});
  KernelMap none = build_kernel_map(empty, KernelExtents{3, 3, 3, 1}, Stride4{});
  CHECK(none.out_coords.empty());
  CHECK(none.entries.empty());
}

TEST_CASE("sparse_conv identity kernel is exact") {
  std::mt19937_64 rng(9);
  SparseTensor4D in = random_sparse(rng, 4, 2, 3);
  KernelWeights4D k;
  k.extents = {1, 1, 1, 1};
  std::vector<double> w(9, 0.0);
  w[0] = w[4] = w[8] = 1.0;
  k.weights = Tensor::from_data({1, 3, 3}, w);
  k.bias = Tensor::zeros({3});
  SparseTensor4D out = sparse_conv(in, k, Stride4{});
  REQUIRE(out.count() == in.count());
  for (int i = 0; i < in.count(); ++i) {
    CHECK(out.coords[i] == in.coords[i]);
    for (int c = 0; c < 3; ++c) CHECK(out.features.at({i, c}) == in.features.at({i, c}));
  }
}

TEST_CASE("sparse_conv matches the dense 4D convolution oracle") {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 25; ++trial) {
    SparseTensor4D in = random_sparse(rng, 5, 2, 2);
    KernelWeights4D k = KernelWeights4D::create(KernelExtents{3, 3, 3, 2}, 2, 3, rng);
    for (const Stride4 stride : {Stride4{1, 1, 1, 1}, Stride4{2, 2, 2, 1}}) {
      if (stride.x == 1 && k.extents.kx % 2 == 0) continue;
      SparseTensor4D out = sparse_conv(in, k, stride);
      auto oracle = scsf_test::dense_conv4d_oracle(in.coords, features_of(in), k.extents,
                                                   k.weights, k.bias, in.spatial_stride,
                                                   in.temporal_stride, stride.x, stride.t);
      REQUIRE(out.count() == static_cast<int>(oracle.coords.size()));
      for (int i = 0; i < out.count(); ++i) {
        CHECK(out.coords[i] == oracle.coords[i]);
        for (int c = 0; c < out.channels(); ++c) {
          CHECK_NEAR(out.features.at({i, c}), oracle.features(i, c), 1e-10);
        }
      }
    }
  }
}

TEST_CASE("sparse_conv scale bookkeeping and stride lattice property") {
  std::mt19937_64 rng(17);
  SparseTensor4D in = random_sparse(rng, 6, 2, 2);
  in.voxel_size = 0.04;
  KernelWeights4D k = KernelWeights4D::create(KernelExtents{2, 2, 2, 1}, 2, 4, rng);
  SparseTensor4D out = sparse_conv(in, k, Stride4{2, 2, 2, 1});
  CHECK(out.voxel_size == doctest::Approx(0.08));
  CHECK(out.spatial_stride == 2);
  for (const Coord4& c : out.coords) {
    CHECK(c.x % 2 == 0);
    CHECK(c.y % 2 == 0);
    CHECK(c.z % 2 == 0);
  }
  KernelWeights4D k2 = KernelWeights4D::create(KernelExtents{2, 2, 2, 1}, 4, 4, rng);
  SparseTensor4D out2 = sparse_conv(out, k2, Stride4{2, 2, 2, 1});
  CHECK(out2.voxel_size == doctest::Approx(0.16));
  for (const Coord4& c : out2.coords) {
    CHECK(c.x % 4 == 0);
    CHECK(c.y % 4 == 0);
    CHECK(c.z % 4 == 0);
  }
  CHECK_THROWS_AS(sparse_conv(in, KernelWeights4D::create(KernelExtents{3, 3, 3, 1}, 5, 2, rng),
                              Stride4{}),
                  std::invalid_argument);
}

TEST_CASE("sparse_conv gradients pass grad_check") {
  std::mt19937_64 rng(21);
  SparseTensor4D in = random_sparse(rng, 3, 2, 2, 0.5);
  KernelWeights4D k = KernelWeights4D::create(KernelExtents{3, 3, 3, 2}, 2, 2, rng);

  auto loss_through_weights = [&](const Tensor& w) {
    KernelWeights4D probe{k.extents, w, k.bias};
    SparseTensor4D out = sparse_conv(in, probe, Stride4{2, 2, 2, 1});
    return sum(mul(out.features, out.features));
  };
  CHECK(grad_check(loss_through_weights, k.weights) < 1e-4);

  auto loss_through_features = [&](const Tensor& f) {
    SparseTensor4D probe = in;
    probe.features = f;
    SparseTensor4D out = sparse_conv(probe, k, Stride4{});
    return sum(mul(out.features, out.features));
  };
  CHECK(grad_check(loss_through_features, in.features) < 1e-4);

  auto loss_through_bias = [&](const Tensor& b) {
    KernelWeights4D probe{k.extents, k.weights, b};
    SparseTensor4D out = sparse_conv(in, probe, Stride4{});
    return sum(mul(out.features, out.features));
  };
  CHECK(grad_check(loss_through_bias, k.bias) < 1e-4);
}

TEST_CASE("temporal collapse means across time slices") {
  SparseTensor4D in;
  in.coords = {{0, 0, 0, 0}, {0, 0, 0, 1}, {2, 0, 0, 1}};
  in.features = Tensor::from_data({3, 1}, std::vector<double>{1.0, 3.0, 7.0});
  in.voxel_size = 0.05;

  SparseTensor4D out = temporal_collapse(in);
  REQUIRE(out.count() == 2);
  CHECK(out.coords[0] == Coord4{0, 0, 0, 0});
  CHECK(out.features.at({0, 0}) == 2.0);  // mean of 1 and 3
  CHECK(out.coords[1] == Coord4{2, 0, 0, 0});
  CHECK(out.features.at({1, 0}) == 7.0);
  CHECK(out.temporal_stride == 1);

  // Single-time input: unchanged aside from the t label.
  SparseTensor4D single;
  single.coords = {{1, 2, 3, 5}};
  single.features = Tensor::from_data({1, 2}, std::vector<double>{0.5, -0.5});
  single.voxel_size = 0.1;
  SparseTensor4D collapsed = temporal_collapse(single);
  CHECK(collapsed.coords[0] == Coord4{1, 2, 3, 0});
  CHECK(collapsed.features.at({0, 0}) == 0.5);
  CHECK(collapsed.features.at({0, 1}) == -0.5);

  // Gradient flows through the mean pooling.
  std::mt19937_64 rng(33);
  SparseTensor4D big = random_sparse(rng, 3, 3, 2, 0.5);
  auto loss = [&](const Tensor& f) {
    SparseTensor4D probe = big;
    probe.features = f;
    SparseTensor4D c = temporal_collapse(probe);
    return sum(mul(c.features, c.features));
  };
  CHECK(grad_check(loss, big.features) < 1e-4);
}

TEST_CASE("sparse text dump is line per voxel in lexicographic order") {
  SparseTensor4D s;
  s.coords = {{0, 0, 0, 0}, {0, 0, 1, 0}};
  s.features = Tensor::from_data({2, 2}, std::vector<double>{1, 2, 3, 4});
  s.voxel_size = 0.05;
  std::ostringstream os;
  dump_sparse_text(s, os);
  CHECK(os.str() == "0 0 0 0 1 2\n0 0 1 0 3 4\n");
}

}  // TEST_SUITE
