#include <doctest.h>

#include <algorithm>
#include <random>

#include "scsf/skipattn.hpp"
#include "test_util.hpp"

using namespace scsf;
using scsf_test::random_tensor;

namespace {

GridGeometry grid3(int n, double v = 0.1) {
  GridGeometry g;
  g.nx = g.ny = g.nz = n;
  g.voxel_size = v;
  g.origin = Eigen::Vector3d::Zero();
  return g;
}

DenseGrid random_grid(const GridGeometry& geom, int channels, std::mt19937_64& rng) {
  DenseGrid g;
  g.geom = geom;
  g.features = random_tensor({static_cast<int>(geom.cell_count()), channels}, rng);
  return g;
}

}  // namespace

TEST_SUITE("skipattn") {

TEST_CASE("fourier basis center value, injectivity, embedding shape") {
  GridGeometry geom = grid3(4);
  const Eigen::Vector3d center = geom.origin + Eigen::Vector3d(0.2, 0.2, 0.2);

  // Grid center normalizes to (0,0,0): all sin terms 0, all cos terms 1.
  Eigen::RowVectorXd basis = fourier_basis(center, geom, 3);
  REQUIRE(basis.size() == 18);
  for (int a = 0; a < 3; ++a) {
    for (int f = 0; f < 3; ++f) {
      CHECK_NEAR(basis[a * 6 + 2 * f], 0.0, 1e-15);
      CHECK_NEAR(basis[a * 6 + 2 * f + 1], 1.0, 1e-15);
    }
  }

  // Distinct centroids give distinct bases (base frequency is injective).
  Eigen::RowVectorXd b1 = fourier_basis(geom.centroid(0, 0, 0), geom, 3);
  Eigen::RowVectorXd b2 = fourier_basis(geom.centroid(1, 0, 0), geom, 3);
  CHECK((b1 - b2).cwiseAbs().maxCoeff() > 1e-6);

  // Out-of-bounds positions clamp and get flagged.
  bool clamped = false;
  fourier_basis(Eigen::Vector3d(10, 0, 0), geom, 3, &clamped);
  CHECK(clamped);
  clamped = true;
  fourier_basis(center, geom, 3, &clamped);
  CHECK(!clamped);

  // Embedding shape equals the MLP output width for any frequency count.
  std::mt19937_64 rng(3);
  for (int freqs : {1, 4, 6}) {
    Mlp mlp = Mlp::create({6 * freqs, 8, 5}, rng);
    Tensor e = fourier_pos_embed(center, geom, freqs, mlp);
    CHECK(e.shape() == std::vector<int>{1, 5});
  }
}

TEST_CASE("scaled dot attention rows are convex weights over values") {
  std::mt19937_64 rng(5);
  Tensor q = random_tensor({6, 4}, rng);
  Tensor k = random_tensor({9, 4}, rng);
  Tensor v = random_tensor({9, 3}, rng);

  // Recompute the weights through the public softmax primitive.
  Tensor logits = scale(matmul(q, transpose(k)), 1.0 / 2.0);
  Tensor weights = softmax(logits, 1);
  for (int i = 0; i < 6; ++i) {
    double total = 0;
    for (int j = 0; j < 9; ++j) {
      CHECK(weights.at({i, j}) >= 0.0);
      total += weights.at({i, j});
    }
    CHECK_NEAR(total, 1.0, 1e-12);
  }
  Tensor expected = matmul(weights, v);
  Tensor fused = scaled_dot_attention(q, k, v);
  for (int i = 0; i < fused.size(); ++i) {
    CHECK_NEAR(fused.data()[i], expected.data()[i], 1e-12);
  }

  // Permuting the key/value set leaves every query output unchanged.
  std::vector<int> perm(9);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Tensor kp = gather_rows(k, perm);
  Tensor vp = gather_rows(v, perm);
  Tensor permuted = scaled_dot_attention(q, kp, vp);
  for (int i = 0; i < fused.size(); ++i) {
    CHECK_NEAR(permuted.data()[i], fused.data()[i], 1e-12);
  }

  // Singleton key set: output equals the value row regardless of the query.
  Tensor k1 = random_tensor({1, 4}, rng);
  Tensor v1 = random_tensor({1, 3}, rng);
  Tensor single = scaled_dot_attention(q, k1, v1);
  for (int i = 0; i < 6; ++i) {
    for (int c = 0; c < 3; ++c) CHECK_NEAR(single.at({i, c}), v1.at({0, c}), 1e-12);
  }

  CHECK(grad_check(
            [&](const Tensor& t) {
              Tensor o = scaled_dot_attention(t, k, v);
              return sum(mul(o, o));
            },
            q) < 1e-4);
  CHECK(grad_check(
            [&](const Tensor& t) {
              Tensor o = scaled_dot_attention(q, t, v);
              return sum(mul(o, o));
            },
            k) < 1e-4);
  CHECK(grad_check(
            [&](const Tensor& t) {
              Tensor o = scaled_dot_attention(q, k, t);
              return sum(mul(o, o));
            },
            v) < 1e-4);
}

TEST_CASE("cross attention skip: singleton equivalence and equal-logit averaging") {
  std::mt19937_64 rng(7);
  GridGeometry geom = grid3(2);
  DenseGrid q = random_grid(geom, 4, rng);
  DenseGrid kv = random_grid(geom, 4, rng);
  AttentionConfig cfg = AttentionConfig::create(4, 4, 2, 3, 3, 2, 8, 0, rng);

  // Zero key projections make all logits equal: every query receives the
  // projection of the mean value row.
  for (AttentionHead& h : cfg.head_weights) {
    h.wk = Tensor::zeros({4, 3});
  }
  DenseGrid out = cross_attention_skip(q, kv, cfg);
  {
    NoGradGuard ng;
    Tensor basis = grid_fourier_basis(geom, cfg.fourier_freqs);
    Tensor pos = cfg.pos_mlp.forward(basis);
    Tensor kv_in = add(kv.features, pos);
    std::vector<Tensor> head_means;
    for (const AttentionHead& h : cfg.head_weights) {
      Tensor hv = matmul(kv_in, h.wv);
      Eigen::RowVectorXd mean = ConstMatMap(hv.data(), hv.rows(), hv.cols()).colwise().mean();
      head_means.push_back(Tensor::from_data(
          {1, static_cast<int>(mean.size())}, std::span<const double>(mean.data(), mean.size())));
    }
    Tensor cat = concat(head_means, 1);
    Tensor expected = add(matmul(cat, cfg.out_weight), cfg.out_bias);
    for (int i = 0; i < out.features.rows(); ++i) {
      for (int c = 0; c < 4; ++c) {
        CHECK_NEAR(out.features.at({i, c}), expected.at({0, c}), 1e-10);
      }
    }
  }

  CHECK_THROWS_AS(cross_attention_skip(q, random_grid(grid3(3), 4, rng), cfg),
                  std::invalid_argument);
}

TEST_CASE("kv cap keeps the top-norm voxels deterministically") {
  std::mt19937_64 rng(11);
  GridGeometry geom = grid3(2);  // 8 cells
  DenseGrid q = random_grid(geom, 3, rng);
  DenseGrid kv = DenseGrid::zeros(geom, 3);
  // Give two cells dominant norms; the rest stay zero.
  MatMap fm(kv.features.data(), 8, 3);
  fm.row(5).setConstant(3.0);
  fm.row(2).setConstant(2.0);

  AttentionConfig capped = AttentionConfig::create(3, 4, 2, 3, 3, 2, 8, 2, rng);
  AttentionConfig full = capped;
  full.kv_cap = 0;

  DenseGrid out_capped = cross_attention_skip(q, kv, capped);

  // Reference: restrict the kv grid to rows {2,5} by hand via the fused op.
  NoGradGuard ng;
  Tensor basis = grid_fourier_basis(geom, capped.fourier_freqs);
  Tensor pos = capped.pos_mlp.forward(basis);
  Tensor q_in = add(q.features, pos);
  Tensor kv_in = add(kv.features, pos);
  std::vector<int> keep{2, 5};
  Tensor kv_sel = gather_rows(kv_in, keep);
  std::vector<Tensor> heads;
  for (const AttentionHead& h : capped.head_weights) {
    heads.push_back(scaled_dot_attention(matmul(q_in, h.wq), matmul(kv_sel, h.wk),
                                         matmul(kv_sel, h.wv)));
  }
  Tensor cat = concat(heads, 1);
  Tensor expected = add(matmul(cat, capped.out_weight), capped.out_bias);
  for (int i = 0; i < expected.size(); ++i) {
    CHECK_NEAR(out_capped.features.data()[i], expected.data()[i], 1e-12);
  }
}

TEST_CASE("fuse_skip passes decoder through under identity projection") {
  std::mt19937_64 rng(13);
  GridGeometry geom = grid3(2);
  DenseGrid dec = random_grid(geom, 3, rng);
  DenseGrid skip = DenseGrid::zeros(geom, 2);

  FuseWeights w;
  std::vector<double> wd(5 * 3, 0.0);
  for (int i = 0; i < 3; ++i) wd[i * 3 + i] = 1.0;  // identity on the decoder block
  w.weight = Tensor::from_data({5, 3}, wd);
  w.bias = Tensor::zeros({3});
  DenseGrid out = fuse_skip(dec, skip, w);
  REQUIRE(out.channels() == 3);  // output width equals decoder width
  for (int i = 0; i < out.features.size(); ++i) {
    CHECK(out.features.data()[i] == dec.features.data()[i]);
  }

  // Gradient flows to both inputs.
  DenseGrid skip_live = random_grid(geom, 2, rng);
  FuseWeights learned = FuseWeights::create(3, 2, rng);
  CHECK(grad_check(
            [&](const Tensor& t) {
              DenseGrid probe = dec;
              probe.features = t;
              DenseGrid o = fuse_skip(probe, skip_live, learned);
              return sum(mul(o.features, o.features));
            },
            dec.features) < 1e-4);
  CHECK(grad_check(
            [&](const Tensor& t) {
              DenseGrid probe = skip_live;
              probe.features = t;
              DenseGrid o = fuse_skip(dec, probe, learned);
              return sum(mul(o.features, o.features));
            },
            skip_live.features) < 1e-4);
}

TEST_CASE("whole skip block passes grad_check on toy extents") {
  std::mt19937_64 rng(17);
  GridGeometry geom = grid3(2);
  DenseGrid q = random_grid(geom, 3, rng);
  DenseGrid kv = random_grid(geom, 3, rng);
  AttentionConfig cfg = AttentionConfig::create(3, 3, 2, 2, 2, 2, 6, 0, rng);
  FuseWeights fw = FuseWeights::create(3, 3, rng);

  auto block = [&](const DenseGrid& qq, const DenseGrid& kk) {
    DenseGrid skipped = cross_attention_skip(qq, kk, cfg);
    DenseGrid fused = fuse_skip(qq, skipped, fw);
    return sum(mul(fused.features, fused.features));
  };

  CHECK(grad_check(
            [&](const Tensor& t) {
              DenseGrid probe = q;
              probe.features = t;
              return block(probe, kv);
            },
            q.features) < 1e-4);
  CHECK(grad_check(
            [&](const Tensor& t) {
              DenseGrid probe = kv;
              probe.features = t;
              return block(q, probe);
            },
            kv.features) < 1e-4);
  for (size_t h = 0; h < cfg.head_weights.size(); ++h) {
    CHECK(grad_check(
              [&](const Tensor& t) {
                AttentionConfig probe = cfg;
                probe.head_weights[h].wq = t;
                DenseGrid skipped = cross_attention_skip(q, kv, probe);
                DenseGrid fused = fuse_skip(q, skipped, fw);
                return sum(mul(fused.features, fused.features));
              },
              cfg.head_weights[h].wq) < 1e-4);
  }
  CHECK(grad_check(
            [&](const Tensor& t) {
              AttentionConfig probe = cfg;
              probe.pos_mlp.layers[0].weight = t;
              DenseGrid skipped = cross_attention_skip(q, kv, probe);
              DenseGrid fused = fuse_skip(q, skipped, fw);
              return sum(mul(fused.features, fused.features));
            },
            cfg.pos_mlp.layers[0].weight) < 1e-4);
}

}  // TEST_SUITE
