#include "scsf/skipattn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace scsf {

AttentionConfig AttentionConfig::create(int d_model, int d_out, int heads, int d_k, int d_v,
                                        int fourier_freqs, int pos_hidden, int kv_cap,
                                        std::mt19937_64& rng) {
  if (heads < 1 || d_k < 1 || d_v < 1) throw std::invalid_argument("attention sizes must be >= 1");
  if (fourier_freqs < 1) throw std::invalid_argument("fourier frequency count must be >= 1");
  AttentionConfig cfg;
  cfg.heads = heads;
  cfg.d_k = d_k;
  cfg.d_v = d_v;
  cfg.fourier_freqs = fourier_freqs;
  cfg.kv_cap = kv_cap;
  cfg.pos_mlp = Mlp::create({6 * fourier_freqs, pos_hidden, d_model}, rng);
  const double proj_std = 1.0 / std::sqrt(static_cast<double>(d_model));
  for (int h = 0; h < heads; ++h) {
    AttentionHead head;
    head.wq = Tensor::randn({d_model, d_k}, rng, proj_std, true);
    head.wk = Tensor::randn({d_model, d_k}, rng, proj_std, true);
    head.wv = Tensor::randn({d_model, d_v}, rng, proj_std, true);
    cfg.head_weights.push_back(std::move(head));
  }
  cfg.out_weight =
      Tensor::randn({heads * d_v, d_out}, rng, 1.0 / std::sqrt(double(heads) * d_v), true);
  cfg.out_bias = Tensor::zeros({d_out}, true);
  return cfg;
}

void AttentionConfig::collect(const std::string& prefix, std::vector<Parameter>& out) const {
  pos_mlp.collect(prefix + ".pos", out);
  for (size_t h = 0; h < head_weights.size(); ++h) {
    const std::string base = prefix + ".h" + std::to_string(h);
    out.push_back({base + ".wq", head_weights[h].wq});
    out.push_back({base + ".wk", head_weights[h].wk});
    out.push_back({base + ".wv", head_weights[h].wv});
  }
  out.push_back({prefix + ".out.w", out_weight});
  out.push_back({prefix + ".out.b", out_bias});
}

Eigen::RowVectorXd fourier_basis(const Eigen::Vector3d& centroid, const GridGeometry& geom,
                                 int freqs, bool* clamped) {
  const Eigen::Vector3d half =
      0.5 * Eigen::Vector3d(geom.nx, geom.ny, geom.nz) * geom.voxel_size;
  const Eigen::Vector3d center = geom.origin + half;
  bool hit_bounds = false;
  Eigen::RowVectorXd basis(6 * freqs);
  for (int a = 0; a < 3; ++a) {
    double u = (centroid[a] - center[a]) / half[a];
    if (u < -1.0 || u > 1.0) {
      hit_bounds = true;
      u = std::clamp(u, -1.0, 1.0);
    }
    for (int f = 0; f < freqs; ++f) {
      const double arg = std::ldexp(1.0, f) * EIGEN_PI * u;
      basis[a * 2 * freqs + 2 * f] = std::sin(arg);
      basis[a * 2 * freqs + 2 * f + 1] = std::cos(arg);
    }
  }
  if (clamped) *clamped = hit_bounds;
  return basis;
}

Tensor grid_fourier_basis(const GridGeometry& geom, int freqs) {
  const int cells = static_cast<int>(geom.cell_count());
  Vec data(static_cast<std::int64_t>(cells) * 6 * freqs);
  MatMap m(data.data(), cells, 6 * freqs);
  for (int i = 0; i < geom.nx; ++i) {
    for (int j = 0; j < geom.ny; ++j) {
      for (int k = 0; k < geom.nz; ++k) {
        m.row(geom.index(i, j, k)) = fourier_basis(geom.centroid(i, j, k), geom, freqs);
      }
    }
  }
  return Tensor::from_vec({cells, 6 * freqs}, std::move(data));
}

Tensor fourier_pos_embed(const Eigen::Vector3d& centroid, const GridGeometry& geom, int freqs,
                         const Mlp& mlp, bool* clamped) {
  Eigen::RowVectorXd basis = fourier_basis(centroid, geom, freqs, clamped);
  Tensor row = Tensor::from_data({1, static_cast<int>(basis.size())},
                                 std::span<const double>(basis.data(), basis.size()));
  return mlp.forward(row);
}

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) {
    throw std::invalid_argument("attention operands must be rank 2");
  }
  if (q.cols() != k.cols()) throw std::invalid_argument("attention: q/k width mismatch");
  if (k.rows() != v.rows()) throw std::invalid_argument("attention: k/v row mismatch");
  const int n = q.rows(), m = k.rows(), dk = q.cols(), dv = v.cols();
  if (m == 0) throw std::invalid_argument("attention: empty key set");
  const double s = 1.0 / std::sqrt(static_cast<double>(dk));

  // attn = softmax(q k^T * s) row-wise, kept for the backward pass.
  MatRM attn = q.matrix() * k.matrix().transpose() * s;
  for (int i = 0; i < n; ++i) {
    auto row = attn.row(i);
    const double mx = row.maxCoeff();
    row = (row.array() - mx).exp();
    row /= row.sum();
  }
  Vec out(static_cast<std::int64_t>(n) * dv);
  MatMap(out.data(), n, dv).noalias() = attn * v.matrix();

  return make_op(
      {n, dv}, std::move(out), {q, k, v},
      [attn = std::move(attn), q, k, v, n, m, dk, dv, s](const Vec& g,
                                                         const std::vector<Vec*>& pg) {
        ConstMatMap gm(g.data(), n, dv);
        if (pg[2]) MatMap(pg[2]->data(), m, dv).noalias() += attn.transpose() * gm;
        if (!pg[0] && !pg[1]) return;
        MatRM d_attn = gm * v.matrix().transpose();  // [n, m]
        // Softmax backward per row, then the logit scale.
        MatRM d_logits(n, m);
        for (int i = 0; i < n; ++i) {
          const double dot = d_attn.row(i).dot(attn.row(i));
          d_logits.row(i) =
              (attn.row(i).array() * (d_attn.row(i).array() - dot)).matrix() * s;
        }
        if (pg[0]) MatMap(pg[0]->data(), n, dk).noalias() += d_logits * k.matrix();
        if (pg[1]) MatMap(pg[1]->data(), m, dk).noalias() += d_logits.transpose() * q.matrix();
      });
}

DenseGrid cross_attention_skip(const DenseGrid& queries, const DenseGrid& kv,
                               const AttentionConfig& cfg) {
  if (!queries.geom.same_as(kv.geom)) {
    throw std::invalid_argument("cross_attention_skip: grid geometry mismatch");
  }
  if (queries.channels() != kv.channels() || queries.channels() != cfg.model_width() ||
      cfg.pos_mlp.out_width() != cfg.model_width()) {
    throw std::invalid_argument("cross_attention_skip: feature width mismatch");
  }
  const int cells = static_cast<int>(queries.geom.cell_count());

  Tensor basis = grid_fourier_basis(queries.geom, cfg.fourier_freqs);
  Tensor pos = cfg.pos_mlp.forward(basis);
  Tensor q_in = add(queries.features, pos);
  Tensor kv_in = add(kv.features, pos);

  Tensor kv_sel = kv_in;
  if (cfg.kv_cap > 0 && cells > cfg.kv_cap) {
    // Deterministic top-|feature-norm| subsampling of the key/value set.
    ConstMatMap fm(kv.features.data(), cells, kv.channels());
    std::vector<int> order(cells);
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> norms(cells);
    for (int i = 0; i < cells; ++i) norms[i] = fm.row(i).squaredNorm();
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      if (norms[a] != norms[b]) return norms[a] > norms[b];
      return a < b;
    });
    order.resize(cfg.kv_cap);
    std::sort(order.begin(), order.end());
    kv_sel = gather_rows(kv_in, order);
  }

  std::vector<Tensor> head_outs;
  head_outs.reserve(cfg.head_weights.size());
  for (const AttentionHead& head : cfg.head_weights) {
    Tensor hq = matmul(q_in, head.wq);
    Tensor hk = matmul(kv_sel, head.wk);
    Tensor hv = matmul(kv_sel, head.wv);
    head_outs.push_back(scaled_dot_attention(hq, hk, hv));
  }
  Tensor cat = concat(head_outs, 1);
  Tensor out = add(matmul(cat, cfg.out_weight), cfg.out_bias);

  DenseGrid result;
  result.geom = queries.geom;
  result.features = out;
  return result;
}

FuseWeights FuseWeights::create(int d_decoder, int d_skip, std::mt19937_64& rng) {
  FuseWeights w;
  w.weight = Tensor::randn({d_decoder + d_skip, d_decoder}, rng,
                           1.0 / std::sqrt(double(d_decoder + d_skip)), true);
  w.bias = Tensor::zeros({d_decoder}, true);
  return w;
}

void FuseWeights::collect(const std::string& prefix, std::vector<Parameter>& out) const {
  out.push_back({prefix + ".w", weight});
  out.push_back({prefix + ".b", bias});
}

DenseGrid fuse_skip(const DenseGrid& decoder, const DenseGrid& skipped, const FuseWeights& w) {
  if (!decoder.geom.same_as(skipped.geom)) {
    throw std::invalid_argument("fuse_skip: grid geometry mismatch");
  }
  if (decoder.channels() + skipped.channels() != w.weight.extent(0)) {
    throw std::invalid_argument("fuse_skip: projection width mismatch");
  }
  std::vector<Tensor> parts{decoder.features, skipped.features};
  Tensor cat = concat(parts, 1);
  DenseGrid result;
  result.geom = decoder.geom;
  result.features = add(matmul(cat, w.weight), w.bias);
  return result;
}

}  // namespace scsf
