#pragma once

#include <Eigen/Core>

#include <random>
#include <string>
#include <vector>

#include "scsf/densegrid.hpp"
#include "scsf/mlp.hpp"
#include "scsf/tensor.hpp"

// Attention-based skip connections: Fourier positional embeddings, multi-head
// cross-attention from up-convolution voxels (queries) to dilated-convolution
// voxels (keys/values), and fusion with the decoder features.

namespace scsf {

struct AttentionHead {
  Tensor wq;  // [D, d_k]
  Tensor wk;  // [D, d_k]
  Tensor wv;  // [D, d_v]
};

struct AttentionConfig {
  int heads = 4;
  int d_k = 16;
  int d_v = 16;
  int fourier_freqs = 6;
  // Deterministic top-|feature-norm| cap on the key/value set; 0 = all voxels.
  int kv_cap = 0;
  // Shared between the query and key/value sides; output width must match the
  // grid feature width (embeddings are added to the features).
  Mlp pos_mlp;
  std::vector<AttentionHead> head_weights;
  Tensor out_weight;  // [heads*d_v, d_out]
  Tensor out_bias;    // [d_out]

  static AttentionConfig create(int d_model, int d_out, int heads, int d_k, int d_v,
                                int fourier_freqs, int pos_hidden, int kv_cap,
                                std::mt19937_64& rng);
  int model_width() const { return head_weights.front().wq.extent(0); }
  int out_width() const { return out_weight.extent(1); }
  void collect(const std::string& prefix, std::vector<Parameter>& out) const;
};

// [sin(2^f pi x), cos(2^f pi x)] for f = 0..freqs-1 per axis, on coordinates
// normalized to [-1,1] by the grid half-extents; out-of-bounds positions are
// clamped (and flagged when a sink is given).
Eigen::RowVectorXd fourier_basis(const Eigen::Vector3d& centroid, const GridGeometry& geom,
                                 int freqs, bool* clamped = nullptr);

// Basis rows for every cell centroid of a grid, as a constant tensor.
Tensor grid_fourier_basis(const GridGeometry& geom, int freqs);

// Single-point embedding: MLP applied to the Fourier basis.
Tensor fourier_pos_embed(const Eigen::Vector3d& centroid, const GridGeometry& geom, int freqs,
                         const Mlp& mlp, bool* clamped = nullptr);

// softmax(q k^T / sqrt(d_k)) v as one fused differentiable op.
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v);

// Per head: Q from query features + positional embedding, K/V from kv
// features + positional embeddings; head outputs are concatenated and
// linearly projected. Grids must share geometry and feature width.
DenseGrid cross_attention_skip(const DenseGrid& queries, const DenseGrid& kv,
                               const AttentionConfig& cfg);

// Channel-wise concatenation followed by a learned projection back to the
// decoder width.
struct FuseWeights {
  Tensor weight;  // [d_decoder + d_skip, d_decoder]
  Tensor bias;    // [d_decoder]
  static FuseWeights create(int d_decoder, int d_skip, std::mt19937_64& rng);
  void collect(const std::string& prefix, std::vector<Parameter>& out) const;
};

DenseGrid fuse_skip(const DenseGrid& decoder, const DenseGrid& skipped, const FuseWeights& w);

}  // namespace scsf
