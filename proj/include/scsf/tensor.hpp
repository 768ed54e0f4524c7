#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

// Dense f64 tensors with dynamic tape-based reverse-mode differentiation.
// Tensors are immutable after construction except through optimizer steps;
// the tape of one training step is single-threaded and freed by backward().

namespace scsf {

using Vec = Eigen::VectorXd;
using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<MatRM>;
using ConstMatMap = Eigen::Map<const MatRM>;

namespace detail {
struct TensorNode;
}

// Backward callback of an op node: reads the node's output gradient and
// accumulates (+=) into the parents' gradient buffers. A null pointer marks
// a parent that does not need a gradient.
using BackwardFn = std::function<void(const Vec& out_grad, const std::vector<Vec*>& parent_grads)>;

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor constant(std::vector<int> shape, double value, bool requires_grad = false);
  static Tensor from_data(std::vector<int> shape, std::span<const double> values,
                          bool requires_grad = false);
  static Tensor from_vec(std::vector<int> shape, Vec values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  // Independent N(0, stddev^2) entries from the given generator.
  static Tensor randn(std::vector<int> shape, std::mt19937_64& rng, double stddev,
                      bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const;
  int rank() const;
  std::int64_t size() const;
  int extent(int axis) const;

  const double* data() const;
  double* data();
  const Vec& vec() const;
  double value() const;  // single-element tensors
  double at(std::initializer_list<int> idx) const;

  // Rank-2 views.
  ConstMatMap matrix() const;
  MatMap matrix();
  int rows() const { return extent(0); }
  int cols() const { return extent(1); }

  bool requires_grad() const;
  void set_requires_grad(bool value);  // leaves only
  bool has_grad() const;
  const Vec& grad_vec() const;
  Tensor grad() const;  // copy of the gradient as a plain tensor
  void zero_grad();

  // Drops this tensor from the tape: same storage, no history.
  Tensor detach() const;

 private:
  explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::TensorNode> node_;

  friend Tensor make_op(std::vector<int> shape, Vec data, std::vector<Tensor> parents,
                        BackwardFn backward);
  friend void backward(const Tensor& loss);
};

// ---------------------------------------------------------------------------
// Primitive ops. Every op validates shapes, checks its output for NaN/Inf
// (non-finite values are an error state), and records a tape node when any
// input requires a gradient and grads are enabled.
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);

// add/mul accept equal shapes, a single-element operand, or [r,c] + [c].
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor relu(const Tensor& x);
Tensor concat(std::span<const Tensor> parts, int axis);
Tensor softmax(const Tensor& x, int axis);
// Mean of -log softmax(logits)[i, labels[i]] over rows; logits is [n, c].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);
// Weighted variant: sum(w_i * ce_i) / sum(w_i).
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels,
                     std::span<const double> sample_weights);
Tensor sum(const Tensor& x);
Tensor gather_rows(const Tensor& x, std::span<const int> rows);

// Bridge for module-defined ops (sparse/dense convolutions, interpolation...).
Tensor make_op(std::vector<int> shape, Vec data, std::vector<Tensor> parents, BackwardFn backward);

// Populates gradients of every requires_grad tensor reachable from the scalar
// loss, then frees the tape. A second call on the same root is an error.
void backward(const Tensor& loss);

bool grad_enabled();
// Suppresses tape recording in its scope (inference/eval paths).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Max over entries of |analytic - central difference| / max(1, |analytic|),
// for a deterministic scalar-valued f differentiated at x.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                  double eps = 1e-5);

// ---------------------------------------------------------------------------
// Parameters, optimizer, checkpoints
// ---------------------------------------------------------------------------

struct Parameter {
  std::string name;
  Tensor tensor;
};

// Throws if two parameters share a name.
void check_unique_names(std::span<const Parameter> params);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class AdamW {
 public:
  using Config = AdamWConfig;

  explicit AdamW(Config config = Config{}) : config_(config) {}

  // Standard decoupled-weight-decay update; moments persist between steps
  // keyed by parameter name. Throws if a parameter is missing its gradient.
  void step(std::span<Parameter> params, double lr, double weight_decay);
  void zero_grad(std::span<Parameter> params);

  std::int64_t step_count() const { return step_count_; }
  void save_state(const std::string& path) const;
  void load_state(const std::string& path);

 private:
  struct Moments {
    Vec m;
    Vec v;
  };
  Config config_;
  std::int64_t step_count_ = 0;
  std::vector<std::pair<std::string, Moments>> moments_;  // insertion-ordered

  Moments& moments_for(const std::string& name, std::int64_t size);
};

// Versioned binary container: magic "SCSFKIT1", then per parameter
// (u32 name length, name bytes, u32 rank, u32 extents..., f64 payload), LE.
void save_checkpoint(const std::string& path, std::span<const Parameter> params);
std::vector<Parameter> load_checkpoint(const std::string& path);
// Loads by name into existing parameters; shapes must match, every parameter
// must be present in the file.
void load_checkpoint_into(const std::string& path, std::span<Parameter> params);

}  // namespace scsf
