#include "scsf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

namespace scsf {

namespace detail {

struct TensorNode {
  std::vector<int> shape;
  Vec data;
  Vec grad;  // size 0 until first accumulation
  bool requires_grad = false;
  bool is_leaf = true;
  bool consumed = false;  // backward already ran through this root
  std::vector<std::shared_ptr<TensorNode>> parents;
  BackwardFn backward_fn;
};

}  // namespace detail

using detail::TensorNode;

namespace {

thread_local bool g_grad_enabled = true;

std::int64_t numel(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int e : shape) n *= e;
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

void validate_shape(const std::vector<int>& shape) {
  for (int e : shape) {
    if (e < 0) throw std::invalid_argument("tensor extent must be >= 0, got " + shape_str(shape));
  }
}

void ensure_finite(const Vec& v, const char* op) {
  if (!v.allFinite()) {
    throw std::runtime_error(std::string(op) + ": non-finite value in result");
  }
}

std::shared_ptr<TensorNode> new_leaf(std::vector<int> shape, Vec data, bool requires_grad) {
  validate_shape(shape);
  if (data.size() != numel(shape)) {
    throw std::invalid_argument("data length does not match shape " + shape_str(shape));
  }
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  node->is_leaf = true;
  return node;
}

// Collapses a shape around `axis` into (outer, n, inner).
void axis_split(const std::vector<int>& shape, int axis, std::int64_t& outer, std::int64_t& n,
                std::int64_t& inner) {
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= shape[i];
  n = shape[axis];
  for (size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  std::int64_t n = numel(shape);
  return Tensor(new_leaf(std::move(shape), Vec::Zero(n), requires_grad));
}

Tensor Tensor::constant(std::vector<int> shape, double value, bool requires_grad) {
  std::int64_t n = numel(shape);
  return Tensor(new_leaf(std::move(shape), Vec::Constant(n, value), requires_grad));
}

Tensor Tensor::from_data(std::vector<int> shape, std::span<const double> values,
                         bool requires_grad) {
  Vec v(values.size());
  std::copy(values.begin(), values.end(), v.data());
  return Tensor(new_leaf(std::move(shape), std::move(v), requires_grad));
}

Tensor Tensor::from_vec(std::vector<int> shape, Vec values, bool requires_grad) {
  return Tensor(new_leaf(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(new_leaf({}, Vec::Constant(1, value), requires_grad));
}

Tensor Tensor::randn(std::vector<int> shape, std::mt19937_64& rng, double stddev,
                     bool requires_grad) {
  std::normal_distribution<double> dist(0.0, stddev);
  Vec v(numel(shape));
  for (std::int64_t i = 0; i < v.size(); ++i) v[i] = dist(rng);
  return Tensor(new_leaf(std::move(shape), std::move(v), requires_grad));
}

const std::vector<int>& Tensor::shape() const { return node_->shape; }
int Tensor::rank() const { return static_cast<int>(node_->shape.size()); }
std::int64_t Tensor::size() const { return node_->data.size(); }

int Tensor::extent(int axis) const {
  if (axis < 0 || axis >= rank()) throw std::invalid_argument("axis out of range");
  return node_->shape[axis];
}

const double* Tensor::data() const { return node_->data.data(); }
double* Tensor::data() { return node_->data.data(); }
const Vec& Tensor::vec() const { return node_->data; }

double Tensor::value() const {
  if (size() != 1) throw std::invalid_argument("value() requires a single-element tensor");
  return node_->data[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
  if (static_cast<int>(idx.size()) != rank()) throw std::invalid_argument("at(): rank mismatch");
  std::int64_t flat = 0;
  int axis = 0;
  for (int i : idx) {
    if (i < 0 || i >= node_->shape[axis]) throw std::invalid_argument("at(): index out of range");
    flat = flat * node_->shape[axis] + i;
    ++axis;
  }
  return node_->data[flat];
}

ConstMatMap Tensor::matrix() const {
  if (rank() != 2) throw std::invalid_argument("matrix() requires rank 2, got " + shape_str(shape()));
  return ConstMatMap(node_->data.data(), node_->shape[0], node_->shape[1]);
}

MatMap Tensor::matrix() {
  if (rank() != 2) throw std::invalid_argument("matrix() requires rank 2, got " + shape_str(shape()));
  return MatMap(node_->data.data(), node_->shape[0], node_->shape[1]);
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
  if (!node_->is_leaf) throw std::invalid_argument("set_requires_grad: not a leaf tensor");
  node_->requires_grad = value;
}

bool Tensor::has_grad() const { return node_->grad.size() > 0; }

const Vec& Tensor::grad_vec() const {
  if (!has_grad()) throw std::runtime_error("gradient not populated");
  return node_->grad;
}

Tensor Tensor::grad() const { return Tensor::from_vec(shape(), grad_vec()); }

void Tensor::zero_grad() { node_->grad.resize(0); }

Tensor Tensor::detach() const { return Tensor(new_leaf(shape(), node_->data, false)); }

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tensor make_op(std::vector<int> shape, Vec data, std::vector<Tensor> parents, BackwardFn backward) {
  validate_shape(shape);
  if (data.size() != numel(shape)) {
    throw std::invalid_argument("make_op: data length does not match shape " + shape_str(shape));
  }
  ensure_finite(data, "op");

  bool needs = false;
  if (g_grad_enabled) {
    for (const Tensor& p : parents) needs = needs || p.requires_grad();
  }
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->is_leaf = false;
  node->requires_grad = needs;
  if (needs) {
    node->parents.reserve(parents.size());
    for (const Tensor& p : parents) node->parents.push_back(p.node_);
    node->backward_fn = std::move(backward);
  }
  return Tensor(node);
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw std::invalid_argument("backward: undefined tensor");
  TensorNode* root = loss.node_.get();
  if (root->data.size() != 1) throw std::invalid_argument("backward: root must be a scalar");
  if (root->consumed) throw std::runtime_error("backward: tape already consumed for this root");
  if (!root->requires_grad) throw std::runtime_error("backward: root does not require gradients");

  // Iterative post-order DFS over parents. topo holds owning pointers so the
  // graph stays alive while tape edges are being freed below.
  std::vector<std::shared_ptr<TensorNode>> topo;
  std::unordered_set<TensorNode*> visited;
  std::vector<std::pair<std::shared_ptr<TensorNode>, size_t>> stack;
  stack.emplace_back(loss.node_, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      std::shared_ptr<TensorNode> parent = node->parents[next];
      ++next;
      if (parent->requires_grad && !visited.count(parent.get())) {
        visited.insert(parent.get());
        stack.emplace_back(std::move(parent), 0);
      }
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }

  root->grad = Vec::Ones(1);
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    TensorNode* node = it->get();
    if (!node->backward_fn) continue;
    if (node->grad.size() > 0) {
      std::vector<Vec*> parent_grads(node->parents.size(), nullptr);
      for (size_t i = 0; i < node->parents.size(); ++i) {
        TensorNode* parent = node->parents[i].get();
        if (!parent->requires_grad) continue;
        if (parent->grad.size() == 0) parent->grad = Vec::Zero(parent->data.size());
        parent_grads[i] = &parent->grad;
      }
      node->backward_fn(node->grad, parent_grads);
    }
    node->backward_fn = nullptr;
    node->parents.clear();
    node->consumed = true;
  }
  root->consumed = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) throw std::invalid_argument("matmul: operands must be rank 2");
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  }
  const int m = a.rows(), k = a.cols(), n = b.cols();
  Vec out(static_cast<std::int64_t>(m) * n);
  MatMap(out.data(), m, n).noalias() = a.matrix() * b.matrix();
  return make_op({m, n}, std::move(out), {a, b},
                 [a, b, m, k, n](const Vec& g, const std::vector<Vec*>& pg) {
                   ConstMatMap gm(g.data(), m, n);
                   if (pg[0]) MatMap(pg[0]->data(), m, k).noalias() += gm * b.matrix().transpose();
                   if (pg[1]) MatMap(pg[1]->data(), k, n).noalias() += a.matrix().transpose() * gm;
                 });
}

Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw std::invalid_argument("transpose: operand must be rank 2");
  const int r = x.rows(), c = x.cols();
  Vec out(x.size());
  MatMap(out.data(), c, r) = x.matrix().transpose();
  return make_op({c, r}, std::move(out), {x}, [r, c](const Vec& g, const std::vector<Vec*>& pg) {
    if (pg[0]) MatMap(pg[0]->data(), r, c) += ConstMatMap(g.data(), c, r).transpose();
  });
}

namespace {

enum class BroadcastKind { Equal, ScalarRight, ScalarLeft, RowRight };

BroadcastKind classify_broadcast(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return BroadcastKind::Equal;
  if (b.size() == 1) return BroadcastKind::ScalarRight;
  if (a.size() == 1) return BroadcastKind::ScalarLeft;
  if (a.rank() == 2 && b.rank() == 1 && a.cols() == b.extent(0)) return BroadcastKind::RowRight;
  throw std::invalid_argument("incompatible shapes " + shape_str(a.shape()) + " and " +
                              shape_str(b.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  const BroadcastKind kind = classify_broadcast(a, b);
  Vec out;
  switch (kind) {
    case BroadcastKind::Equal:
      out = a.vec() + b.vec();
      break;
    case BroadcastKind::ScalarRight:
      out = a.vec().array() + b.value();
      break;
    case BroadcastKind::ScalarLeft:
      out = b.vec().array() + a.value();
      break;
    case BroadcastKind::RowRight: {
      out = a.vec();
      MatMap om(out.data(), a.rows(), a.cols());
      om.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.data(), b.size());
      break;
    }
  }
  auto shape = (kind == BroadcastKind::ScalarLeft) ? b.shape() : a.shape();
  return make_op(std::move(shape), std::move(out), {a, b},
                 [a, b, kind](const Vec& g, const std::vector<Vec*>& pg) {
                   auto reduce = [&](Vec* dst, bool other_side) {
                     if (!dst) return;
                     const bool expanded =
                         (kind == BroadcastKind::Equal) ||
                         (kind == BroadcastKind::ScalarRight && !other_side) ||
                         (kind == BroadcastKind::ScalarLeft && other_side) ||
                         (kind == BroadcastKind::RowRight && !other_side);
                     if (expanded) {
                       *dst += g;
                     } else if (kind == BroadcastKind::RowRight) {
                       ConstMatMap gm(g.data(), a.rows(), a.cols());
                       Eigen::Map<Eigen::RowVectorXd>(dst->data(), dst->size()) +=
                           gm.colwise().sum();
                     } else {
                       (*dst)[0] += g.sum();
                     }
                   };
                   reduce(pg[0], false);
                   reduce(pg[1], true);
                 });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const BroadcastKind kind = classify_broadcast(a, b);
  Vec out;
  switch (kind) {
    case BroadcastKind::Equal:
      out = a.vec().cwiseProduct(b.vec());
      break;
    case BroadcastKind::ScalarRight:
      out = a.vec() * b.value();
      break;
    case BroadcastKind::ScalarLeft:
      out = b.vec() * a.value();
      break;
    case BroadcastKind::RowRight: {
      out = a.vec();
      MatMap om(out.data(), a.rows(), a.cols());
      om.array().rowwise() *=
          Eigen::Map<const Eigen::Array<double, 1, Eigen::Dynamic>>(b.data(), b.size());
      break;
    }
  }
  auto shape = (kind == BroadcastKind::ScalarLeft) ? b.shape() : a.shape();
  return make_op(
      std::move(shape), std::move(out), {a, b},
      [a, b, kind](const Vec& g, const std::vector<Vec*>& pg) {
        switch (kind) {
          case BroadcastKind::Equal:
            if (pg[0]) *pg[0] += g.cwiseProduct(b.vec());
            if (pg[1]) *pg[1] += g.cwiseProduct(a.vec());
            break;
          case BroadcastKind::ScalarRight:
            if (pg[0]) *pg[0] += g * b.value();
            if (pg[1]) (*pg[1])[0] += g.dot(a.vec());
            break;
          case BroadcastKind::ScalarLeft:
            if (pg[1]) *pg[1] += g * a.value();
            if (pg[0]) (*pg[0])[0] += g.dot(b.vec());
            break;
          case BroadcastKind::RowRight: {
            ConstMatMap gm(g.data(), a.rows(), a.cols());
            if (pg[0]) {
              MatMap da(pg[0]->data(), a.rows(), a.cols());
              da.array() += gm.array().rowwise() *
                            Eigen::Map<const Eigen::Array<double, 1, Eigen::Dynamic>>(b.data(),
                                                                                      b.size());
            }
            if (pg[1]) {
              Eigen::Map<Eigen::RowVectorXd>(pg[1]->data(), pg[1]->size()) +=
                  (gm.array() * a.matrix().array()).colwise().sum().matrix();
            }
            break;
          }
        }
      });
}

Tensor scale(const Tensor& x, double s) {
  if (!std::isfinite(s)) throw std::invalid_argument("scale: non-finite factor");
  Vec out = x.vec() * s;
  return make_op(x.shape(), std::move(out), {x}, [s](const Vec& g, const std::vector<Vec*>& pg) {
    if (pg[0]) *pg[0] += g * s;
  });
}

Tensor relu(const Tensor& x) {
  Vec out = x.vec().cwiseMax(0.0);
  return make_op(x.shape(), std::move(out), {x}, [x](const Vec& g, const std::vector<Vec*>& pg) {
    if (!pg[0]) return;
    // Subgradient at 0 is taken as 0.
    *pg[0] += (x.vec().array() > 0.0).select(g.array(), 0.0).matrix();
  });
}

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: needs at least one tensor");
  const auto& base = parts[0].shape();
  if (axis < 0 || axis >= parts[0].rank()) throw std::invalid_argument("concat: axis out of range");
  int total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != parts[0].rank()) throw std::invalid_argument("concat: rank mismatch");
    for (int d = 0; d < p.rank(); ++d) {
      if (d != axis && p.shape()[d] != base[d]) {
        throw std::invalid_argument("concat: shapes differ off-axis");
      }
    }
    total += p.shape()[axis];
  }
  std::vector<int> out_shape = base;
  out_shape[axis] = total;

  std::int64_t outer, n_out, inner;
  axis_split(out_shape, axis, outer, n_out, inner);
  Vec out(numel(out_shape));
  std::vector<std::int64_t> offsets(parts.size());
  {
    std::int64_t off = 0;
    for (size_t p = 0; p < parts.size(); ++p) {
      offsets[p] = off;
      const std::int64_t np = parts[p].shape()[axis];
      for (std::int64_t o = 0; o < outer; ++o) {
        std::memcpy(out.data() + (o * n_out + off) * inner,
                    parts[p].data() + o * np * inner, sizeof(double) * np * inner);
      }
      off += np;
    }
  }
  std::vector<Tensor> parents(parts.begin(), parts.end());
  std::vector<std::int64_t> sizes;
  for (const Tensor& p : parts) sizes.push_back(p.shape()[axis]);
  return make_op(out_shape, std::move(out), std::move(parents),
                 [outer, n_out, inner, offsets, sizes](const Vec& g, const std::vector<Vec*>& pg) {
                   for (size_t p = 0; p < pg.size(); ++p) {
                     if (!pg[p]) continue;
                     const std::int64_t np = sizes[p];
                     for (std::int64_t o = 0; o < outer; ++o) {
                       Eigen::Map<Vec>(pg[p]->data() + o * np * inner, np * inner) +=
                           Eigen::Map<const Vec>(g.data() + (o * n_out + offsets[p]) * inner,
                                                 np * inner);
                     }
                   }
                 });
}

Tensor softmax(const Tensor& x, int axis) {
  if (axis < 0 || axis >= x.rank()) throw std::invalid_argument("softmax: axis out of range");
  std::int64_t outer, n, inner;
  axis_split(x.shape(), axis, outer, n, inner);
  Vec out(x.size());
  const double* in = x.data();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t i = 0; i < inner; ++i) {
      const std::int64_t base = o * n * inner + i;
      double mx = in[base];
      for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, in[base + j * inner]);
      double denom = 0.0;
      for (std::int64_t j = 0; j < n; ++j) {
        const double e = std::exp(in[base + j * inner] - mx);
        out[base + j * inner] = e;
        denom += e;
      }
      for (std::int64_t j = 0; j < n; ++j) out[base + j * inner] /= denom;
    }
  }
  Vec out_copy = out;  // captured for the backward pass
  return make_op(x.shape(), std::move(out),
                 {x}, [outer, n, inner, s = std::move(out_copy)](const Vec& g,
                                                                 const std::vector<Vec*>& pg) {
                   if (!pg[0]) return;
                   Vec& dx = *pg[0];
                   for (std::int64_t o = 0; o < outer; ++o) {
                     for (std::int64_t i = 0; i < inner; ++i) {
                       const std::int64_t base = o * n * inner + i;
                       double dot = 0.0;
                       for (std::int64_t j = 0; j < n; ++j) {
                         const std::int64_t k = base + j * inner;
                         dot += g[k] * s[k];
                       }
                       for (std::int64_t j = 0; j < n; ++j) {
                         const std::int64_t k = base + j * inner;
                         dx[k] += s[k] * (g[k] - dot);
                       }
                     }
                   }
                 });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  return cross_entropy(logits, labels, {});
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels,
                     std::span<const double> sample_weights) {
  if (logits.rank() != 2) throw std::invalid_argument("cross_entropy: logits must be rank 2");
  const int n = logits.rows(), c = logits.cols();
  if (static_cast<int>(labels.size()) != n) {
    throw std::invalid_argument("cross_entropy: label count does not match rows");
  }
  const bool weighted = !sample_weights.empty();
  if (weighted && static_cast<int>(sample_weights.size()) != n) {
    throw std::invalid_argument("cross_entropy: weight count does not match rows");
  }
  for (int y : labels) {
    if (y < 0 || y >= c) throw std::invalid_argument("cross_entropy: label out of range");
  }
  // Stable log-softmax; the row softmax is kept for the backward pass.
  Vec probs(logits.size());
  double total = 0.0;
  double weight_sum = 0.0;
  const double* in = logits.data();
  for (int i = 0; i < n; ++i) {
    const double* row = in + static_cast<std::int64_t>(i) * c;
    double mx = row[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (int j = 0; j < c; ++j) denom += std::exp(row[j] - mx);
    const double lse = mx + std::log(denom);
    const double w = weighted ? sample_weights[i] : 1.0;
    total += w * (lse - row[labels[i]]);
    weight_sum += w;
    for (int j = 0; j < c; ++j) probs[static_cast<std::int64_t>(i) * c + j] = std::exp(row[j] - lse);
  }
  if (weight_sum <= 0) throw std::invalid_argument("cross_entropy: weights sum to zero");
  Vec out = Vec::Constant(1, total / weight_sum);
  std::vector<int> labels_copy(labels.begin(), labels.end());
  std::vector<double> weights_copy(sample_weights.begin(), sample_weights.end());
  return make_op({}, std::move(out), {logits},
                 [n, c, weight_sum, probs = std::move(probs), labels = std::move(labels_copy),
                  weights = std::move(weights_copy)](const Vec& g, const std::vector<Vec*>& pg) {
                   if (!pg[0]) return;
                   Vec& dx = *pg[0];
                   for (int i = 0; i < n; ++i) {
                     const double w = weights.empty() ? 1.0 : weights[i];
                     const double scale = g[0] * w / weight_sum;
                     for (int j = 0; j < c; ++j) {
                       const std::int64_t k = static_cast<std::int64_t>(i) * c + j;
                       dx[k] += scale * (probs[k] - (labels[i] == j ? 1.0 : 0.0));
                     }
                   }
                 });
}

Tensor sum(const Tensor& x) {
  Vec out = Vec::Constant(1, x.vec().sum());
  return make_op({}, std::move(out), {x}, [](const Vec& g, const std::vector<Vec*>& pg) {
    if (pg[0]) pg[0]->array() += g[0];
  });
}

Tensor gather_rows(const Tensor& x, std::span<const int> rows) {
  if (x.rank() != 2) throw std::invalid_argument("gather_rows: operand must be rank 2");
  const int c = x.cols();
  const int n = static_cast<int>(rows.size());
  for (int r : rows) {
    if (r < 0 || r >= x.rows()) throw std::invalid_argument("gather_rows: row index out of range");
  }
  Vec out(static_cast<std::int64_t>(n) * c);
  const double* in = x.data();
  for (int i = 0; i < n; ++i) {
    std::memcpy(out.data() + static_cast<std::int64_t>(i) * c,
                in + static_cast<std::int64_t>(rows[i]) * c, sizeof(double) * c);
  }
  std::vector<int> rows_copy(rows.begin(), rows.end());
  return make_op({n, c}, std::move(out), {x},
                 [c, rows = std::move(rows_copy)](const Vec& g, const std::vector<Vec*>& pg) {
                   if (!pg[0]) return;
                   Vec& dx = *pg[0];
                   for (size_t i = 0; i < rows.size(); ++i) {
                     Eigen::Map<Vec>(dx.data() + static_cast<std::int64_t>(rows[i]) * c, c) +=
                         Eigen::Map<const Vec>(g.data() + static_cast<std::int64_t>(i) * c, c);
                   }
                 });
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
  Tensor probe = x.detach();
  probe.set_requires_grad(true);
  Tensor y = f(probe);
  if (y.size() != 1) throw std::invalid_argument("grad_check: f must produce a scalar");
  backward(y);
  Vec analytic = probe.has_grad() ? probe.grad_vec() : Vec::Zero(probe.size());

  double max_err = 0.0;
  {
    NoGradGuard no_grad;
    double* data = probe.data();
    for (std::int64_t i = 0; i < probe.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + eps;
      const double up = f(probe).value();
      data[i] = saved - eps;
      const double down = f(probe).value();
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

// ---------------------------------------------------------------------------
// Parameters and optimizer
// ---------------------------------------------------------------------------

void check_unique_names(std::span<const Parameter> params) {
  std::unordered_set<std::string> seen;
  for (const Parameter& p : params) {
    if (!seen.insert(p.name).second) {
      throw std::invalid_argument("duplicate parameter name: " + p.name);
    }
  }
}

AdamW::Moments& AdamW::moments_for(const std::string& name, std::int64_t size) {
  for (auto& [n, m] : moments_) {
    if (n == name) return m;
  }
  moments_.push_back({name, Moments{Vec::Zero(size), Vec::Zero(size)}});
  return moments_.back().second;
}

void AdamW::step(std::span<Parameter> params, double lr, double weight_decay) {
  ++step_count_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_count_));
  for (Parameter& p : params) {
    if (!p.tensor.has_grad()) {
      throw std::runtime_error("AdamW::step: missing gradient for parameter " + p.name);
    }
    const Vec& g = p.tensor.grad_vec();
    Moments& mom = moments_for(p.name, p.tensor.size());
    mom.m = config_.beta1 * mom.m + (1.0 - config_.beta1) * g;
    mom.v = config_.beta2 * mom.v + (1.0 - config_.beta2) * g.cwiseProduct(g);
    Eigen::Map<Vec> w(p.tensor.data(), p.tensor.size());
    w.array() -= lr * (mom.m.array() / bc1) / ((mom.v.array() / bc2).sqrt() + config_.eps);
    w.array() -= lr * weight_decay * w.array();
  }
}

void AdamW::zero_grad(std::span<Parameter> params) {
  for (Parameter& p : params) p.tensor.zero_grad();
}

void AdamW::save_state(const std::string& path) const {
  std::vector<Parameter> state;
  state.push_back({"__step__", Tensor::scalar(static_cast<double>(step_count_))});
  for (const auto& [name, mom] : moments_) {
    state.push_back({"m:" + name, Tensor::from_vec({static_cast<int>(mom.m.size())}, mom.m)});
    state.push_back({"v:" + name, Tensor::from_vec({static_cast<int>(mom.v.size())}, mom.v)});
  }
  save_checkpoint(path, state);
}

void AdamW::load_state(const std::string& path) {
  moments_.clear();
  step_count_ = 0;
  std::unordered_map<std::string, Tensor> entries;
  for (Parameter& p : load_checkpoint(path)) entries.emplace(p.name, p.tensor);
  auto it = entries.find("__step__");
  if (it == entries.end()) throw std::runtime_error("optimizer state missing __step__: " + path);
  step_count_ = static_cast<std::int64_t>(it->second.value());
  for (auto& [name, t] : entries) {
    if (name.rfind("m:", 0) == 0) {
      const std::string base = name.substr(2);
      auto vit = entries.find("v:" + base);
      if (vit == entries.end()) throw std::runtime_error("optimizer state missing v: " + base);
      Moments mom;
      mom.m = t.vec();
      mom.v = vit->second.vec();
      moments_.push_back({base, std::move(mom)});
    }
  }
  std::sort(moments_.begin(), moments_.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
}

// ---------------------------------------------------------------------------
// Checkpoint container
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'S', 'C', 'S', 'F', 'K', 'I', 'T', '1'};

void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, std::span<const Parameter> params) {
  check_unique_names(params);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  os.write(kMagic, sizeof(kMagic));
  for (const Parameter& p : params) {
    write_u32(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    write_u32(os, static_cast<std::uint32_t>(p.tensor.rank()));
    for (int e : p.tensor.shape()) write_u32(os, static_cast<std::uint32_t>(e));
    os.write(reinterpret_cast<const char*>(p.tensor.data()),
             static_cast<std::streamsize>(p.tensor.size() * sizeof(double)));
  }
  if (!os) throw std::runtime_error("write failed: " + path);
}

std::vector<Parameter> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("bad checkpoint magic: " + path);
  }
  std::vector<Parameter> params;
  while (true) {
    std::uint32_t name_len = read_u32(is);
    if (is.eof()) break;
    if (!is) throw std::runtime_error("truncated checkpoint: " + path);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const std::uint32_t rank = read_u32(is);
    std::vector<int> shape(rank);
    std::int64_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      shape[i] = static_cast<int>(read_u32(is));
      n *= shape[i];
    }
    Vec data(n);
    is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (!is) throw std::runtime_error("truncated checkpoint: " + path);
    params.push_back({std::move(name), Tensor::from_vec(std::move(shape), std::move(data))});
  }
  return params;
}

void load_checkpoint_into(const std::string& path, std::span<Parameter> params) {
  std::unordered_map<std::string, Tensor> entries;
  for (Parameter& p : load_checkpoint(path)) entries.emplace(p.name, p.tensor);
  for (Parameter& p : params) {
    auto it = entries.find(p.name);
    if (it == entries.end()) throw std::runtime_error("checkpoint missing parameter: " + p.name);
    if (it->second.shape() != p.tensor.shape()) {
      throw std::runtime_error("checkpoint shape mismatch for parameter: " + p.name);
    }
    std::copy(it->second.data(), it->second.data() + it->second.size(), p.tensor.data());
  }
}

}  // namespace scsf
