#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace ccattn {

// Thrown when an operation produces (or is handed) NaN/Inf values.
struct NonFiniteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

std::size_t numel_of(const Shape& shape);

class Tensor;

// One recorded operation (or leaf). Ops append these implicitly as they run;
// backward() recovers the DAG through the parent links.
struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // sized like data when requires_grad
  bool requires_grad = false;
  bool backward_ran = false;  // set on the node backward() was called on
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;  // accumulates into parents' grads
};

// Dense row-major tensor of doubles with reverse-mode differentiation.
// Rank 1 ({n}) or rank 2 ({m, n}); a scalar is shape {1}. Copies are handles
// to the same storage. A tensor and its graph belong to one thread at a time.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_values(Shape shape, std::vector<double> values,
                            bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  // Factory for custom ops: output data plus a closure that routes grad into
  // the parents. Drops the graph linkage when no parent needs gradients.
  // Verifies the forward result is finite.
  static Tensor make(const char* op, Shape shape, std::vector<double> data,
                     std::vector<Tensor> parents,
                     std::function<void(TensorNode&)> backward_fn);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  // rows/cols treat rank-1 {n} as a single row
  int rows() const { return rank() == 1 ? 1 : node_->shape[0]; }
  int cols() const { return rank() == 1 ? node_->shape[0] : node_->shape[1]; }
  std::size_t size() const { return node_->data.size(); }

  std::vector<double>& data() { return node_->data; }
  const std::vector<double>& data() const { return node_->data; }
  const std::vector<double>& grad() const;
  bool requires_grad() const { return node_->requires_grad; }

  double value() const;  // scalar tensors only
  double at(int i) const { return node_->data[static_cast<std::size_t>(i)]; }
  double at(int i, int j) const {
    return node_->data[static_cast<std::size_t>(i) * static_cast<std::size_t>(cols()) + static_cast<std::size_t>(j)];
  }

  // resets accumulated gradients and re-arms backward() for this node
  void zero_grad();

  TensorNode& node() const { return *node_; }
  const std::shared_ptr<TensorNode>& ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}
  std::shared_ptr<TensorNode> node_;
};

// The recorded-operation DAG reachable from a root, in topological order
// (root last). Built per backward sweep.
struct Graph {
  std::vector<TensorNode*> order;
  static Graph trace(const Tensor& root);
};

// Reverse-mode sweep from a scalar loss. Every requires_grad tensor reachable
// from the loss receives its gradient; each node's closure runs exactly once,
// so fan-out accumulates additively. A second call on the same loss without
// zero_grad() is an error.
void backward(const Tensor& loss);

// elementwise, same shape
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);

// [m x k] . [k x n] -> [m x n]
Tensor matmul(const Tensor& a, const Tensor& b);

// rowwise softmax of (inv_temperature * x), max-subtracted for stability;
// rank-1 input is treated as a single row
Tensor softmax_rows(const Tensor& x, double inv_temperature = 1.0);

// rows scaled to unit L2 norm; an exactly zero row stays zero
Tensor l2_normalize_rows(const Tensor& x);

Tensor relu(const Tensor& x);

Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
// log(sum(exp(x))) over all entries, max-subtracted
Tensor logsumexp_all(const Tensor& x);

// slice row i of a rank-2 tensor -> {cols}
// same elements, new shape; gradient passes through 1:1
Tensor reshape(const Tensor& x, Shape shape);

Tensor row(const Tensor& x, int i);

// rank-2 x: rows at idx -> [k x cols]; rank-1 x: elements at idx -> {k}.
// Duplicate indices accumulate gradient additively.
Tensor gather_rows(const Tensor& x, const std::vector<int>& idx);

// scalar tensors -> {n}
Tensor stack_scalars(const std::vector<Tensor>& scalars);

// Cosine similarity, clamped to [-1, 1]. A zero-norm operand yields 0 and
// bumps the zero-norm counter instead of erroring (degenerate embeddings
// occur at initialization).
Tensor cosine(const Tensor& a, const Tensor& b);           // vectors -> {1}
Tensor cosine_rows(const Tensor& a, const Tensor& b);      // paired rows -> {m}
Tensor cosine_matrix(const Tensor& a, const Tensor& b);    // all pairs -> [m x n]

std::uint64_t zero_norm_cosine_count();
void reset_zero_norm_cosine_count();

}  // namespace ccattn
