#pragma once

#include <Eigen/Core>

#include <deque>
#include <functional>
#include <string>

namespace diffuq::ad {

class Tape;

// Handle to a matrix-valued node on a Tape. Cheap to copy; valid while the
// tape is alive and not cleared.
class Var {
 public:
  Var() = default;

  const Eigen::MatrixXd& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
  int id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

// Records primitive matrix operations in evaluation order. Because nodes are
// appended only after their inputs, a reverse sweep over node ids is a
// reverse topological order and every node is visited exactly once.
class Tape {
 public:
  using Backward = std::function<void(Tape&, int self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Differentiable input.
  Var leaf(Eigen::MatrixXd value);
  Var constant(Eigen::MatrixXd value);
  // Generic node. `requires_grad` should be true iff some input requires it;
  // `backward` reads grad(self) and accumulates into its inputs.
  Var record(Eigen::MatrixXd value, bool requires_grad, Backward backward, const char* op);

  // Reverse sweep from a 1x1 output. Throws NumericalError if the output is
  // not finite, naming the first op that produced a non-finite value.
  void backward(const Var& output);

  const Eigen::MatrixXd& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  // Gradient of the last backward() output wrt the node; zeros if untouched.
  Eigen::MatrixXd grad(const Var& v) const;
  const Eigen::MatrixXd& grad_ref(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
  bool has_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad.size() > 0; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  bool requires_grad(const Var& v) const { return requires_grad(v.id()); }

  // Adds `g` into the gradient buffer of node `id` (no-op for constants).
  template <typename Derived>
  void accumulate(int id, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  // Writable gradient buffer of node `id`, zero-filled on first use.
  Eigen::MatrixXd& grad_buffer(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) n.grad.setZero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }
  // Description of the first node holding a NaN/Inf, or empty.
  std::string first_nonfinite() const;

 private:
  struct Node {
    Eigen::MatrixXd value;
    Eigen::MatrixXd grad;
    Backward backward;
    bool requires_grad = false;
    const char* op = "";
  };
  // deque: node references stay valid while the tape grows.
  std::deque<Node> nodes_;
};

// Elementwise and linear-algebra primitives. Shapes follow Eigen semantics;
// mismatches throw DimensionError.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var cwise_product(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var matmul(const Var& a, const Var& b);
// a (n x k) + row (1 x k) broadcast over rows.
Var add_row(const Var& a, const Var& row);
// a (n x k) * row (1 x k) broadcast over rows.
Var mul_row(const Var& a, const Var& row);
Var gelu(const Var& a);
// x * w + b with b (1 x k) broadcast over rows; one node.
Var affine(const Var& x, const Var& w, const Var& b);
// gelu(layer_norm_rows(a)) as one node.
Var layer_norm_gelu(const Var& a, double eps = 1e-5);
Var exp(const Var& a);
Var square(const Var& a);
Var clamp(const Var& a, double lo, double hi);
// Per-row (x - mean) / sqrt(var + eps), population variance.
Var layer_norm_rows(const Var& a, double eps = 1e-5);
Var concat_cols(const Var& a, const Var& b);
// rows x cols column-major view of entries [offset, offset + rows*cols) of a.
Var reshape_slice(const Var& a, Eigen::Index offset, Eigen::Index rows, Eigen::Index cols);
Var sum(const Var& a);
Var mean(const Var& a);
// n x k -> n x 1 sum of squares per row.
Var row_squared_norm(const Var& a);

// Gradient of a scalar function built from the primitives above. The function
// receives the tape and a leaf holding `at` (d x 1). Non-finite forward values
// abort with a NumericalError naming the offending op.
using ScalarFn = std::function<Var(Tape&, const Var&)>;
Eigen::VectorXd gradient_of(const ScalarFn& fn, const Eigen::VectorXd& at, double* value = nullptr);

}  // namespace diffuq::ad
