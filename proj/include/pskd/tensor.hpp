#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "pskd/common.hpp"

namespace pskd {

using Scalar = double;
using Shape = std::vector<int>;

int numel_of(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {

struct Node {
  Shape shape;
  std::vector<Scalar> value;
  std::vector<Scalar> grad;  // sized during backward; empty means "no gradient yet"
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
};

}  // namespace detail

// Dense tensor with reverse-mode automatic differentiation. A Tensor is a
// cheap handle onto a graph node; operations evaluate eagerly and record the
// graph only when some input requires gradients. Values are immutable once
// created, except leaf values which the optimizer may overwrite between steps.
class Tensor {
 public:
  Tensor() = default;

  static Tensor leaf(Shape shape, std::vector<Scalar> data, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Scalar v, bool requires_grad = false);
  static Tensor scalar(Scalar v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node()->shape; }
  int numel() const { return static_cast<int>(node()->value.size()); }
  int dim(int i) const { return node()->shape.at(static_cast<size_t>(i)); }
  bool requires_grad() const { return node()->requires_grad; }

  const std::vector<Scalar>& value() const { return node()->value; }
  Scalar item() const;

  /// Leaf-only write access, for parameter updates between steps.
  std::vector<Scalar>& mutable_value();

  bool has_grad() const { return !node()->grad.empty(); }
  const std::vector<Scalar>& grad() const;
  void zero_grad() { node()->grad.clear(); }

  /// Value copy detached from the graph.
  Tensor detach() const;

  detail::Node* node() const {
    if (!node_) fail("use of undefined Tensor");
    return node_.get();
  }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  friend Tensor make_op(Shape shape, std::vector<Scalar> value, std::vector<Tensor> parents,
                        std::function<void(detail::Node&)> backward_fn);

  std::shared_ptr<detail::Node> node_;
};

// Elementwise; operands must have identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, Scalar c);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor log(const Tensor& x);

/// Row-wise softmax of logits divided by `temperature` (rank 1 or rank 2).
Tensor softmax(const Tensor& x, Scalar temperature = 1.0);
Tensor log_softmax(const Tensor& x, Scalar temperature = 1.0);

/// [M,K]x[K,N] -> [M,N], or [M,K]x[K] -> [M].
Tensor matmul(const Tensor& a, const Tensor& b);

/// x: [IC,H,W], w: [OC,IC,kh,kw], bias: [OC] or undefined. stride 1 or 2.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad);

/// 2x2 max pooling with stride 2; trailing odd row/column is dropped.
Tensor max_pool2d(const Tensor& x);

/// Bilinear crop of x ([C,H,W]) at `box` (same coordinate frame as x),
/// resampled to [C,out_h,out_w]. Gradients flow into x only.
Tensor crop_resize(const Tensor& x, const Box& box, int out_h, int out_w);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Sum of squared entries (squared L2 norm), scalar result.
Tensor squared_norm(const Tensor& x);
/// [M,K] -> [M], summing each row.
Tensor sum_rows(const Tensor& x);

/// Elementwise smooth-L1 of (a - b): 0.5 d^2 for |d| < 1, |d| - 0.5 otherwise.
Tensor smooth_l1(const Tensor& a, const Tensor& b);

/// x / max(||x||_2, eps) for rank-1 x.
Tensor l2_normalize(const Tensor& x, Scalar eps = 1e-12);

Tensor concat(const std::vector<Tensor>& parts);              // rank-1 -> rank-1
Tensor stack_rows(const std::vector<Tensor>& rows);           // M rank-1 of len K -> [M,K]
Tensor pick(const Tensor& x, int index);                      // rank-1 -> scalar
Tensor pick_per_row(const Tensor& x, const std::vector<int>& idx);   // [M,C] -> [M]
Tensor take_rows(const Tensor& x, const std::vector<int>& idx);      // [M,K] -> [|idx|,K]

/// [A*F,H,W] -> [H*W*A, F]; row (y*W+x)*A+a holds channels a*F..a*F+F-1 at (y,x).
Tensor grid_to_rows(const Tensor& x, int groups, int fields);

Tensor reshape(const Tensor& x, Shape shape);

/// Runs reverse-mode accumulation from a scalar loss. Gradients of every node
/// reachable through requires_grad edges are overwritten (not accumulated
/// across calls); read them via Tensor::grad().
void backward(const Tensor& loss);

/// One SGD-with-momentum update on a raw parameter array:
///   v <- momentum * v + g;  p <- p - lr * v
void sgd_step(std::vector<Scalar>& param, const std::vector<Scalar>& grad,
              std::vector<Scalar>& velocity, Scalar lr, Scalar momentum);

// Momentum SGD over a fixed set of leaf tensors. A parameter whose gradient
// was not produced by the last backward pass is treated as having zero
// gradient. Non-finite gradients abort with a diagnostic.
class Sgd {
 public:
  Sgd(std::vector<Tensor> params, Scalar lr, Scalar momentum);

  void set_lr(Scalar lr);
  Scalar lr() const { return lr_; }
  void step();

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<Scalar>> velocity_;
  Scalar lr_;
  Scalar momentum_;
};

}  // namespace pskd
