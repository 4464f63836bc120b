#pragma once

// Reverse-mode automatic differentiation over biper::Tensor.
//
// Every op returns a Variable whose node keeps references to its inputs and a
// backward rule. backward(loss) walks the graph in reverse topological order
// and accumulates gradients into every node that requires them. A backward
// rule does not have to be the true derivative: custom ops registered with
// OpRegistry carry surrogate rules (straight-through, sine, polynomial).

#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <shared_mutex>
#include <span>
#include <string>
#include <vector>

#include "biper/tensor.hpp"

namespace biper::ad {

struct Node {
  Tensor value;
  Tensor grad;  // empty until something flows into it
  bool requires_grad = false;
  bool retain_grad = false;
  bool consumed = false;  // set once backward has run through this node
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  Node() = default;
  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;
  ~Node();  // iterative, so long chains do not recurse

  bool is_leaf() const { return inputs.empty(); }
  void accumulate(std::span<const double> g);
};

class Variable {
 public:
  Variable() = default;
  explicit Variable(Tensor value, bool requires_grad = false);
  explicit Variable(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  /// Direct access for optimizer updates; only meaningful on leaves.
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.empty(); }
  const Tensor& grad() const { return node_->grad; }
  void zero_grad() { node_->grad = Tensor(); }
  /// Keep the gradient of an interior node after backward.
  void retain_grad() { node_->retain_grad = true; }
  bool is_leaf() const { return node_->is_leaf(); }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Fills grads of every requires_grad leaf with dLoss/dLeaf. The graph is
/// released afterwards; a second call on the same loss throws.
void backward(const Variable& loss);

// ---- custom-gradient ops -------------------------------------------------

struct OpId {
  std::uint32_t value = 0;
  friend bool operator==(OpId, OpId) = default;
};

struct CustomGradOp {
  std::string name;
  std::function<double(double)> forward;
  /// d(out)/d(in) used in backward, evaluated at the saved forward input.
  std::function<double(double)> surrogate;
};

class OpRegistry {
 public:
  OpId register_custom_grad(std::string name, std::function<double(double)> forward,
                            std::function<double(double)> surrogate_backward);
  const CustomGradOp& get(OpId id) const;
  std::size_t size() const;

  static OpRegistry& global();

 private:
  mutable std::shared_mutex mutex_;
  std::deque<CustomGradOp> ops_;
};

/// Elementwise op out = forward(x) whose backward uses surrogate(x).
Variable custom_unary(const Variable& x, OpId id,
                      const OpRegistry& registry = OpRegistry::global());

// ---- built-in ops --------------------------------------------------------

Variable matmul(const Variable& a, const Variable& b);
/// y = x w^T + bias; x [N,in], w [out,in], bias [out] or undefined.
Variable linear(const Variable& x, const Variable& w, const Variable& bias = {});
Variable add(const Variable& a, const Variable& b);
Variable mul(const Variable& a, const Variable& b);
Variable scale(const Variable& a, double factor);
Variable sum(const Variable& a);
Variable mean(const Variable& a);
Variable sin(const Variable& a);
Variable relu(const Variable& a);
Variable reshape(const Variable& a, Shape shape);
/// Same value, no gradient path.
Variable detach(const Variable& a);

struct Conv2dGeometry {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

/// x [N,C,H,W], w [OC,C,KH,KW], zero padding; im2col + GEMM.
Variable conv2d(const Variable& x, const Variable& w, Conv2dGeometry geom = {});

/// x [N,C,...] times gamma[c] per channel.
Variable channel_scale(const Variable& x, const Variable& gamma);
/// w [OC,...] -> [OC], mean of |w| within each leading-axis slice.
Variable mean_abs_per_channel(const Variable& w);
Variable mean_abs(const Variable& w);

struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Per-channel normalization over N (and spatial dims for 4-D inputs). In
/// training mode uses batch statistics and updates state's running stats;
/// otherwise uses the running stats.
Variable batch_norm(const Variable& x, const Variable& weight, const Variable& bias,
                    BatchNormState& state, bool training);

/// [N,C,H,W] -> [N,C]
Variable global_avg_pool(const Variable& x);

/// Mean cross-entropy of softmax(logits) [N,K] against integer labels.
Variable softmax_cross_entropy(const Variable& logits, std::span<const int> labels);

// ---- helpers shared with the bit-packed path ------------------------------

std::size_t conv_out_size(std::size_t in, std::size_t kernel, std::size_t stride,
                          std::size_t pad);

/// One image [C,H,W] -> columns [C*KH*KW, OH*OW] with zero padding.
void im2col(std::span<const double> image, std::size_t channels, std::size_t height,
            std::size_t width, std::size_t kh, std::size_t kw, Conv2dGeometry geom,
            std::span<double> cols);

}  // namespace biper::ad
