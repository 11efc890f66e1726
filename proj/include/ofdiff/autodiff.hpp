#pragma once

#include "ofdiff/tensor.hpp"

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace ofdiff {

/// A named trainable array. Graphs reference parameters by address, so a
/// Parameter must stay put while any graph built from it is alive.
template <typename Scalar>
struct Parameter {
  std::string name;
  Tensor<Scalar> value;
};

template <typename Scalar>
using ParameterList = std::vector<Parameter<Scalar>*>;

template <typename Scalar>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while its graph lives.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Graph<Scalar>* graph, int id) : graph_(graph), id_(id) {}

  Graph<Scalar>& graph() const { return *graph_; }
  int id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

  const Tensor<Scalar>& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  Graph<Scalar>* graph_ = nullptr;
  int id_ = -1;
};

/// Gradients produced by Graph::backward, looked up by parameter or leaf.
template <typename Scalar>
class Gradients {
 public:
  /// Gradient of a parameter; exact zeros if the loss does not reach it.
  Tensor<Scalar> of(const Parameter<Scalar>& p) const {
    auto it = by_param_.find(&p);
    return it == by_param_.end() ? Tensor<Scalar>::zeros(p.value.shape()) : it->second;
  }
  Tensor<Scalar> of(const Var<Scalar>& leaf) const {
    auto it = by_node_.find(leaf.id());
    return it == by_node_.end() ? Tensor<Scalar>::zeros(leaf.shape()) : it->second;
  }

 private:
  friend class Graph<Scalar>;
  std::unordered_map<const Parameter<Scalar>*, Tensor<Scalar>> by_param_;
  std::unordered_map<int, Tensor<Scalar>> by_node_;
};

/// Tape of operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the tape is topologically
/// sorted by construction. With gradients disabled the tape keeps values
/// only (used for sampling).
template <typename Scalar>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, int self)>;

  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var<Scalar> constant(Tensor<Scalar> value) {
    return push(std::move(value), {}, false, nullptr);
  }

  /// Leaf that receives a gradient, for differentiating w.r.t. plain tensors.
  Var<Scalar> input(Tensor<Scalar> value) {
    return push(std::move(value), {}, grad_enabled_, nullptr);
  }

  /// Leaf bound to a parameter; repeated calls return the same node.
  Var<Scalar> param(Parameter<Scalar>& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return {this, it->second};
    Var<Scalar> v = push(p.value, {}, grad_enabled_, nullptr);
    nodes_[static_cast<std::size_t>(v.id())].param = &p;
    param_nodes_.emplace(&p, v.id());
    return v;
  }

  /// Appends an op result. `backward` is dropped when no input needs a gradient.
  Var<Scalar> record(Tensor<Scalar> value, std::vector<int> inputs, BackwardFn backward) {
    bool needs = false;
    for (int i : inputs) needs = needs || node(i).requires_grad;
    return push(std::move(value), std::move(inputs), needs && grad_enabled_,
                needs && grad_enabled_ ? std::move(backward) : nullptr);
  }

  const Tensor<Scalar>& value(int id) const { return node(id).value; }
  bool requires_grad(int id) const { return node(id).requires_grad; }
  const std::vector<int>& inputs(int id) const { return node(id).inputs; }
  int size() const { return static_cast<int>(nodes_.size()); }

  /// Gradient accumulator of a node, zero-allocated on first access.
  Tensor<Scalar>& grad(int id) {
    Node& n = node(id);
    if (!n.has_grad) {
      n.grad = Tensor<Scalar>::zeros(n.value.shape());
      n.has_grad = true;
    }
    return n.grad;
  }
  const Tensor<Scalar>* grad_if_any(int id) const {
    const Node& n = node(id);
    return n.has_grad ? &n.grad : nullptr;
  }

  /// Reverse-mode accumulation from a scalar loss.
  Gradients<Scalar> backward(const Var<Scalar>& loss);

  // Stop-gradient replay: finite-difference checks evaluate the "severed"
  // surrogate by freezing every stop_gradient output at its base-point value.
  void record_stop_gradients() { sg_recording_ = true; }
  void replay_stop_gradients(const std::vector<Tensor<Scalar>>* values) { sg_replay_ = values; }
  const std::vector<Tensor<Scalar>>& recorded_stop_gradients() const { return sg_recorded_; }

  /// Value a stop_gradient node should carry (internal to stop_gradient).
  Tensor<Scalar> next_stop_gradient_value(const Tensor<Scalar>& forward);

 private:
  struct Node {
    Tensor<Scalar> value;
    Tensor<Scalar> grad;
    std::vector<int> inputs;
    BackwardFn backward;
    Parameter<Scalar>* param = nullptr;
    bool requires_grad = false;
    bool has_grad = false;
  };

  Node& node(int id) { return nodes_.at(static_cast<std::size_t>(id)); }
  const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }

  Var<Scalar> push(Tensor<Scalar> value, std::vector<int> inputs, bool requires_grad,
                   BackwardFn backward) {
    for (int i : inputs) {
      if (i < 0 || i >= size()) throw ContractError("graph input does not precede its use");
    }
    Node n;
    n.value = std::move(value);
    n.inputs = std::move(inputs);
    n.requires_grad = requires_grad;
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return {this, size() - 1};
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<Scalar>*, int> param_nodes_;
  bool grad_enabled_;

  bool sg_recording_ = false;
  std::vector<Tensor<Scalar>> sg_recorded_;
  const std::vector<Tensor<Scalar>>* sg_replay_ = nullptr;
  std::size_t sg_cursor_ = 0;
};

template <typename Scalar>
const Tensor<Scalar>& Var<Scalar>::value() const {
  return graph_->value(id_);
}

template <typename Scalar>
bool Var<Scalar>::requires_grad() const {
  return graph_->requires_grad(id_);
}

// ---------------------------------------------------------------------------
// Primitives. Shapes are (N, C, H, W) for image ops unless noted; conv2d and
// group_norm also accept a single (C, H, W) sample.

/// a + b; b's shape must equal a's or a trailing suffix of it.
template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, double factor);

template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) { return add(a, b); }
template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& a, const Var<Scalar>& b) { return sub(a, b); }
template <typename Scalar>
Var<Scalar> operator*(const Var<Scalar>& a, const Var<Scalar>& b) { return mul(a, b); }
template <typename Scalar>
Var<Scalar> operator*(double factor, const Var<Scalar>& a) { return scale(a, factor); }

/// (m, k) x (k, n) -> (m, n)
template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b);

/// Adds a per-sample, per-channel vector v (N, C) to x (N, C, H, W).
template <typename Scalar>
Var<Scalar> add_channel(const Var<Scalar>& x, const Var<Scalar>& v);

/// Zero-padded cross-correlation. kernel is (C_out, C_in, k, k) with k odd.
template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& input, const Var<Scalar>& kernel,
                   const std::optional<Var<Scalar>>& bias, int stride, int padding);

template <typename Scalar>
Var<Scalar> group_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                       int groups, double eps = 1e-5);

template <typename Scalar>
Var<Scalar> silu(const Var<Scalar>& x);
template <typename Scalar>
Var<Scalar> exp(const Var<Scalar>& x);
/// Element-wise clamp; gradient passes where lo <= x <= hi.
template <typename Scalar>
Var<Scalar> clamp(const Var<Scalar>& x, double lo, double hi);

template <typename Scalar>
Var<Scalar> upsample2x(const Var<Scalar>& x);
template <typename Scalar>
Var<Scalar> avgpool2x(const Var<Scalar>& x);
template <typename Scalar>
Var<Scalar> concat_channels(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& x, Shape shape);

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& x);
template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& x);
/// mean((a - b)^2) accumulated in double.
template <typename Scalar>
Var<Scalar> mse(const Var<Scalar>& a, const Var<Scalar>& b);

/// Forward identity; contributes nothing to the gradient of any ancestor.
template <typename Scalar>
Var<Scalar> stop_gradient(const Var<Scalar>& x);

/// Per-sample likelihood ratio N(action; mean, sigma^2 I) / exp(logp_old),
/// one entry per leading index of `mean`. Differentiable w.r.t. mean.
template <typename Scalar>
Var<Scalar> gaussian_likelihood_ratio(const Var<Scalar>& mean, const Tensor<Scalar>& action,
                                      double sigma, std::span<const double> logp_old);

/// log N(action; mean, sigma^2 I), summed in double.
template <typename Scalar>
double gaussian_log_density(std::span<const Scalar> action, std::span<const Scalar> mean,
                            double sigma);

/// Interleaved sin/cos embedding: row n is [sin(t w_0), cos(t w_0), sin(t w_1), ...]
/// with w_i = 10000^(-2i/dim).
template <typename Scalar>
Tensor<Scalar> sinusoidal_embedding(std::span<const double> timesteps, Index dim);

}  // namespace ofdiff
