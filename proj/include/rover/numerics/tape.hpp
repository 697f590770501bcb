#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <string>
#include <unordered_map>
#include <utility>

#include "rover/numerics/tensor.hpp"

namespace rover {

class Tape;

// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Tensor& grad() const;
  bool requires_grad() const;
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  friend class Tape;
  Var(Tape* t, std::size_t id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Reverse-mode gradient tape. Nodes are kept in creation order, which is a
// topological order; backward walks it in reverse exactly once.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, false, nullptr, {}});
    return Var(this, nodes_.size() - 1);
  }

  // One leaf per parameter per tape; repeated calls return the same node so
  // that fan-out accumulates in a single place.
  Var parameter(Parameter& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var(this, it->second);
    nodes_.push_back(Node{p.value, {}, grad_enabled_, &p, {}});
    param_nodes_.emplace(&p, nodes_.size() - 1);
    return Var(this, nodes_.size() - 1);
  }

  // Read-only leaf for inference tapes; gradients are never requested.
  Var parameter(const Parameter& p) {
    if (grad_enabled_) throw ContractError("tape: const parameter '" + p.name + "' on a gradient-enabled tape");
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var(this, it->second);
    nodes_.push_back(Node{p.value, {}, false, nullptr, {}});
    param_nodes_.emplace(&p, nodes_.size() - 1);
    return Var(this, nodes_.size() - 1);
  }

  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn) {
    bool rg = false;
    if (grad_enabled_)
      for (const Var& p : parents) rg = rg || p.requires_grad();
    return push(std::move(value), rg, std::move(fn));
  }

  template <typename Range>
  Var record_many(Tensor value, const Range& parents, BackwardFn fn) {
    bool rg = false;
    if (grad_enabled_)
      for (const Var& p : parents) rg = rg || p.requires_grad();
    return push(std::move(value), rg, std::move(fn));
  }

  // Gradient buffer for `v`, allocated on first use; nullptr when v does not
  // require a gradient.
  Tensor* grad_sink(const Var& v) {
    Node& n = nodes_[v.id_];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return &n.grad;
  }

  void backward(const Var& loss) {
    if (loss.tape_ != this) throw ContractError("backward: loss was not produced on this tape");
    Node& root = nodes_[loss.id_];
    if (root.value.size() != 1)
      throw ContractError("backward: loss must be scalar, got shape " + shape_str(root.value.shape()));
    if (backward_done_) throw ContractError("backward: tape already consumed");
    backward_done_ = true;
    if (!root.requires_grad) return;
    root.grad = Tensor(root.value.shape(), 1.0);
    for (std::size_t i = loss.id_ + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, n.grad);
      if (n.param != nullptr) {
        Parameter& p = *n.param;
        if (p.grad.shape() != p.value.shape()) p.grad = Tensor(p.value.shape());
        auto dst = p.grad.data();
        auto src = n.grad.data();
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  friend class Var;

  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    BackwardFn backward;
  };

  Var push(Tensor value, bool rg, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), {}, rg, nullptr, rg ? std::move(fn) : BackwardFn{}});
    return Var(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
  bool grad_enabled_ = true;
  bool backward_done_ = false;
};

inline const Tensor& Var::value() const { return tape_->nodes_[id_].value; }
inline const Tensor& Var::grad() const { return tape_->nodes_[id_].grad; }
inline bool Var::requires_grad() const { return tape_->nodes_[id_].requires_grad; }

}  // namespace rover
