#pragma once

// Tape-based reverse-mode differentiation over rank-2 tensors.
//
// Nodes are appended in execution order, so the tape is already a topological
// order and backward() is a single reverse sweep. Ops check shapes when they
// are recorded and reject non-finite outputs.
//
// Non-smooth ops (stop-gradient, straight-through, argmin) can be recorded and
// later replayed with their recorded constants. Finite differences taken in
// replay mode measure exactly the surrogate derivative that backward() computes.

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ladmim/errors.hpp"
#include "ladmim/tensor.hpp"

namespace ladmim {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  std::vector<T> grad;
  bool trainable = true;

  void zero_grad() { grad.assign(value.numel(), T{0}); }
};

// Ordered named parameters. Layers refer to entries by index so models keep
// value semantics.
template <typename T>
class ParameterSet {
 public:
  std::size_t add(std::string name, Tensor<T> value, bool trainable = true) {
    for (const auto& p : items_) {
      if (p.name == name) throw ConfigError("duplicate parameter name: " + name);
    }
    items_.push_back(Parameter<T>{std::move(name), std::move(value), {}, trainable});
    return items_.size() - 1;
  }

  Parameter<T>& operator[](std::size_t i) { return items_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return items_[i]; }
  [[nodiscard]] std::size_t size() const { return items_.size(); }
  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

  [[nodiscard]] std::size_t index_of(const std::string& name) const {
    for (std::size_t i = 0; i < items_.size(); ++i) {
      if (items_[i].name == name) return i;
    }
    throw ConfigError("unknown parameter: " + name);
  }

  [[nodiscard]] std::size_t total_numel() const {
    std::size_t n = 0;
    for (const auto& p : items_) n += p.value.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : items_) p.zero_grad();
  }

  template <typename U>
  [[nodiscard]] ParameterSet<U> cast() const {
    ParameterSet<U> out;
    for (const auto& p : items_) out.add(p.name, p.value.template cast<U>(), p.trainable);
    return out;
  }

 private:
  std::vector<Parameter<T>> items_;
};

struct Var {
  std::uint32_t id = 0;
};

enum class FreezeMode { off, record, replay };

// Constants captured from non-smooth ops during a recording forward pass.
template <typename T>
struct FrozenState {
  std::vector<Tensor<T>> tensors;
  std::vector<std::vector<int>> discrete;
};

template <typename T>
class Graph {
 public:
  using Backward = std::function<void(Graph&, std::uint32_t)>;

  struct Node {
    Tensor<T> own;
    const Tensor<T>* view = nullptr;
    std::vector<T> grad;
    bool needs_grad = false;
    Parameter<T>* param = nullptr;
    Backward backward;

    const Tensor<T>& value() const { return view ? *view : own; }
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Non-trainable input. Pass requires_grad to differentiate w.r.t. it.
  Var input(Tensor<T> value, bool requires_grad = false) {
    check_finite(value, "input");
    Node n;
    n.own = std::move(value);
    n.needs_grad = requires_grad;
    return append(std::move(n));
  }

  // Leaf bound to a parameter; repeated calls return the same node.
  Var param(Parameter<T>& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return it->second;
    Node n;
    n.view = &p.value;
    n.needs_grad = p.trainable && !no_grad_;
    n.param = &p;
    const Var v = append(std::move(n));
    param_nodes_.emplace(&p, v);
    return v;
  }

  Var push(Tensor<T> value, bool needs_grad, Backward backward, const char* op) {
    check_finite(value, op);
    Node n;
    n.own = std::move(value);
    n.needs_grad = needs_grad;
    if (needs_grad) n.backward = std::move(backward);
    return append(std::move(n));
  }

  // Inference mode: parameters are treated as constants and no backward
  // closures are recorded.
  void set_no_grad(bool on) { no_grad_ = on; }

  [[nodiscard]] const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value(); }
  [[nodiscard]] bool needs_grad(Var v) const { return nodes_.at(v.id).needs_grad; }
  [[nodiscard]] std::size_t size() const { return nodes_.size(); }

  // Gradient buffer of a node, zero-initialised on first access.
  std::vector<T>& grad_of(Var v) {
    auto& n = nodes_[v.id];
    if (n.grad.empty()) n.grad.assign(n.value().numel(), T{0});
    return n.grad;
  }
  std::vector<T>& grad_of(std::uint32_t id) { return grad_of(Var{id}); }

  // Gradient after backward(); zeros when the node received none.
  [[nodiscard]] std::vector<T> grad(Var v) const {
    const auto& n = nodes_.at(v.id);
    if (n.grad.empty()) return std::vector<T>(n.value().numel(), T{0});
    return n.grad;
  }

  void backward(Var loss) {
    if (nodes_.empty() || loss.id >= nodes_.size()) {
      throw Error("backward called before any forward op was recorded");
    }
    if (backward_done_) throw Error("backward called twice on the same graph");
    if (value(loss).numel() != 1) {
      throw ShapeError("backward requires a scalar loss, got " + shape_str(value(loss).shape));
    }
    backward_done_ = true;
    grad_of(loss)[0] = T{1};
    visits_ = 0;
    for (std::int64_t i = loss.id; i >= 0; --i) {
      auto& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.needs_grad || n.grad.empty()) continue;
      ++visits_;
      if (n.backward) n.backward(*this, static_cast<std::uint32_t>(i));
      if (n.param != nullptr && n.param->trainable) {
        auto& pg = n.param->grad;
        if (pg.empty()) pg.assign(n.grad.size(), T{0});
        for (std::size_t k = 0; k < pg.size(); ++k) pg[k] += n.grad[k];
      }
    }
  }

  // Number of nodes processed by the last backward() sweep.
  [[nodiscard]] std::size_t backward_visits() const { return visits_; }

  // --- freeze / replay support -------------------------------------------

  void set_freeze(FreezeMode mode, FrozenState<T>* state) {
    mode_ = mode;
    frozen_ = state;
    tensor_cursor_ = 0;
    discrete_cursor_ = 0;
  }
  [[nodiscard]] FreezeMode freeze_mode() const { return mode_; }

  // Returns the recorded tensor in replay mode, otherwise records `live`.
  Tensor<T> freeze_tensor(Tensor<T> live) {
    if (mode_ == FreezeMode::replay) return frozen_->tensors.at(tensor_cursor_++);
    if (mode_ == FreezeMode::record) frozen_->tensors.push_back(live);
    return live;
  }

  // Discrete decisions (argmin indices). Replay returns the recorded choice;
  // the live choice is still appended to the branch signature.
  template <typename F>
  std::vector<int> discrete(F&& compute) {
    std::vector<int> live = compute();
    signature_.insert(signature_.end(), live.begin(), live.end());
    if (mode_ == FreezeMode::replay) return frozen_->discrete.at(discrete_cursor_++);
    if (mode_ == FreezeMode::record) frozen_->discrete.push_back(live);
    return live;
  }

  // Branch choices of non-smooth ops (argmin indices, signs of |x|).
  void note_branch(int b) { signature_.push_back(b); }
  [[nodiscard]] const std::vector<int>& branch_signature() const { return signature_; }

 private:
  static void check_finite(const Tensor<T>& t, const char* op) {
    if (!t.all_finite()) throw NonFiniteError(std::string(op) + ": non-finite value");
  }

  Var append(Node n) {
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<T>*, Var> param_nodes_;
  bool backward_done_ = false;
  bool no_grad_ = false;
  std::size_t visits_ = 0;
  FreezeMode mode_ = FreezeMode::off;
  FrozenState<T>* frozen_ = nullptr;
  std::size_t tensor_cursor_ = 0;
  std::size_t discrete_cursor_ = 0;
  std::vector<int> signature_;
};

}  // namespace ladmim
