#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "panformer/tensor.hpp"

namespace panformer {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // lazily allocated, same shape as value
  bool requires_grad = false;
  bool leaf = true;

  Tensor<T>& grad_buffer() {
    if (grad.shape() != value.shape() || grad.numel() != value.numel()) grad = Tensor<T>::zeros(value.shape());
    return grad;
  }
  bool has_grad() const { return grad.numel() == value.numel() && grad.shape() == value.shape(); }
};

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

/// Handle to a value that may participate in reverse-mode differentiation.
/// Copies share the underlying node.
template <typename T>
class Var {
 public:
  Var() : node_(std::make_shared<Node<T>>()) {}
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(NodePtr<T> node) : node_(std::move(node)) {}

  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::int64_t numel() const { return node_->value.numel(); }
  bool requires_grad() const { return node_->requires_grad; }

  /// Gradient accumulated by backward(). Zeros if never touched.
  const Tensor<T>& grad() const { return node_->grad_buffer(); }
  Tensor<T>& mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad_buffer().fill(T(0)); }

  const NodePtr<T>& node() const { return node_; }

 private:
  NodePtr<T> node_;
};

/// Ordered record of differentiable operations. Entries are appended as
/// operations execute, so inputs always precede their consumers.
template <typename T>
class Tape {
 public:
  struct Entry {
    std::string op;
    std::vector<std::int64_t> inputs;
    std::int64_t output = -1;
    std::function<void()> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape*& active() {
    thread_local Tape* current = nullptr;
    return current;
  }

  /// True when an operation on these inputs must be recorded.
  static bool recording(std::initializer_list<const Var<T>*> inputs) {
    if (!active()) return false;
    for (auto* v : inputs)
      if (v && v->requires_grad()) return true;
    return false;
  }

  void record(std::string op, std::initializer_list<const Var<T>*> inputs, const Var<T>& output,
              std::function<void()> backward) {
    Entry e;
    e.op = std::move(op);
    for (auto* v : inputs)
      if (v) e.inputs.push_back(id_of(v->node()));
    output.node()->leaf = false;
    output.node()->requires_grad = true;
    e.output = id_of(output.node());
    e.backward = std::move(backward);
    entries_.push_back(std::move(e));
  }

  /// Reverse sweep from a scalar loss. Leaf gradients accumulate across
  /// calls; intermediate gradients are reset at the start of every sweep.
  void backward(const Var<T>& loss) {
    if (loss.numel() != 1)
      throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    for (auto& n : nodes_)
      if (!n->leaf && n->has_grad()) n->grad.fill(T(0));
    loss.node()->grad_buffer()[0] += T(1);
    visits_ = 0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      ++visits_;
      if (nodes_[static_cast<std::size_t>(it->output)]->has_grad()) it->backward();
    }
  }

  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t last_backward_visits() const { return visits_; }

  /// Every entry's inputs were registered before its output.
  bool topologically_ordered() const {
    for (const auto& e : entries_)
      for (auto in : e.inputs)
        if (in >= e.output) return false;
    return true;
  }

  void clear() {
    entries_.clear();
    nodes_.clear();
    ids_.clear();
  }

 private:
  std::int64_t id_of(const NodePtr<T>& n) {
    auto [it, inserted] = ids_.try_emplace(n.get(), static_cast<std::int64_t>(nodes_.size()));
    if (inserted) nodes_.push_back(n);
    return it->second;
  }

  std::vector<Entry> entries_;
  std::vector<NodePtr<T>> nodes_;
  std::unordered_map<const Node<T>*, std::int64_t> ids_;
  std::size_t visits_ = 0;
};

/// Makes `tape` the active recording tape for this thread while in scope.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : prev_(Tape<T>::active()) { Tape<T>::active() = &tape; }
  ~TapeScope() { Tape<T>::active() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

template <typename T>
void backward(Tape<T>& tape, const Var<T>& loss) {
  tape.backward(loss);
}

/// Named trainable tensor.
template <typename T>
struct Parameter {
  std::string name;
  Var<T> var;

  const Tensor<T>& value() const { return var.value(); }
  const Tensor<T>& grad() const { return var.grad(); }
};

/// Ordered registry of trainable parameters with unique names.
template <typename T>
class ParameterSet {
 public:
  Var<T> add(const std::string& name, Tensor<T> init) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    Var<T> v(std::move(init), true);
    index_.emplace(name, params_.size());
    params_.push_back({name, v});
    return v;
  }

  std::size_t size() const { return params_.size(); }
  const Parameter<T>& operator[](std::size_t i) const { return params_[i]; }
  Parameter<T>& operator[](std::size_t i) { return params_[i]; }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }

  const Parameter<T>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }
  Parameter<T>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }

  std::int64_t element_count() const {
    std::int64_t n = 0;
    for (const auto& p : params_) n += p.var.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
  }

 private:
  std::vector<Parameter<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace panformer
