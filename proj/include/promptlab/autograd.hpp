#pragma once

// Tape-based reverse-mode differentiation.
//
// A Tape owns every value produced during a forward pass. Var is a cheap
// handle (tape, node id). Operations record a node; when none of the inputs
// require gradients the node is stored as a constant with no backward
// closure, so inference on a frozen model never pays for differentiation.
//
// Node ids are assigned in execution order, which is a topological order, so
// backward() is a single reverse sweep. Gradient accumulation order is the
// tape order and therefore deterministic.

#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "promptlab/kernels.hpp"

namespace promptlab {

template <std::floating_point T>
class Tape;

template <std::floating_point T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  std::size_t id() const { return id_; }
  Tape<T>* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Gradients produced by one backward sweep. Only nodes that require
/// gradients and were reached from the terminal have an entry.
template <std::floating_point T>
class GradMap {
 public:
  explicit GradMap(std::vector<std::optional<Tensor<T>>> grads)
      : grads_(std::move(grads)) {}

  bool contains(const Var<T>& v) const {
    return v.id() < grads_.size() && grads_[v.id()].has_value();
  }
  const Tensor<T>& at(const Var<T>& v) const {
    if (!contains(v)) {
      throw ConfigError(detail::concat("no gradient recorded for node ", v.id(),
                                       "; it does not require grad or does not "
                                       "reach the terminal"));
    }
    return *grads_[v.id()];
  }
  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& g : grads_) n += g.has_value();
    return n;
  }
  bool operator==(const GradMap&) const = default;

 private:
  std::vector<std::optional<Tensor<T>>> grads_;
};

/// Handed to backward closures: read input values, push input gradients.
template <std::floating_point T>
class GradSink {
 public:
  GradSink(const Tape<T>& tape, std::vector<std::optional<Tensor<T>>>& grads)
      : tape_(tape), grads_(grads) {}

  bool wants(std::size_t id) const;
  const Tensor<T>& value(std::size_t id) const;

  void add(std::size_t id, Tensor<T> g) {
    if (!wants(id)) return;
    auto& slot = grads_[id];
    if (!slot) {
      slot = std::move(g);
      return;
    }
    for (std::size_t i = 0; i < g.size(); ++i) (*slot)[i] += g[i];
  }

 private:
  const Tape<T>& tape_;
  std::vector<std::optional<Tensor<T>>>& grads_;
};

template <std::floating_point T>
class Tape {
 public:
  using Backward = std::function<void(const Tensor<T>& grad_out, GradSink<T>& sink)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), requires_grad, {}});
    return {this, nodes_.size() - 1};
  }
  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward fn) {
    bool rg = false;
    for (const auto& v : inputs) {
      check_owned(v);
      rg = rg || node(v.id()).requires_grad;
    }
    nodes_.push_back(Node{std::move(value), rg, rg ? std::move(fn) : Backward{}});
    return {this, nodes_.size() - 1};
  }

  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs, Backward fn) {
    bool rg = false;
    for (const auto& v : inputs) {
      check_owned(v);
      rg = rg || node(v.id()).requires_grad;
    }
    nodes_.push_back(Node{std::move(value), rg, rg ? std::move(fn) : Backward{}});
    return {this, nodes_.size() - 1};
  }

  /// Identity that always requires grad, so dTerminal/dx is reported for x
  /// even when nothing upstream is trainable (used for attention maps).
  Var<T> watch(const Var<T>& x) {
    check_owned(x);
    const std::size_t src = x.id();
    nodes_.push_back(Node{node(src).value, true,
                          [src](const Tensor<T>& g, GradSink<T>& sink) {
                            sink.add(src, g);
                          }});
    return {this, nodes_.size() - 1};
  }

  GradMap<T> backward(const Var<T>& terminal, T seed = T{1}) const {
    if (nodes_.empty()) throw ConfigError("backward called on an empty tape");
    check_owned(terminal);
    const Node& term = node(terminal.id());
    if (term.value.size() != 1) {
      throw ShapeError("backward requires a scalar terminal, got " +
                       shape_str(term.value.shape()));
    }
    std::vector<std::optional<Tensor<T>>> grads(nodes_.size());
    if (!term.requires_grad) return GradMap<T>(std::move(grads));
    grads[terminal.id()] = Tensor<T>(term.value.shape(), seed);
    GradSink<T> sink(*this, grads);
    for (std::size_t i = terminal.id() + 1; i-- > 0;) {
      const Node& n = nodes_[i];
      if (!n.backward || !grads[i]) continue;
      // Inputs always have smaller ids, so the sink never touches slot i.
      n.backward(*grads[i], sink);
    }
    return GradMap<T>(std::move(grads));
  }

  std::size_t size() const { return nodes_.size(); }
  std::size_t mark() const { return nodes_.size(); }
  /// Drop every node recorded after `mark`. Vars past the mark become invalid.
  void rewind(std::size_t mark) {
    if (mark > nodes_.size()) throw ConfigError("rewind past end of tape");
    nodes_.resize(mark);
  }

  const Tensor<T>& value(std::size_t id) const { return node(id).value; }
  bool requires_grad(std::size_t id) const { return node(id).requires_grad; }

 private:
  struct Node {
    Tensor<T> value;
    bool requires_grad = false;
    Backward backward;
  };

  const Node& node(std::size_t id) const {
    if (id >= nodes_.size()) {
      throw ConfigError(detail::concat("node ", id, " is not on this tape (size ",
                                       nodes_.size(), ")"));
    }
    return nodes_[id];
  }
  void check_owned(const Var<T>& v) const {
    if (v.tape() != this) throw ConfigError("variable belongs to a different tape");
    node(v.id());
  }

  std::vector<Node> nodes_;
};

template <std::floating_point T>
const Tensor<T>& Var<T>::value() const {
  if (!tape_) throw ConfigError("use of an unbound variable");
  return tape_->value(id_);
}

template <std::floating_point T>
bool Var<T>::requires_grad() const {
  return tape_ && tape_->requires_grad(id_);
}

template <std::floating_point T>
bool GradSink<T>::wants(std::size_t id) const {
  return tape_.requires_grad(id);
}

template <std::floating_point T>
const Tensor<T>& GradSink<T>::value(std::size_t id) const {
  return tape_.value(id);
}

}  // namespace promptlab
