#ifndef MTSEG_TAPE_HPP
#define MTSEG_TAPE_HPP

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mtseg/tensor.hpp"

namespace mtseg {

template <typename Scalar>
class Tape;

/// Handle to a tensor recorded on a tape.
template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
};

/// Record of one forward computation: values plus the op nodes needed to run
/// reverse-mode differentiation. Nodes are stored in execution order, so the
/// backward sweep is a single reverse pass that visits each node exactly once.
/// A tape is confined to one thread; independent tapes may run concurrently.
template <typename Scalar>
class Tape {
 public:
  using T = Tensor<Scalar>;
  using Storage = typename T::Storage;
  using BackwardFn = std::function<void(Tape&, int out_id)>;

  Var<Scalar> leaf(T value) {
    vals_.push_back(std::move(value));
    is_leaf_.push_back(true);
    return {this, static_cast<int>(vals_.size() - 1)};
  }

  Var<Scalar> constant(T value) {
    value.requires_grad = false;
    return leaf(std::move(value));
  }

  const T& value(Var<Scalar> v) const { return vals_.at(static_cast<std::size_t>(v.id)); }
  const T& value_at(int id) const { return vals_.at(static_cast<std::size_t>(id)); }

  bool wants_grad(int id) const { return vals_.at(static_cast<std::size_t>(id)).requires_grad; }

  bool has_grad(Var<Scalar> v) const { return vals_.at(static_cast<std::size_t>(v.id)).has_grad(); }

  const Storage& grad_at(int id) const {
    const T& t = vals_.at(static_cast<std::size_t>(id));
    if (!t.has_grad()) throw std::runtime_error("Tape::grad_at: no gradient recorded");
    return t.grad;
  }

  const Storage& grad(Var<Scalar> v) const {
    const T& t = vals_.at(static_cast<std::size_t>(v.id));
    if (!t.has_grad()) throw std::runtime_error("Tape::grad: no gradient recorded for this var");
    return t.grad;
  }

  std::size_t num_nodes() const { return nodes_.size(); }
  std::size_t num_values() const { return vals_.size(); }

  /// Used by op implementations: registers the op output and its backward.
  Var<Scalar> emit(T out, const char* op, std::vector<int> inputs, BackwardFn backward) {
    check_finite(out, op);
    vals_.push_back(std::move(out));
    is_leaf_.push_back(false);
    const int out_id = static_cast<int>(vals_.size() - 1);
    nodes_.push_back(Node{op, std::move(inputs), out_id, std::move(backward)});
    return {this, out_id};
  }

  const char* op_kind(std::size_t node) const { return nodes_.at(node).op; }

  void accumulate_grad(int id, const Storage& g) {
    T& t = vals_.at(static_cast<std::size_t>(id));
    t.ensure_grad();
    t.grad += g;
  }

  Storage& grad_buffer(int id) {
    T& t = vals_.at(static_cast<std::size_t>(id));
    t.ensure_grad();
    return t.grad;
  }

  /// Reverse sweep from a scalar output. Populates grad on every reachable
  /// value and on every requires_grad leaf (zero when unreachable).
  void backward(Var<Scalar> output) {
    if (output.tape != this) throw std::invalid_argument("backward: var belongs to a different tape");
    T& out = vals_.at(static_cast<std::size_t>(output.id));
    if (out.size() != 1)
      throw std::invalid_argument("backward: output must be a scalar tensor, got shape " + shape_str(out.shape));
    out.ensure_grad();
    out.grad[0] += Scalar(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (!vals_[static_cast<std::size_t>(it->output)].has_grad()) continue;  // not on a path to the output
      it->backward(*this, it->output);
    }
    for (std::size_t i = 0; i < vals_.size(); ++i) {
      if (is_leaf_[i] && vals_[i].requires_grad) vals_[i].ensure_grad();
    }
  }

 private:
  struct Node {
    const char* op;
    std::vector<int> inputs;
    int output;
    BackwardFn backward;
  };

  std::vector<T> vals_;
  std::vector<bool> is_leaf_;
  std::vector<Node> nodes_;
};

template <typename Scalar>
void backward(Tape<Scalar>& tape, Var<Scalar> output) {
  tape.backward(output);
}

}  // namespace mtseg

#endif  // MTSEG_TAPE_HPP
