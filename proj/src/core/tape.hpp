#pragma once

#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "core/tensor.hpp"

namespace colidr {

class Tape;

// Trainable tensor owned by a module. Gradients accumulate here after
// Tape::backward; the optimizer and checkpoint writer address parameters
// by name.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor v)
      : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros(value.shape)) {
    value.requires_grad = true;
  }
  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), 0.0); }
};

// Handle into a tape node. Cheap to copy; only valid while the tape lives.
struct Value {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& tensor() const;
  double scalar() const;
};

// One recorded op. Backward closures read input tensors and push gradient
// contributions through the tape by node id, so vector reallocation during
// construction can never dangle.
struct Node {
  const char* op = "";
  Tensor out;
  Tensor grad;  // allocated lazily during backward
  std::vector<int> inputs;
  std::function<void(Tape&, Node&)> backward;
  bool needs_grad = false;
  Parameter* bound = nullptr;
};

// Reverse-mode tape. Nodes are appended in construction order, which is a
// topological order by construction; backward walks them strictly in
// reverse. One tape per forward pass, single writer.
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  // Finite scan of op outputs; on by default per the error-state contract,
  // switchable only for hot inner loops that re-check at the loss.
  void set_check_finite(bool b) { check_finite_ = b; }

  Value leaf(Tensor t);
  Value constant(Tensor t);
  Value param(Parameter& p);

  int add_node(const char* op, Tensor out, std::vector<int> inputs,
               std::function<void(Tape&, Node&)> backward);

  // Seeds d(loss)/d(loss)=1, sweeps nodes in reverse construction order and
  // accumulates leaf gradients into their bound Parameters. Loss must be
  // scalar; calling twice on one tape is an error.
  void backward(Value loss);

  const Tensor& out(int id) const { return nodes_[id].out; }
  Tensor& grad_ref(int id);
  bool node_needs_grad(int id) const { return nodes_[id].needs_grad; }
  const Tensor& grad_of(Value v) const;
  std::size_t size() const { return nodes_.size(); }
  bool backward_ran() const { return backward_ran_; }

 private:
  // deque: references into nodes stay valid while the graph grows
  std::deque<Node> nodes_;
  bool grad_enabled_;
  bool backward_ran_ = false;
  bool check_finite_ = true;
};

}  // namespace colidr
