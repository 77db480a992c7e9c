#include "core/tape.hpp"

namespace colidr {

const Tensor& Value::tensor() const {
  CLDR_CHECK(valid(), ErrorKind::Internal, "use of detached Value handle");
  return tape->out(id);
}

double Value::scalar() const {
  const Tensor& t = tensor();
  CLDR_CHECK(t.numel() == 1, ErrorKind::ShapeMismatch,
             "scalar() on tensor of shape " << shape_str(t.shape));
  return t.data[0];
}

Value Tape::leaf(Tensor t) {
  bool wants = t.requires_grad && grad_enabled_;
  int id = static_cast<int>(nodes_.size());
  Node n;
  n.op = "leaf";
  n.out = std::move(t);
  n.needs_grad = wants;
  nodes_.push_back(std::move(n));
  return Value{this, id};
}

Value Tape::constant(Tensor t) {
  t.requires_grad = false;
  return leaf(std::move(t));
}

Value Tape::param(Parameter& p) {
  int id = static_cast<int>(nodes_.size());
  Node n;
  n.op = "param";
  n.out = p.value;  // copy; parameters stay untouched until the optimizer steps
  n.needs_grad = grad_enabled_;
  n.bound = &p;
  nodes_.push_back(std::move(n));
  return Value{this, id};
}

int Tape::add_node(const char* op, Tensor out, std::vector<int> inputs,
                   std::function<void(Tape&, Node&)> backward) {
  if (check_finite_) {
    CLDR_CHECK(out.all_finite(), ErrorKind::Numeric,
               "op '" << op << "' produced a non-finite value (shape "
                      << shape_str(out.shape) << ")");
  }
  bool needs = false;
  if (grad_enabled_) {
    for (int i : inputs) {
      if (nodes_[i].needs_grad) {
        needs = true;
        break;
      }
    }
  }
  int id = static_cast<int>(nodes_.size());
  Node n;
  n.op = op;
  n.out = std::move(out);
  n.inputs = std::move(inputs);
  n.needs_grad = needs;
  if (needs) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return id;
}

Tensor& Tape::grad_ref(int id) {
  Node& n = nodes_[id];
  if (n.grad.numel() == 0) n.grad = Tensor::zeros(n.out.shape);
  return n.grad;
}

const Tensor& Tape::grad_of(Value v) const {
  CLDR_CHECK(v.tape == this, ErrorKind::Internal, "grad_of: value from another tape");
  return nodes_[v.id].grad;
}

void Tape::backward(Value loss) {
  CLDR_CHECK(loss.tape == this, ErrorKind::InvalidArgument,
             "backward: loss detached from this graph");
  CLDR_CHECK(grad_enabled_, ErrorKind::InvalidArgument,
             "backward: tape was built with gradients disabled");
  CLDR_CHECK(!backward_ran_, ErrorKind::InvalidArgument,
             "backward: repeated backward on the same tape without reset");
  const Tensor& l = nodes_[loss.id].out;
  CLDR_CHECK(l.numel() == 1, ErrorKind::ShapeMismatch,
             "backward: loss must be scalar, got shape " << shape_str(l.shape));
  backward_ran_ = true;

  grad_ref(loss.id).data[0] = 1.0;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.needs_grad || !n.backward) continue;
    if (n.grad.numel() == 0) continue;  // never reached from the loss
    n.backward(*this, n);
  }
  for (auto& n : nodes_) {
    if (n.bound != nullptr && n.needs_grad && n.grad.numel() != 0) {
      double* g = n.bound->grad.data.data();
      const double* s = n.grad.data.data();
      for (std::size_t i = 0; i < n.grad.numel(); ++i) g[i] += s[i];
    }
  }
}

}  // namespace colidr
