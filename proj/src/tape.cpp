#include "weckd/tape.hpp"

#include "weckd/errors.hpp"
#include "weckd/layers.hpp"

namespace weckd {

namespace ly = layers;

const Tensor& Tape::value(ValueId id) const { return node(id).value; }

Tape::Op Tape::op(ValueId id) const { return node(id).op; }

const Tape::Node& Tape::node(ValueId id) const {
  if (id.index >= nodes_.size()) {
    throw ContractError("tape value id " + std::to_string(id.index) + " out of range");
  }
  return nodes_[id.index];
}

ValueId Tape::push(Node n) {
  if (!n.value.all_finite()) {
    throw NumericError("non-finite value produced at tape node " + std::to_string(nodes_.size()));
  }
  nodes_.push_back(std::move(n));
  return ValueId{nodes_.size() - 1};
}

Tape::Node Tape::make(Op op, std::initializer_list<ValueId> inputs) const {
  Node n;
  n.op = op;
  for (const ValueId id : inputs) {
    const Node& in = node(id);
    n.inputs[n.num_inputs++] = id.index;
    n.requires_grad = n.requires_grad || in.requires_grad;
  }
  return n;
}

ValueId Tape::parameter(std::string name, Tensor value) {
  Node n;
  n.op = Op::parameter;
  n.requires_grad = true;
  n.name = std::move(name);
  n.value = std::move(value);
  return push(std::move(n));
}

ValueId Tape::constant(Tensor value) {
  Node n;
  n.op = Op::constant;
  n.value = std::move(value);
  return push(std::move(n));
}

ValueId Tape::conv2d(ValueId input, ValueId kernel, ValueId bias, std::size_t stride,
                     std::size_t pad) {
  Node n = make(Op::conv2d, {input, kernel, bias});
  n.stride = stride;
  n.pad = pad;
  n.value = ly::conv2d_forward(value(input), value(kernel), value(bias), stride, pad);
  return push(std::move(n));
}

ValueId Tape::relu(ValueId x) {
  Node n = make(Op::relu, {x});
  n.value = ly::relu_forward(value(x));
  return push(std::move(n));
}

ValueId Tape::maxpool2(ValueId x) {
  Node n = make(Op::maxpool2, {x});
  auto pooled = ly::maxpool2_forward(value(x));
  n.value = std::move(pooled.output);
  n.argmax = std::move(pooled.argmax);
  return push(std::move(n));
}

ValueId Tape::dense(ValueId x, ValueId weight, ValueId bias) {
  Node n = make(Op::dense, {x, weight, bias});
  n.value = ly::dense_forward(value(x), value(weight), value(bias));
  return push(std::move(n));
}

ValueId Tape::gap(ValueId x) {
  Node n = make(Op::gap, {x});
  n.value = ly::gap_forward(value(x));
  return push(std::move(n));
}

ValueId Tape::sigmoid(ValueId x) {
  Node n = make(Op::sigmoid, {x});
  n.value = ly::sigmoid_forward(value(x));
  return push(std::move(n));
}

ValueId Tape::softmax(ValueId x) {
  Node n = make(Op::softmax, {x});
  n.value = ly::softmax_rows(value(x), 1.0);
  return push(std::move(n));
}

ValueId Tape::channel_projection(ValueId features, ValueId weight, ValueId bias) {
  Node n = make(Op::channel_projection, {features, weight, bias});
  n.value = ly::channel_projection_forward(value(features), value(weight), value(bias));
  return push(std::move(n));
}

ValueId Tape::spatial_gate(ValueId features, ValueId gate) {
  Node n = make(Op::spatial_gate, {features, gate});
  n.value = ly::spatial_gate_forward(value(features), value(gate));
  return push(std::move(n));
}

ValueId Tape::add(ValueId a, ValueId b) {
  if (value(a).dims() != value(b).dims()) {
    throw ShapeError("tape add: " + value(a).shape_string() + " vs " + value(b).shape_string());
  }
  Node n = make(Op::add, {a, b});
  n.value = value(a);
  n.value += value(b);
  return push(std::move(n));
}

ValueId Tape::sum(ValueId x) {
  Node n = make(Op::sum, {x});
  double total = 0.0;
  for (double v : value(x).data()) total += v;
  n.value = Tensor::scalar(total);
  return push(std::move(n));
}

ValueId Tape::hybrid_objective(ValueId logits, HybridObjectiveSpec spec) {
  Node n = make(Op::hybrid_objective, {logits});
  const Tensor* teacher = spec.teacher_logits ? &*spec.teacher_logits : nullptr;
  last_objective_ =
      distill::hybrid_loss(value(logits), teacher, spec.targets, spec.alpha, spec.temperature);
  n.value = Tensor::scalar(last_objective_.total);
  n.objective = std::make_shared<const HybridObjectiveSpec>(std::move(spec));
  return push(std::move(n));
}

double Tape::loss() const {
  if (nodes_.empty() || !nodes_.back().value.is_scalar()) {
    throw ContractError("tape does not end in a scalar loss");
  }
  return nodes_.back().value[0];
}

const distill::HybridLoss& Tape::objective_parts() const { return last_objective_; }

std::vector<std::size_t> Tape::branch_pattern() const {
  std::vector<std::size_t> pattern;
  for (const Node& n : nodes_) {
    if (n.op == Op::relu) {
      for (const double v : nodes_[n.inputs[0]].value.data()) pattern.push_back(v > 0.0 ? 1 : 0);
    } else if (n.op == Op::maxpool2) {
      pattern.insert(pattern.end(), n.argmax.begin(), n.argmax.end());
    }
  }
  return pattern;
}

Tape Tape::replay() const {
  Tape t;
  for (const Node& n : nodes_) {
    const auto in = [&](std::size_t i) { return ValueId{n.inputs[i]}; };
    switch (n.op) {
      case Op::parameter: t.parameter(n.name, n.value); break;
      case Op::constant: t.constant(n.value); break;
      case Op::conv2d: t.conv2d(in(0), in(1), in(2), n.stride, n.pad); break;
      case Op::relu: t.relu(in(0)); break;
      case Op::maxpool2: t.maxpool2(in(0)); break;
      case Op::dense: t.dense(in(0), in(1), in(2)); break;
      case Op::gap: t.gap(in(0)); break;
      case Op::sigmoid: t.sigmoid(in(0)); break;
      case Op::softmax: t.softmax(in(0)); break;
      case Op::channel_projection: t.channel_projection(in(0), in(1), in(2)); break;
      case Op::spatial_gate: t.spatial_gate(in(0), in(1)); break;
      case Op::add: t.add(in(0), in(1)); break;
      case Op::sum: t.sum(in(0)); break;
      case Op::hybrid_objective: t.hybrid_objective(in(0), *n.objective); break;
    }
  }
  return t;
}

namespace {

void accumulate(std::vector<std::optional<Tensor>>& grads, std::size_t index, Tensor g) {
  if (grads[index]) {
    *grads[index] += g;
  } else {
    grads[index] = std::move(g);
  }
}

}  // namespace

GradientMap backward(const Tape& tape, const Tensor& seed_grad) {
  using Op = Tape::Op;
  const auto& nodes = tape.nodes_;
  if (nodes.empty() || !nodes.back().value.is_scalar()) {
    throw ContractError("backward: tape is not terminated in a scalar loss");
  }
  if (!seed_grad.is_scalar()) {
    throw ContractError("backward: seed gradient must be scalar, got " + seed_grad.shape_string());
  }

  std::vector<std::optional<Tensor>> grads(nodes.size());
  grads.back() = seed_grad.reshaped(nodes.back().value.dims());

  GradientMap result;
  for (std::size_t i = nodes.size(); i-- > 0;) {
    const auto& n = nodes[i];
    if (n.op == Op::parameter) {
      Tensor g = grads[i] ? std::move(*grads[i]) : Tensor(n.value.dims());
      auto [it, inserted] = result.try_emplace(n.name, std::move(g));
      if (!inserted) it->second += g;
      continue;
    }
    if (!grads[i] || !n.requires_grad) {
      grads[i].reset();
      continue;
    }
    const Tensor g = std::move(*grads[i]);
    grads[i].reset();
    const auto input = [&](std::size_t k) -> const auto& { return nodes[n.inputs[k]]; };
    const auto needs = [&](std::size_t k) { return input(k).requires_grad; };
    switch (n.op) {
      case Op::parameter:
      case Op::constant: break;
      case Op::conv2d: {
        auto cg = ly::conv2d_backward(input(0).value, input(1).value, g, n.stride, n.pad, needs(0));
        if (needs(0)) accumulate(grads, n.inputs[0], std::move(cg.input));
        if (needs(1)) accumulate(grads, n.inputs[1], std::move(cg.kernel));
        if (needs(2)) accumulate(grads, n.inputs[2], cg.bias.reshaped(input(2).value.dims()));
        break;
      }
      case Op::relu: accumulate(grads, n.inputs[0], ly::relu_backward(input(0).value, g)); break;
      case Op::maxpool2:
        accumulate(grads, n.inputs[0], ly::maxpool2_backward(input(0).value.dims(), n.argmax, g));
        break;
      case Op::dense: {
        auto dg = ly::dense_backward(input(0).value, input(1).value, g);
        if (needs(0)) accumulate(grads, n.inputs[0], std::move(dg.input));
        if (needs(1)) accumulate(grads, n.inputs[1], std::move(dg.weight));
        if (needs(2)) accumulate(grads, n.inputs[2], dg.bias.reshaped(input(2).value.dims()));
        break;
      }
      case Op::gap: accumulate(grads, n.inputs[0], ly::gap_backward(input(0).value.dims(), g)); break;
      case Op::sigmoid: accumulate(grads, n.inputs[0], ly::sigmoid_backward(n.value, g)); break;
      case Op::softmax: accumulate(grads, n.inputs[0], ly::softmax_backward(n.value, g)); break;
      case Op::channel_projection: {
        auto pg = ly::channel_projection_backward(input(0).value, input(1).value, g);
        if (needs(0)) accumulate(grads, n.inputs[0], std::move(pg.input));
        if (needs(1)) accumulate(grads, n.inputs[1], std::move(pg.weight));
        if (needs(2)) accumulate(grads, n.inputs[2], pg.bias.reshaped(input(2).value.dims()));
        break;
      }
      case Op::spatial_gate: {
        auto sg = ly::spatial_gate_backward(input(0).value, input(1).value, g);
        if (needs(0)) accumulate(grads, n.inputs[0], std::move(sg.input));
        if (needs(1)) accumulate(grads, n.inputs[1], std::move(sg.gate));
        break;
      }
      case Op::add:
        if (needs(0)) accumulate(grads, n.inputs[0], g);
        if (needs(1)) accumulate(grads, n.inputs[1], g);
        break;
      case Op::sum:
        accumulate(grads, n.inputs[0], Tensor(input(0).value.dims(), g[0]));
        break;
      case Op::hybrid_objective: {
        const auto& spec = *n.objective;
        const Tensor* teacher = spec.teacher_logits ? &*spec.teacher_logits : nullptr;
        Tensor dz = distill::hybrid_loss_grad(input(0).value, teacher, spec.targets, spec.alpha,
                                              spec.temperature, spec.t_squared);
        if (g[0] != 1.0) {
          for (auto& v : dz.data()) v *= g[0];
        }
        accumulate(grads, n.inputs[0], std::move(dz));
        break;
      }
    }
  }
  for (const auto& [name, grad] : result) {
    if (!grad.all_finite()) throw NumericError("non-finite gradient for parameter " + name);
  }
  return result;
}

}  // namespace weckd
