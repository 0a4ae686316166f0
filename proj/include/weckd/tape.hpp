#pragma once

#include <array>
#include <cstddef>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "weckd/distill_loss.hpp"
#include "weckd/tensor.hpp"

namespace weckd {

struct ValueId {
  std::size_t index = 0;
};

// Named trainable tensors, ordered by name.
using ParameterSet = std::map<std::string, Tensor>;

// Gradient per named trainable parameter.
using GradientMap = std::map<std::string, Tensor>;

// Terminal loss node: hybrid distillation objective on the recorded logits.
struct HybridObjectiveSpec {
  Tensor targets;                       // one-hot [B,K]
  std::optional<Tensor> teacher_logits;  // [B,K]; required when alpha < 1
  double alpha = 1.0;
  double temperature = 1.0;
  bool t_squared = false;
};

// Linear record of executed primitives. Every node's inputs precede it, so
// reverse iteration is a valid reverse-mode sweep. Values are computed
// eagerly while recording.
class Tape {
 public:
  enum class Op {
    parameter,
    constant,
    conv2d,
    relu,
    maxpool2,
    dense,
    gap,
    sigmoid,
    softmax,
    channel_projection,
    spatial_gate,
    add,
    sum,
    hybrid_objective,
  };

  ValueId parameter(std::string name, Tensor value);
  ValueId constant(Tensor value);

  ValueId conv2d(ValueId input, ValueId kernel, ValueId bias, std::size_t stride, std::size_t pad);
  ValueId relu(ValueId x);
  ValueId maxpool2(ValueId x);
  ValueId dense(ValueId x, ValueId weight, ValueId bias);
  ValueId gap(ValueId x);
  ValueId sigmoid(ValueId x);
  ValueId softmax(ValueId x);
  ValueId channel_projection(ValueId features, ValueId weight, ValueId bias);
  ValueId spatial_gate(ValueId features, ValueId gate);
  ValueId add(ValueId a, ValueId b);
  ValueId sum(ValueId x);
  ValueId hybrid_objective(ValueId logits, HybridObjectiveSpec spec);

  const Tensor& value(ValueId id) const;
  std::size_t size() const noexcept { return nodes_.size(); }
  Op op(ValueId id) const;

  // Value of the last recorded node, which must be scalar.
  double loss() const;
  // Parts of the most recent hybrid objective.
  const distill::HybridLoss& objective_parts() const;

  // Re-execute every node from the recorded leaves.
  Tape replay() const;

  // ReLU masks and max-pool winners of every recorded node, flattened. Two
  // tapes with equal patterns took the same piecewise-linear branch.
  std::vector<std::size_t> branch_pattern() const;

  friend GradientMap backward(const Tape& tape, const Tensor& seed_grad);

 private:
  struct Node {
    Op op = Op::constant;
    std::array<std::size_t, 3> inputs{};
    std::size_t num_inputs = 0;
    std::size_t stride = 1;
    std::size_t pad = 0;
    bool requires_grad = false;
    std::string name;
    Tensor value;
    std::vector<std::size_t> argmax;
    std::shared_ptr<const HybridObjectiveSpec> objective;
  };

  ValueId push(Node node);
  const Node& node(ValueId id) const;
  Node make(Op op, std::initializer_list<ValueId> inputs) const;

  std::vector<Node> nodes_;
  distill::HybridLoss last_objective_;
};

// Reverse sweep from the tape's terminal scalar. Returns a gradient for every
// parameter leaf (zeros if the parameter did not influence the loss).
GradientMap backward(const Tape& tape, const Tensor& seed_grad = Tensor::scalar(1.0));

}  // namespace weckd
