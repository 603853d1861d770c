#pragma once

#include <functional>
#include <optional>
#include <unordered_map>
#include <vector>

#include "mtgaze/tensor.hpp"

namespace mtgaze {

// Maps the gradient of one recorded output to gradients of its inputs, in
// the order the inputs were recorded.
using BackwardRule = std::function<std::vector<Tensor>(const Tensor& grad_output)>;

struct TapeNode {
  TensorId output;
  Shape output_shape;
  std::vector<TensorId> inputs;
  std::vector<Shape> input_shapes;
  BackwardRule backward;
};

// Append-only record of one forward episode. Not thread-safe; one tape per
// forward/backward episode.
class GradTape {
 public:
  void record(const Tensor& output, std::vector<const Tensor*> inputs, BackwardRule rule);

  const std::vector<TapeNode>& nodes() const { return nodes_; }
  bool produced(TensorId id) const { return produced_.count(id) != 0; }
  void clear();

 private:
  std::vector<TapeNode> nodes_;
  std::unordered_map<TensorId, std::size_t> produced_;
};

class Gradients {
 public:
  const Tensor* find(const Tensor& t) const { return find(t.id()); }
  const Tensor* find(TensorId id) const;
  // Gradient of `t`, or zeros of its shape when `t` did not influence the loss.
  Tensor of(const Tensor& t) const;
  bool contains(const Tensor& t) const { return find(t) != nullptr; }
  std::size_t size() const { return grads_.size(); }

  void accumulate(TensorId id, const Shape& shape, const Tensor& contribution);

 private:
  std::unordered_map<TensorId, Tensor> grads_;
};

// Reverse-mode sweep from a scalar loss recorded on the tape.
Gradients backward(const GradTape& tape, const Tensor& loss);

// Reverse-mode sweep from an arbitrary recorded output with an explicit seed
// gradient of the same shape.
Gradients backward(const GradTape& tape, const Tensor& output, const Tensor& seed);

}  // namespace mtgaze
