#include "mtgaze/tape.hpp"

#include "mtgaze/errors.hpp"

namespace mtgaze {

void GradTape::record(const Tensor& output, std::vector<const Tensor*> inputs, BackwardRule rule) {
  TapeNode node;
  node.output = output.id();
  node.output_shape = output.shape();
  for (const Tensor* in : inputs) {
    if (in->id() >= output.id()) {
      throw std::logic_error("tape input " + std::to_string(in->id()) +
                             " does not precede output " + std::to_string(output.id()));
    }
    node.inputs.push_back(in->id());
    node.input_shapes.push_back(in->shape());
  }
  node.backward = std::move(rule);
  produced_[node.output] = nodes_.size();
  nodes_.push_back(std::move(node));
}

void GradTape::clear() {
  nodes_.clear();
  produced_.clear();
}

const Tensor* Gradients::find(TensorId id) const {
  auto it = grads_.find(id);
  return it == grads_.end() ? nullptr : &it->second;
}

Tensor Gradients::of(const Tensor& t) const {
  if (const Tensor* g = find(t)) return *g;
  return Tensor(t.shape());
}

void Gradients::accumulate(TensorId id, const Shape& shape, const Tensor& contribution) {
  if (contribution.shape() != shape) {
    throw std::logic_error("gradient shape " + shape_to_string(contribution.shape()) +
                           " does not match tensor shape " + shape_to_string(shape));
  }
  auto it = grads_.find(id);
  if (it == grads_.end()) it = grads_.emplace(id, Tensor(shape)).first;
  auto dst = it->second.data();
  auto src = contribution.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

Gradients backward(const GradTape& tape, const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward needs a scalar loss, got shape " + shape_to_string(loss.shape()));
  }
  return backward(tape, loss, Tensor(loss.shape(), 1.0f));
}

Gradients backward(const GradTape& tape, const Tensor& output, const Tensor& seed) {
  if (!tape.produced(output.id())) {
    throw ValidationError("backward target was not produced under this tape");
  }
  if (seed.shape() != output.shape()) {
    throw ShapeError("seed gradient shape " + shape_to_string(seed.shape()) +
                     " does not match output shape " + shape_to_string(output.shape()));
  }
  Gradients grads;
  grads.accumulate(output.id(), output.shape(), seed);
  const auto& nodes = tape.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    const Tensor* g = grads.find(it->output);
    if (!g) continue;
    std::vector<Tensor> input_grads = it->backward(*g);
    for (std::size_t i = 0; i < it->inputs.size() && i < input_grads.size(); ++i) {
      grads.accumulate(it->inputs[i], it->input_shapes[i], input_grads[i]);
    }
  }
  return grads;
}

}  // namespace mtgaze
