#include "transpose/tensor.hpp"

#include <cmath>
#include <stdexcept>

namespace transpose {

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) {
    if (d <= 0) throw std::invalid_argument("non-positive extent in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->shape = shape;
  node->value.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::full(const Shape& shape, double value) {
  Tensor t = zeros(shape);
  for (double& v : t.value()) v = value;
  return t;
}

Tensor Tensor::from_data(const Shape& shape, std::vector<double> values) {
  if (static_cast<int64_t>(values.size()) != shape_numel(shape)) {
    throw std::invalid_argument("data length " + std::to_string(values.size()) +
                                " does not match shape " + shape_str(shape));
  }
  auto node = std::make_shared<Node>();
  node->shape = shape;
  node->value = std::move(values);
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

std::span<double> Tensor::grad() const {
  if (node_->grad.empty()) node_->grad.assign(node_->value.size(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() const {
  if (!node_->grad.empty()) node_->grad.assign(node_->value.size(), 0.0);
}

Tensor Tensor::clone() const {
  auto node = std::make_shared<Node>();
  node->shape = node_->shape;
  node->value = node_->value;
  node->requires_grad = node_->requires_grad;
  return Tensor(std::move(node));
}

bool Tensor::all_finite() const {
  for (double v : node_->value) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tape::record(std::vector<Tensor> touched, std::function<void()> rule) {
  steps_.push_back(Step{std::move(touched), std::move(rule)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw std::invalid_argument("backward expects a scalar loss, got shape " +
                                (loss.defined() ? shape_str(loss.shape()) : std::string("<empty>")));
  }
  for (auto& step : steps_) {
    for (auto& t : step.touched) t.zero_grad();
  }
  Tensor seed = loss;
  seed.zero_grad();
  seed.grad()[0] = 1.0;
  for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) it->rule();
}

void Tape::clear() { steps_.clear(); }

}  // namespace transpose
