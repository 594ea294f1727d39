#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace transpose {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
int64_t shape_numel(const Shape& s);

// Dense row-major tensor of doubles with an optional gradient buffer.
// A Tensor is a cheap handle to shared storage; clone() deep-copies.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double value);
  static Tensor from_data(const Shape& shape, std::vector<double> values);
  static Tensor scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int64_t size() const { return static_cast<int64_t>(node_->value.size()); }

  std::span<double> value() { return node_->value; }
  std::span<const double> value() const { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool b) { node_->requires_grad = b; }

  // Gradient buffer, allocated zeroed on first access. Grads are an
  // accumulator side channel, writable through const handles; the value
  // data keeps strict const semantics.
  std::span<double> grad() const;
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  void zero_grad() const;

  double& operator()(int i) { return node_->value[static_cast<size_t>(i)]; }
  double operator()(int i) const { return node_->value[static_cast<size_t>(i)]; }
  double& operator()(int i, int j) {
    return node_->value[static_cast<size_t>(i) * node_->shape[1] + j];
  }
  double operator()(int i, int j) const {
    return node_->value[static_cast<size_t>(i) * node_->shape[1] + j];
  }
  double& operator()(int c, int y, int x) {
    return node_->value[(static_cast<size_t>(c) * node_->shape[1] + y) * node_->shape[2] + x];
  }
  double operator()(int c, int y, int x) const {
    return node_->value[(static_cast<size_t>(c) * node_->shape[1] + y) * node_->shape[2] + x];
  }

  Tensor clone() const;  // deep copy of values; grad not copied
  bool same_storage(const Tensor& other) const { return node_ == other.node_; }
  bool all_finite() const;

 private:
  struct Node {
    Shape shape;
    std::vector<double> value;
    mutable std::vector<double> grad;
    bool requires_grad = false;
  };
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}
  std::shared_ptr<Node> node_;
};

// Ordered log of backward rules. backward(loss) zeroes the grad buffers of
// every touched tensor, seeds d(loss)/d(loss) = 1 and replays the rules in
// reverse recording order, so each leaf grad is populated exactly once per
// call. One tape per model instance; recording is single-threaded.
class Tape {
 public:
  // `touched` lists every tensor whose grad the rule reads or writes.
  void record(std::vector<Tensor> touched, std::function<void()> rule);
  void backward(const Tensor& loss);
  void clear();
  std::size_t size() const { return steps_.size(); }

 private:
  struct Step {
    std::vector<Tensor> touched;
    std::function<void()> rule;
  };
  std::vector<Step> steps_;
};

}  // namespace transpose
