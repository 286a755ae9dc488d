#include "drivekd/tensor.hpp"

#include <cmath>
#include <sstream>

namespace drivekd {

int numel_of(const std::vector<int>& shape) {
  int n = 1;
  for (int d : shape) {
    if (d < 0) throw TensorError("negative dimension");
    n *= d;
  }
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

Tensor Tensor::wrap(std::shared_ptr<TensorNode> n) {
  Tensor t;
  t.node_ = std::move(n);
  return t;
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  auto n = std::make_shared<TensorNode>();
  n->data.assign(static_cast<std::size_t>(numel_of(shape)), 0.0f);
  n->shape = std::move(shape);
  n->requires_grad = requires_grad;
  return wrap(std::move(n));
}

Tensor Tensor::full(std::vector<int> shape, float value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (auto& v : t.data()) v = value;
  return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<float> data,
                         bool requires_grad) {
  if (static_cast<int>(data.size()) != numel_of(shape)) {
    throw TensorError("data length " + std::to_string(data.size()) +
                      " does not match shape " + shape_str(shape));
  }
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->requires_grad = requires_grad;
  return wrap(std::move(n));
}

Tensor Tensor::scalar(float value) { return from_data({1}, {value}); }

Tensor Tensor::randn(std::vector<int> shape, RngStream& rng, float stddev,
                     bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (auto& v : t.data()) v = stddev * rng.normal();
  return t;
}

float Tensor::item() const {
  if (!is_scalar()) {
    throw TensorError("item() on non-scalar tensor " + shape_str(shape()));
  }
  return node_->data[0];
}

std::vector<float>& Tensor::grad() {
  if (node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0f);
  return node_->grad;
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0f);
}

Tensor Tensor::clone() const {
  auto n = std::make_shared<TensorNode>();
  n->shape = node_->shape;
  n->data = node_->data;
  n->requires_grad = node_->requires_grad;
  return wrap(std::move(n));
}

void Tape::backward(const Tensor& loss) {
  if (used_) throw TensorError("tape backward called twice without reset");
  if (!loss.defined() || !loss.is_scalar()) {
    throw TensorError("backward requires a scalar loss");
  }
  if (fns_.empty()) throw TensorError("backward on an empty (dangling) tape");
  used_ = true;
  Tensor l = loss;
  l.grad()[0] += 1.0f;
  for (auto it = fns_.rbegin(); it != fns_.rend(); ++it) (*it)();
}

void check_finite(const Tensor& t, const char* op_name) {
  for (float v : t.data()) {
    if (!std::isfinite(v)) {
      throw NumericsError(std::string(op_name) +
                          " produced a non-finite value");
    }
  }
}

uint64_t hash_bytes(const std::vector<float>& v) {
  uint64_t h = 0xcbf29ce484222325ull;
  const auto* p = reinterpret_cast<const unsigned char*>(v.data());
  for (std::size_t i = 0; i < v.size() * sizeof(float); ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace drivekd
