#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "drivekd/rng.hpp"

namespace drivekd {

class TensorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when a forward op produces a NaN or Inf.
class NumericsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TensorNode {
  std::vector<int> shape;
  std::vector<float> data;   // row-major
  std::vector<float> grad;   // empty until first accumulation
  bool requires_grad = false;
};

/// Value-semantic handle to a dense float32 tensor. Copies are shallow
/// (shared storage); use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, float value,
                     bool requires_grad = false);
  static Tensor from_data(std::vector<int> shape, std::vector<float> data,
                          bool requires_grad = false);
  static Tensor scalar(float value);
  static Tensor randn(std::vector<int> shape, RngStream& rng,
                      float stddev = 1.0f, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  int numel() const { return static_cast<int>(node_->data.size()); }
  bool is_scalar() const { return numel() == 1; }
  // Row/column view: rank-2 tensors are rows x cols, rank-1 tensors are
  // treated as a column of length shape[0], scalars as 1x1.
  int rows() const { return node_->shape.empty() ? 1 : node_->shape[0]; }
  int cols() const { return rows() == 0 ? 0 : numel() / rows(); }

  float item() const;
  float at(int r, int c) const { return node_->data[r * cols() + c]; }

  std::vector<float>& data() { return node_->data; }
  const std::vector<float>& data() const { return node_->data; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  /// Gradient buffer, allocated (zero-filled) on first access.
  std::vector<float>& grad();
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad();

  /// Deep copy; the copy carries no gradient buffer.
  Tensor clone() const;

  TensorNode* node() const { return node_.get(); }
  std::shared_ptr<TensorNode> shared_node() const { return node_; }

  static Tensor wrap(std::shared_ptr<TensorNode> n);

 private:
  std::shared_ptr<TensorNode> node_;
};

/// Ordered record of executed ops. Each op pushes one backward closure;
/// backward() replays them in exact reverse execution order. A tape can run
/// backward once; reset() clears it for reuse. Ops accept a null tape for
/// pure (gradient-free) evaluation.
class Tape {
 public:
  void record(std::function<void()> fn) { fns_.push_back(std::move(fn)); }

  /// Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse.
  /// Errors: non-scalar loss, empty tape, or backward already run.
  void backward(const Tensor& loss);

  void reset() {
    fns_.clear();
    used_ = false;
  }

  std::size_t num_ops() const { return fns_.size(); }
  bool used() const { return used_; }

 private:
  std::vector<std::function<void()>> fns_;
  bool used_ = false;
};

int numel_of(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);
void check_finite(const Tensor& t, const char* op_name);

/// FNV-1a over the raw float bytes; used for frozen-parameter audits.
uint64_t hash_bytes(const std::vector<float>& v);

}  // namespace drivekd
