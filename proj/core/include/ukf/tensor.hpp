#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "ukf/common.hpp"
#include "ukf/rng.hpp"

namespace ukf {

// Dense row-major tensor. When it takes part in a recorded forward pass it
// doubles as a node of the differentiation record: `grad` accumulates
// dLoss/dTensor additively across every use.
template <typename T>
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until touched by backward
  bool requires_grad = false;

  int64_t numel() const { return static_cast<int64_t>(data.size()); }

  bool has_grad() const { return !grad.empty(); }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }

  void zero_grad() {
    if (!grad.empty()) std::fill(grad.begin(), grad.end(), T(0));
  }
};

template <typename T>
using TensorPtr = std::shared_ptr<Tensor<T>>;

template <typename T>
TensorPtr<T> make_tensor(std::vector<int64_t> shape, bool requires_grad = false) {
  auto t = std::make_shared<Tensor<T>>();
  const int64_t n = numel_of(shape);
  if (n < 0) throw ShapeError("make_tensor: negative dimension in " + shape_str(shape));
  t->shape = std::move(shape);
  t->data.assign(static_cast<size_t>(n), T(0));
  t->requires_grad = requires_grad;
  return t;
}

template <typename T>
TensorPtr<T> make_tensor(std::vector<int64_t> shape, std::vector<T> data,
                         bool requires_grad = false) {
  auto t = std::make_shared<Tensor<T>>();
  if (numel_of(shape) != static_cast<int64_t>(data.size())) {
    throw ShapeError("make_tensor: shape " + shape_str(shape) + " does not match data length " +
                     std::to_string(data.size()));
  }
  t->shape = std::move(shape);
  t->data = std::move(data);
  t->requires_grad = requires_grad;
  return t;
}

template <typename T>
TensorPtr<T> scalar_tensor(T value, bool requires_grad = false) {
  return make_tensor<T>({1}, std::vector<T>{value}, requires_grad);
}

template <typename T>
TensorPtr<T> randn_tensor(std::vector<int64_t> shape, Rng& rng, double stddev = 1.0,
                          bool requires_grad = false) {
  auto t = make_tensor<T>(std::move(shape), requires_grad);
  for (auto& v : t->data) v = static_cast<T>(rng.normal(0.0, stddev));
  return t;
}

// Record of one forward pass: the backward rules of the executed operations
// in execution order. Replaying them in reverse visits each exactly once.
template <typename T>
class Tape {
 public:
  void record(std::function<void()> backward_step) {
    steps_.push_back(std::move(backward_step));
  }

  size_t size() const { return steps_.size(); }

  void clear() { steps_.clear(); }

  // Seeds dLoss/dLoss = 1 and replays every recorded rule in reverse.
  void backward(const TensorPtr<T>& loss) {
    if (!loss || loss->numel() != 1) {
      throw ContractError("backward: loss must be a scalar tensor");
    }
    loss->ensure_grad();
    loss->grad[0] = T(1);
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
  }

  static Tape*& active() {
    thread_local Tape* current = nullptr;
    return current;
  }

 private:
  std::vector<std::function<void()>> steps_;
};

// RAII scope that makes `tape` the active record for this thread. Operations
// executed inside the scope are differentiable; outside they are plain values.
template <typename T>
class Recording {
 public:
  explicit Recording(Tape<T>& tape) : previous_(Tape<T>::active()) {
    Tape<T>::active() = &tape;
  }
  ~Recording() { Tape<T>::active() = previous_; }

  Recording(const Recording&) = delete;
  Recording& operator=(const Recording&) = delete;

 private:
  Tape<T>* previous_;
};

// Convenience: backward through the active record.
template <typename T>
void backward(const TensorPtr<T>& loss) {
  Tape<T>* tape = Tape<T>::active();
  if (!tape) throw ContractError("backward: no active differentiation record");
  tape->backward(loss);
}

}  // namespace ukf
