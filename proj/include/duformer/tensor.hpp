#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace duformer {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
class Tape;

namespace detail {

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until the first backward accumulation
  bool requires_grad = false;
  bool tracked = false;     // produced by a recorded op or a grad leaf
  Tape<T>* tape = nullptr;  // tape that recorded the producing op

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
};

}  // namespace detail

// Dense row-major tensor handle. Copying a Tensor copies the handle, not the
// storage; values are immutable after creation except for gradient
// accumulation and explicit parameter updates (optimizer steps, gradcheck
// perturbation), which require exclusive ownership.
template <typename T>
class Tensor {
 public:
  using Node = detail::TensorNode<T>;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), {}, requires_grad, T(0));
  }

  static Tensor full(Shape shape, T value) {
    return Tensor(std::move(shape), {}, false, value);
  }

  static Tensor ones(Shape shape) { return full(std::move(shape), T(1)); }

  static Tensor scalar(T value) { return full({1}, value); }

  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
      throw std::invalid_argument("tensor: data length " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->data = std::move(data);
    t.node_->requires_grad = requires_grad;
    t.node_->tracked = requires_grad;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t rank() const { return static_cast<int64_t>(node_->shape.size()); }
  int64_t dim(int64_t i) const { return node_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(node_->data.size()); }

  const std::vector<T>& data() const { return node_->data; }
  std::vector<T>& mutable_data() { return node_->data; }

  bool requires_grad() const { return node_->requires_grad; }
  bool tracked() const { return node_->tracked; }
  bool has_grad() const { return !node_->grad.empty(); }

  // Accumulated gradient; zeros if backward never reached this tensor.
  std::vector<T> grad() const {
    if (!node_->requires_grad)
      throw std::logic_error("tensor: grad queried on a tensor created without tape participation");
    if (node_->grad.empty()) return std::vector<T>(node_->data.size(), T(0));
    return node_->grad;
  }

  void zero_grad() { node_->grad.clear(); }

  T item() const {
    if (numel() != 1)
      throw std::invalid_argument("tensor: item() on non-scalar shape " + shape_str(shape()));
    return node_->data[0];
  }

  std::shared_ptr<Node> node() const { return node_; }

 private:
  Tensor(Shape shape, std::vector<T>, bool requires_grad, T fill) {
    node_ = std::make_shared<Node>();
    node_->shape = std::move(shape);
    node_->data.assign(static_cast<size_t>(shape_numel(node_->shape)), fill);
    node_->requires_grad = requires_grad;
    node_->tracked = requires_grad;
  }

  std::shared_ptr<Node> node_;
};

// Reverse-mode tape: an ordered record of backward rules appended in forward
// execution order. Replaying the record in reverse propagates gradients from a
// scalar loss to every reachable grad leaf. A tape is consumed by its single
// backward pass. One tape belongs to one logical thread at a time.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape() {
    if (active_ == this) active_ = nullptr;
  }

  // RAII activation; ops record onto the innermost active tape.
  class Scope {
   public:
    explicit Scope(Tape& t) : prev_(active_) { active_ = &t; }
    ~Scope() { active_ = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* prev_;
  };

  static Tape* active() { return active_; }

  size_t size() const { return entries_.size(); }
  bool consumed() const { return consumed_; }

  void record(std::function<void()> backward_fn) {
    entries_.push_back(std::move(backward_fn));
  }

  void backward(const Tensor<T>& loss) {
    if (consumed_)
      throw std::logic_error("tape: backward called twice on the same tape");
    if (loss.numel() != 1)
      throw std::invalid_argument("tape: backward requires a scalar loss, got shape " +
                                  shape_str(loss.shape()));
    if (loss.node()->tape != this)
      throw std::invalid_argument("tape: loss was not recorded on this tape");
    consumed_ = true;
    loss.node()->ensure_grad();
    loss.node()->grad[0] = T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  }

 private:
  static thread_local Tape* active_;
  std::vector<std::function<void()>> entries_;
  bool consumed_ = false;
};

template <typename T>
thread_local Tape<T>* Tape<T>::active_ = nullptr;

namespace detail {

// Tape that should record the op consuming `inputs`, or nullptr when the op
// runs untracked (no active tape, or no input carries gradient history).
template <typename T>
inline Tape<T>* recording_tape(std::initializer_list<const Tensor<T>*> inputs) {
  Tape<T>* tape = Tape<T>::active();
  if (!tape || tape->consumed()) return nullptr;
  for (const Tensor<T>* in : inputs)
    if (in->defined() && in->tracked()) return tape;
  return nullptr;
}

template <typename T>
inline void mark_output(Tape<T>* tape, Tensor<T>& out) {
  out.node()->tracked = true;
  out.node()->tape = tape;
}

}  // namespace detail

}  // namespace duformer
