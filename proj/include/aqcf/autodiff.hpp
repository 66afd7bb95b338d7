#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "aqcf/tensor.hpp"

namespace aqcf {

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;  // empty until something flows back
  bool requires_grad = false;
  std::uint64_t seq = 0;
  std::string op;
  std::vector<NodePtr> parents;
  // Reads `self.grad`, accumulates into parents that require grad.
  std::function<void(Node& self)> backward;
};

void accumulate_grad(Node& node, Tensor&& g);

}  // namespace detail

/// Handle to a value in the differentiation graph. Cheap to copy; copies alias.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  DType dtype() const { return node_->value.dtype(); }
  std::int64_t numel() const { return node_->value.numel(); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  const Tensor& grad() const;
  void zero_grad();

  bool defined() const { return static_cast<bool>(node_); }
  const std::string& op() const { return node_->op; }
  std::uint64_t seq() const { return node_->seq; }

  const detail::NodePtr& node() const { return node_; }
  static Var wrap(detail::NodePtr node);

 private:
  detail::NodePtr node_;
};

/// Records an op result. Parents and the backward rule are dropped when no
/// parent requires grad or a NoGradGuard is active.
Var make_result(std::string op, Tensor value, std::vector<Var> parents,
                std::function<void(detail::Node&)> backward);

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// The recorded nodes reachable from a root, in execution order.
class Tape {
 public:
  static Tape reachable_from(const Var& root);

  const std::vector<detail::Node*>& nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }

  /// Visits every node once in reverse execution order.
  void run_backward() const;

 private:
  std::vector<detail::Node*> nodes_;
};

class GradError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Seeds d(loss)/d(loss) = 1 and propagates. Gradients accumulate into leaves.
/// Returns the number of nodes visited.
std::size_t backward(const Var& loss);

}  // namespace aqcf
