#include "aqcf/autodiff.hpp"

#include <algorithm>
#include <unordered_set>

namespace aqcf {

namespace {

thread_local std::uint64_t next_seq = 1;
thread_local bool grad_mode = true;

}  // namespace

namespace detail {

void accumulate_grad(Node& node, Tensor&& g) {
  if (!node.requires_grad) return;
  if (node.grad.empty())
    node.grad = std::move(g);
  else
    node.grad.add_(g);
}

}  // namespace detail

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<detail::Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
  node_->seq = next_seq++;
  node_->op = "leaf";
}

const Tensor& Var::grad() const {
  if (!has_grad()) throw GradError("no gradient recorded for this tensor");
  return node_->grad;
}

void Var::zero_grad() {
  if (node_) node_->grad = Tensor();
}

Var Var::wrap(detail::NodePtr node) {
  Var v;
  v.node_ = std::move(node);
  return v;
}

Var make_result(std::string op, Tensor value, std::vector<Var> parents,
                std::function<void(detail::Node&)> backward) {
  auto node = std::make_shared<detail::Node>();
  node->value = std::move(value);
  node->seq = next_seq++;
  node->op = std::move(op);
  bool needs = false;
  if (grad_mode)
    for (const auto& p : parents) needs = needs || p.requires_grad();
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward = std::move(backward);
  }
  return Var::wrap(std::move(node));
}

NoGradGuard::NoGradGuard() : previous_(grad_mode) { grad_mode = false; }
NoGradGuard::~NoGradGuard() { grad_mode = previous_; }

bool grad_enabled() { return grad_mode; }

Tape Tape::reachable_from(const Var& root) {
  Tape tape;
  if (!root.defined()) return tape;
  std::unordered_set<detail::Node*> seen;
  std::vector<detail::Node*> stack{root.node().get()};
  while (!stack.empty()) {
    auto* n = stack.back();
    stack.pop_back();
    if (!n->requires_grad || !seen.insert(n).second) continue;
    tape.nodes_.push_back(n);
    for (const auto& p : n->parents) stack.push_back(p.get());
  }
  std::sort(tape.nodes_.begin(), tape.nodes_.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->seq < b->seq; });
  return tape;
}

void Tape::run_backward() const {
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    auto* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

std::size_t backward(const Var& loss) {
  if (!loss.defined()) throw GradError("backward on an undefined tensor");
  if (loss.numel() != 1)
    throw GradError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) throw GradError("backward on a tensor detached from the graph");
  auto tape = Tape::reachable_from(loss);
  // intermediate grads from an earlier pass over the same graph are discarded
  for (auto* n : tape.nodes())
    if (n->backward) n->grad = Tensor();
  auto& root = *loss.node();
  detail::accumulate_grad(root, Tensor::full(loss.shape(), 1.0, loss.dtype()));
  tape.run_backward();
  return tape.size();
}

}  // namespace aqcf
