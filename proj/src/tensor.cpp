#include "duco/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace duco {

namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value.assign(duco::numel(shape), v);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (duco::numel(shape) != values.size())
    throw std::invalid_argument("Tensor::from: shape " + shape_str(shape) + " does not hold " +
                                std::to_string(values.size()) + " values");
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double v) { return from({}, {v}); }

std::size_t Tensor::dim(int axis) const {
  const int r = static_cast<int>(rank());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw std::out_of_range("Tensor::dim: axis out of range for " + shape_str(shape()));
  return node_->shape[static_cast<std::size_t>(a)];
}

double Tensor::item() const {
  if (numel() != 1) throw std::logic_error("Tensor::item on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw std::out_of_range("Tensor::at: index rank mismatch");
  std::size_t flat = 0;
  std::size_t k = 0;
  for (auto i : index) {
    if (i >= node_->shape[k]) throw std::out_of_range("Tensor::at: index out of range");
    flat = flat * node_->shape[k] + i;
    ++k;
  }
  return node_->value[flat];
}

Tensor Tensor::detach() const {
  auto node = std::make_shared<Node>();
  node->shape = node_->shape;
  node->value = node_->value;
  return Tensor(std::move(node));
}

Tensor Tensor::clone() const {
  Tensor out = detach();
  out.node_->requires_grad = node_->requires_grad;
  return out;
}

void Tensor::backward() {
  if (numel() != 1) throw std::logic_error("backward() needs a scalar, got " + shape_str(shape()));
  if (!node_->requires_grad) return;

  // Iterative post-order DFS; graphs from unrolled recurrences can be deep.
  // `order` holds ownership: clearing a node's parents below must not free
  // nodes still waiting for their turn.
  std::vector<std::shared_ptr<Node>> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<std::shared_ptr<Node>, std::size_t>> stack;
  stack.emplace_back(node_, 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      std::shared_ptr<Node> p = n->parents[next++];
      if (p->requires_grad && !seen.count(p.get())) {
        seen.insert(p.get());
        stack.emplace_back(std::move(p), 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->ensure_grad();
  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = it->get();
    if (n->backward_fn) {
      n->ensure_grad();
      n->backward_fn(*n);
      n->backward_fn = nullptr;
      n->parents.clear();
      // Interior gradients are not needed once propagated.
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

Tensor make_result(Shape shape, std::vector<double> value, std::vector<Tensor> parents,
                   std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (grad_enabled()) {
    const bool any = std::any_of(parents.begin(), parents.end(),
                                 [](const Tensor& t) { return t.defined() && t.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      node->parents.reserve(parents.size());
      for (auto& p : parents)
        if (p.defined()) node->parents.push_back(p.node_ptr());
      node->backward_fn = std::move(backward_fn);
    }
  }
  return Tensor(std::move(node));
}

}  // namespace duco
