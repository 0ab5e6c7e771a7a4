#pragma once

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <functional>
#include <memory>
#include <unordered_map>
#include <utility>
#include <vector>

#include "metadd/core/common.hpp"

namespace metadd {

class Tensor;

namespace detail {

/// Recycling allocator for tensor buffers. Graph tensors are allocated and
/// released in bursts every optimization step; reusing buffers avoids
/// re-faulting pages on each step. Intentionally leaked at exit so deleters
/// never race static destruction.
class BufferPool {
 public:
  static std::shared_ptr<double[]> acquire(i64 n) {
    if (n <= 0) n = 1;
    BufferPool& pool = instance();
    auto it = pool.free_.find(n);
    double* p;
    if (it != pool.free_.end() && !it->second.empty()) {
      p = it->second.back();
      it->second.pop_back();
      pool.held_ -= n;
    } else {
      // constant 64-byte alignment keeps vectorized kernels bit-reproducible
      // across buffer reuse (no data-dependent peel lengths)
      std::size_t bytes = (std::size_t(n) * sizeof(double) + 63) / 64 * 64;
      p = static_cast<double*>(std::aligned_alloc(64, bytes));
      if (!p) throw std::bad_alloc();
    }
    return std::shared_ptr<double[]>(p, [n](double* q) { release(q, n); });
  }

 private:
  static void release(double* p, i64 n) {
    BufferPool& pool = instance();
    if (pool.held_ + n > kMaxHeldDoubles) {
      std::free(p);
      return;
    }
    pool.free_[n].push_back(p);
    pool.held_ += n;
  }

  static BufferPool& instance() {
    static thread_local BufferPool* pool = new BufferPool();
    return *pool;
  }

  static constexpr i64 kMaxHeldDoubles = i64(192) << 20;  // ~1.5 GB
  std::unordered_map<i64, std::vector<double*>> free_;
  i64 held_ = 0;
};

}  // namespace detail

/// VJP of one recorded op: given the upstream gradient and the op's output
/// (whose node holds the parent tensors), produce one gradient per parent.
/// Entries for parents that do not require grad may be left undefined.
using Vjp = std::function<std::vector<Tensor>(const Tensor& grad_out, const Tensor& out)>;

struct Node {
  Shape shape;
  std::shared_ptr<double[]> storage;
  bool requires_grad = false;
  bool leaf = false;
  std::shared_ptr<double[]> grad;  // leaf accumulation buffer
  std::vector<Tensor> parents;
  Vjp vjp;
  const char* op = "";
};

/// Thread-local recording switch. When off, ops run eagerly but the result is
/// detached from the graph (mirrors the usual grad-mode semantics).
class GradMode {
 public:
  static bool enabled() { return flag(); }
  static void set(bool v) { flag() = v; }

 private:
  static bool& flag() {
    thread_local bool f = true;
    return f;
  }
};

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(GradMode::enabled()) { GradMode::set(false); }
  ~NoGradGuard() { GradMode::set(prev); }
};

struct GradModeGuard {
  bool prev;
  explicit GradModeGuard(bool v) : prev(GradMode::enabled()) { GradMode::set(v); }
  ~GradModeGuard() { GradMode::set(prev); }
};

/// Value-semantic handle to an autodiff graph node. Data is a dense row-major
/// double buffer; views created by reshape share storage. Graph tensors are
/// treated as immutable; in-place writes through data() are reserved for leaf
/// updates between steps (optimizers, pixel updates).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

  static Tensor leaf(const Shape& shape, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->shape = shape;
    i64 count = numel_of(shape);
    n->storage = detail::BufferPool::acquire(count);
    std::fill(n->storage.get(), n->storage.get() + count, 0.0);
    n->requires_grad = requires_grad;
    n->leaf = true;
    n->op = "leaf";
    return Tensor(std::move(n));
  }

  static Tensor zeros(const Shape& shape) { return leaf(shape, false); }

  static Tensor full(const Shape& shape, double v) {
    Tensor t = leaf(shape, false);
    std::fill(t.data(), t.data() + t.numel(), v);
    return t;
  }

  static Tensor scalar(double v) { return full({1}, v); }

  static Tensor from(const Shape& shape, const std::vector<double>& data,
                     bool requires_grad = false) {
    check(i64(data.size()) == numel_of(shape),
          "Tensor::from: data size does not match shape " + shape_str(shape));
    Tensor t = leaf(shape, requires_grad);
    std::copy(data.begin(), data.end(), t.data());
    return t;
  }

  /// Result node of a recorded op. The buffer is uninitialized: every op
  /// writes all of its output elements.
  static Tensor result(const Shape& shape, std::vector<Tensor> parents, Vjp vjp,
                       const char* op) {
    auto n = std::make_shared<Node>();
    n->shape = shape;
    n->storage = detail::BufferPool::acquire(numel_of(shape));
    n->op = op;
    bool any = false;
    if (GradMode::enabled()) {
      for (const auto& p : parents)
        if (p.defined() && p.requires_grad()) any = true;
    }
    if (any) {
      n->requires_grad = true;
      n->parents = std::move(parents);
      n->vjp = std::move(vjp);
    }
    return Tensor(std::move(n));
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  i64 dim(int i) const { return n_->shape[std::size_t(i)]; }
  int ndim() const { return int(n_->shape.size()); }
  i64 numel() const { return numel_of(n_->shape); }

  double* data() { return n_->storage.get(); }
  const double* data() const { return n_->storage.get(); }

  double item() const {
    check(numel() == 1, "item() on tensor of shape " + shape_str(shape()));
    return n_->storage[0];
  }

  bool requires_grad() const { return n_ && n_->requires_grad; }
  bool is_leaf() const { return n_ && n_->leaf; }

  Tensor& set_requires_grad(bool v) {
    check(n_->leaf, "requires_grad can only be toggled on leaf tensors");
    n_->requires_grad = v;
    if (!v) n_->grad.reset();
    return *this;
  }

  /// New leaf sharing this tensor's storage, cut off from the graph.
  Tensor detach() const {
    auto n = std::make_shared<Node>();
    n->shape = n_->shape;
    n->storage = n_->storage;
    n->leaf = true;
    n->op = "detach";
    return Tensor(std::move(n));
  }

  /// Deep copy as a fresh leaf.
  Tensor clone(bool requires_grad = false) const {
    Tensor t = leaf(n_->shape, requires_grad);
    std::copy(data(), data() + numel(), t.data());
    return t;
  }

  bool has_grad() const { return n_->grad != nullptr; }

  Tensor grad() const {
    check(n_->grad != nullptr, "grad() called but no gradient was accumulated");
    auto n = std::make_shared<Node>();
    n->shape = n_->shape;
    n->storage = n_->grad;
    n->leaf = true;
    n->op = "grad";
    return Tensor(std::move(n));
  }

  void zero_grad() { n_->grad.reset(); }

  void accumulate_grad_raw(const Tensor& g) {
    check(g.shape() == shape(), "gradient shape mismatch");
    if (!n_->grad) {
      n_->grad = detail::BufferPool::acquire(numel());
      std::fill(n_->grad.get(), n_->grad.get() + numel(), 0.0);
    }
    const double* src = g.data();
    double* dst = n_->grad.get();
    for (i64 i = 0; i < numel(); ++i) dst[i] += src[i];
  }

  std::shared_ptr<Node> node() const { return n_; }

 private:
  std::shared_ptr<Node> n_;
};

namespace detail {

/// Topological order (parents before children) of the requires-grad subgraph
/// reachable from root. Iterative DFS; owning handles so vjps can safely
/// embed the visited nodes into a higher-order graph.
inline std::vector<std::shared_ptr<Node>> topo_order(const std::shared_ptr<Node>& root) {
  std::vector<std::shared_ptr<Node>> order;
  std::unordered_map<Node*, int> state;  // 0 new, 1 open, 2 done
  std::vector<std::pair<std::shared_ptr<Node>, std::size_t>> stack;
  stack.emplace_back(root, 0);
  state[root.get()] = 1;
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      const auto& p = node->parents[idx].node();
      ++idx;
      if (p && p->requires_grad && state[p.get()] == 0) {
        state[p.get()] = 1;
        stack.emplace_back(p, 0);
      }
    } else {
      state[node.get()] = 2;
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace detail

Tensor add(const Tensor& a, const Tensor& b);  // defined in ops.hpp

/// Reverse-mode sweep from a scalar loss. Returns the gradients of `inputs`
/// (zeros tensor when disconnected). With `create_graph` the VJPs are
/// recorded, so returned gradients are differentiable graph tensors. With
/// `accumulate_leaves` every reachable requires-grad leaf also receives the
/// gradient in its raw accumulation buffer (optimizer convention).
inline std::vector<Tensor> grad_of(const Tensor& output,
                                   const std::vector<Tensor>& inputs,
                                   bool create_graph = false,
                                   bool accumulate_leaves = false) {
  check(output.defined() && output.numel() == 1,
        "grad_of expects a scalar output");
  std::unordered_map<Node*, Tensor> gmap;
  if (output.requires_grad()) {
    auto order = detail::topo_order(output.node());
    gmap[output.node().get()] = Tensor::full(output.shape(), 1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Tensor self(*it);
      Node* node = self.node().get();
      auto git = gmap.find(node);
      if (git == gmap.end()) continue;
      Tensor g = git->second;
      if (node->vjp) {
        GradModeGuard guard(create_graph);
        std::vector<Tensor> pgrads = node->vjp(g, self);
        check(pgrads.size() == node->parents.size(),
              std::string("vjp arity mismatch in op ") + node->op);
        for (std::size_t i = 0; i < node->parents.size(); ++i) {
          const Tensor& p = node->parents[i];
          if (!p.defined() || !p.requires_grad() || !pgrads[i].defined()) continue;
          check(pgrads[i].shape() == p.shape(),
                std::string("vjp shape mismatch in op ") + node->op + ": got " +
                    shape_str(pgrads[i].shape()) + " for parent " +
                    shape_str(p.shape()));
          Node* pn = p.node().get();
          auto pit = gmap.find(pn);
          if (pit == gmap.end())
            gmap[pn] = pgrads[i];
          else
            pit->second = add(pit->second, pgrads[i]);
        }
      } else if (node->leaf && accumulate_leaves && node->requires_grad) {
        self.accumulate_grad_raw(g);
      }
    }
  }
  std::vector<Tensor> result;
  result.reserve(inputs.size());
  for (const auto& in : inputs) {
    auto it = gmap.find(in.node().get());
    if (it != gmap.end())
      result.push_back(it->second);
    else
      result.push_back(Tensor::zeros(in.shape()));
  }
  return result;
}

inline void backward(const Tensor& loss) { grad_of(loss, {}, false, true); }

}  // namespace metadd
