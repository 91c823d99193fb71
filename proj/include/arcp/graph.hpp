#pragma once

#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "arcp/tensor.hpp"

namespace arcp {

class Graph;

// Lightweight handle to a node in a Graph.
struct Var {
    Graph* g = nullptr;
    int id = -1;

    bool valid() const { return g != nullptr && id >= 0; }
    const Tensor& value() const;
    const Tensor& grad() const;
};

// Reverse-mode differentiation record. Nodes are appended in evaluation
// order, which is by construction a topological order; backward() walks the
// record once in reverse. A Graph must not be mutated from two threads
// concurrently, but distinct graphs are fully independent.
class Graph {
public:
    using BackwardFn = std::function<void(Graph&, int)>;

    struct Node {
        Tensor value;
        Tensor grad;  // allocated lazily during backward
        std::vector<int> parents;
        BackwardFn backward;
        bool needs_grad = false;
        bool touched = false;  // received any upstream gradient
    };

    // Leaf whose gradient is wanted (parameter or probed input).
    Var leaf(Tensor value) { return push(std::move(value), {}, nullptr, true); }

    // Leaf treated as a constant: no gradient is ever propagated into it.
    Var constant(Tensor value) { return push(std::move(value), {}, nullptr, false); }

    Var op(Tensor value, std::vector<int> parents, BackwardFn fn) {
        bool needs = false;
        for (int p : parents) needs = needs || node(p).needs_grad;
        return push(std::move(value), std::move(parents), needs ? std::move(fn) : nullptr, needs);
    }

    Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
    const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }

    Tensor& value(int id) { return node(id).value; }
    const Tensor& value(int id) const { return node(id).value; }

    bool needs_grad(int id) const { return node(id).needs_grad; }

    // Gradient buffer for a node, zero-initialised on first access.
    Tensor& grad_buf(int id) {
        Node& n = node(id);
        if (n.grad.empty()) n.grad = Tensor::zeros(n.value.shape());
        n.touched = true;
        return n.grad;
    }

    const Tensor& grad(int id) const {
        const Node& n = node(id);
        if (n.grad.empty())
            throw std::logic_error("Graph::grad: no gradient recorded for node " + std::to_string(id));
        return n.grad;
    }

    bool has_grad(int id) const { return !node(id).grad.empty(); }

    std::size_t size() const { return nodes_.size(); }

    // Reverse sweep from a scalar loss. Each node's backward runs exactly
    // once; leaves not reachable from the loss keep an all-zero gradient.
    void backward(const Var& loss) {
        if (loss.g != this) throw std::invalid_argument("Graph::backward: loss from another graph");
        Node& ln = node(loss.id);
        if (ln.value.size() != 1)
            throw std::invalid_argument("Graph::backward: loss must be scalar, got shape " +
                                        shape_to_string(ln.value.shape()));
        for (Node& n : nodes_) {
            if (n.needs_grad && !n.grad.empty()) {
                n.grad.fill(0.0);
                n.touched = false;
            }
        }
        if (!ln.needs_grad) return;  // loss independent of all leaves
        grad_buf(loss.id)[0] = 1.0;
        for (int id = loss.id; id >= 0; --id) {
            Node& n = node(id);
            if (!n.needs_grad || !n.touched || !n.backward) continue;
            n.backward(*this, id);
        }
    }

private:
    Var push(Tensor value, std::vector<int> parents, BackwardFn fn, bool needs) {
        Node n;
        n.value = std::move(value);
        n.parents = std::move(parents);
        n.backward = std::move(fn);
        n.needs_grad = needs;
        nodes_.push_back(std::move(n));
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }

    std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return g->value(id); }
inline const Tensor& Var::grad() const { return g->grad(id); }

}  // namespace arcp
