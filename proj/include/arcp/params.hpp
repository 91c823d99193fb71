#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "arcp/graph.hpp"
#include "arcp/rng.hpp"
#include "arcp/tensor.hpp"

namespace arcp {

// Named tensor collection with stable insertion order. Holds both trainable
// parameters and non-trainable buffers (e.g. batchnorm running statistics);
// the owner decides which store a tensor goes into.
class ParamStore {
public:
    Tensor& add(const std::string& name, Tensor t) {
        if (map_.count(name)) throw std::invalid_argument("ParamStore: duplicate name '" + name + "'");
        order_.push_back(name);
        return map_.emplace(name, std::move(t)).first->second;
    }

    bool has(const std::string& name) const { return map_.count(name) != 0; }

    Tensor& get(const std::string& name) {
        auto it = map_.find(name);
        if (it == map_.end()) throw std::invalid_argument("ParamStore: unknown name '" + name + "'");
        return it->second;
    }

    const Tensor& get(const std::string& name) const {
        auto it = map_.find(name);
        if (it == map_.end()) throw std::invalid_argument("ParamStore: unknown name '" + name + "'");
        return it->second;
    }

    const std::vector<std::string>& names() const { return order_; }
    std::size_t count() const { return order_.size(); }

    std::int64_t total_size() const {
        std::int64_t n = 0;
        for (const auto& name : order_) n += map_.at(name).size();
        return n;
    }

private:
    std::vector<std::string> order_;
    std::unordered_map<std::string, Tensor> map_;
};

// Graph leaves for every parameter of a store, keyed by name.
class BoundParams {
public:
    BoundParams() = default;

    BoundParams(Graph& g, const ParamStore& store) {
        for (const auto& name : store.names()) vars_.emplace(name, g.leaf(store.get(name)));
    }

    // Bind as constants: forward-only evaluation, no gradient bookkeeping.
    static BoundParams frozen(Graph& g, const ParamStore& store) {
        BoundParams b;
        for (const auto& name : store.names()) b.vars_.emplace(name, g.constant(store.get(name)));
        return b;
    }

    // View onto the names under a prefix, with the prefix stripped; lets a
    // submodel builder run against a shared combined store.
    static BoundParams prefixed(const BoundParams& inner, const std::string& prefix) {
        BoundParams b;
        for (const auto& [name, var] : inner.vars_)
            if (name.rfind(prefix, 0) == 0) b.vars_.emplace(name.substr(prefix.size()), var);
        return b;
    }

    Var operator()(const std::string& name) const {
        auto it = vars_.find(name);
        if (it == vars_.end()) throw std::invalid_argument("BoundParams: unknown name '" + name + "'");
        return it->second;
    }

    bool has(const std::string& name) const { return vars_.count(name) != 0; }

private:
    std::unordered_map<std::string, Var> vars_;
};

using GradMap = std::unordered_map<std::string, Tensor>;

// Pull accumulated gradients out of a graph after backward(). Parameters the
// loss never touched get zero gradients.
inline GradMap collect_grads(Graph& g, const BoundParams& bound, const ParamStore& store) {
    GradMap out;
    for (const auto& name : store.names()) {
        Var v = bound(name);
        if (g.has_grad(v.id))
            out.emplace(name, g.node(v.id).grad);
        else
            out.emplace(name, Tensor::zeros(store.get(name).shape()));
    }
    return out;
}

// Glorot/Xavier uniform: +-sqrt(6 / (fan_in + fan_out)).
inline Tensor glorot_uniform(Shape shape, int fan_in, int fan_out, Rng& rng) {
    Tensor t(std::move(shape));
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    rng.fill_uniform(t, -limit, limit);
    return t;
}

}  // namespace arcp
