#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>

#include "arcp/params.hpp"
#include "arcp/tensor.hpp"

namespace arcp {

inline double global_grad_norm(const GradMap& grads) {
    double sq = 0.0;
    for (const auto& [name, g] : grads)
        for (std::int64_t i = 0; i < g.size(); ++i) sq += g[i] * g[i];
    return std::sqrt(sq);
}

// Rescales all gradients so the global L2 norm does not exceed max_norm.
inline void clip_global_norm(GradMap& grads, double max_norm) {
    if (max_norm <= 0.0) throw std::invalid_argument("clip_global_norm: max_norm must be positive");
    const double norm = global_grad_norm(grads);
    if (norm <= max_norm) return;
    const double scale = max_norm / norm;
    for (auto& [name, g] : grads)
        for (std::int64_t i = 0; i < g.size(); ++i) g[i] *= scale;
}

// Polynomial learning-rate decay from lr0 down to end_lr over total_steps;
// constant when total_steps == 0.
struct PolyDecay {
    double end_lr = 0.0;
    std::int64_t total_steps = 0;
    double power = 1.0;

    double at(double lr0, std::int64_t step) const {
        if (total_steps <= 0) return lr0;
        const double frac = std::min(static_cast<double>(step), static_cast<double>(total_steps)) /
                            static_cast<double>(total_steps);
        return (lr0 - end_lr) * std::pow(1.0 - frac, power) + end_lr;
    }
};

// Adam and SGD-with-momentum behind one state record. Moment buffers are
// created per parameter on first use and always match the parameter shapes.
class Optimizer {
public:
    enum class Kind { Adam, SgdMomentum };

    struct Config {
        Kind kind = Kind::Adam;
        double lr = 1e-3;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double momentum = 0.9;
        PolyDecay decay;  // SgdMomentum only
    };

    static Optimizer adam(double lr) {
        Config c;
        c.kind = Kind::Adam;
        c.lr = lr;
        return Optimizer(c);
    }

    static Optimizer sgd_momentum(double lr, double momentum, PolyDecay decay = {}) {
        Config c;
        c.kind = Kind::SgdMomentum;
        c.lr = lr;
        c.momentum = momentum;
        c.decay = decay;
        return Optimizer(c);
    }

    explicit Optimizer(Config cfg) : cfg_(cfg) {}

    const Config& config() const { return cfg_; }
    std::int64_t step_count() const { return step_; }

    void step(ParamStore& params, const GradMap& grads) {
        ++step_;
        for (const auto& name : params.names()) {
            auto it = grads.find(name);
            if (it == grads.end()) continue;
            Tensor& theta = params.get(name);
            const Tensor& g = it->second;
            if (!theta.same_shape(g))
                throw std::invalid_argument("Optimizer: gradient shape mismatch for '" + name + "'");
            if (cfg_.kind == Kind::Adam)
                adam_update(name, theta, g);
            else
                sgd_update(name, theta, g);
        }
    }

private:
    void adam_update(const std::string& name, Tensor& theta, const Tensor& g) {
        Tensor& m = buffer(m_, name, theta.shape());
        Tensor& v = buffer(v_, name, theta.shape());
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (std::int64_t i = 0; i < theta.size(); ++i) {
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            theta[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }

    void sgd_update(const std::string& name, Tensor& theta, const Tensor& g) {
        Tensor& vel = buffer(m_, name, theta.shape());
        const double lr = cfg_.decay.at(cfg_.lr, step_ - 1);
        for (std::int64_t i = 0; i < theta.size(); ++i) {
            vel[i] = cfg_.momentum * vel[i] + g[i];
            theta[i] -= lr * vel[i];
        }
    }

    Tensor& buffer(std::unordered_map<std::string, Tensor>& m, const std::string& name, const Shape& s) {
        auto it = m.find(name);
        if (it == m.end()) it = m.emplace(name, Tensor::zeros(s)).first;
        return it->second;
    }

    Config cfg_;
    std::int64_t step_ = 0;
    std::unordered_map<std::string, Tensor> m_, v_;
};

}  // namespace arcp
