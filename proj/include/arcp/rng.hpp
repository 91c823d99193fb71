#pragma once

#include <cstdint>
#include <random>

#include "arcp/tensor.hpp"

namespace arcp {

// Deterministic RNG. Wraps mt19937_64 but rolls its own uniform/normal
// transforms so sampled sequences do not depend on the standard library's
// distribution implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed), seed_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // [0, 1)
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // inclusive bounds
    int uniform_int(int lo, int hi) {
        auto span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(gen_() % span);
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        // Box-Muller on open-interval uniforms
        double u1, u2;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Independent stream derived from this seed; does not advance the parent.
    Rng fork(std::uint64_t stream) const {
        std::uint64_t x = seed_ ^ (0x9E3779B97F4A7C15ull * (stream + 1));
        return Rng(splitmix(x));
    }

    void fill_uniform(Tensor& t, double lo, double hi) {
        for (std::int64_t i = 0; i < t.size(); ++i) t[i] = uniform(lo, hi);
    }

    void fill_normal(Tensor& t, double mean, double stddev) {
        for (std::int64_t i = 0; i < t.size(); ++i) t[i] = mean + stddev * normal();
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = gen_() % i;
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    static std::uint64_t splitmix(std::uint64_t x) {
        x += 0x9E3779B97F4A7C15ull;
        x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
        x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
        return x ^ (x >> 31);
    }

    std::mt19937_64 gen_;
    std::uint64_t seed_ = 0;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace arcp
