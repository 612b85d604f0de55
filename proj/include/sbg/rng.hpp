#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "sbg/mat.hpp"

namespace sbg {

// Counter-based splittable generator (SplitMix64 streams). Forking derives an
// independent stream from (key, stream id), so per-protein noise is
// reproducible regardless of iteration order.
struct Rng {
    uint64_t key = 0;
    uint64_t counter = 0;

    static uint64_t mix(uint64_t z) {
        z += 0x9E3779B97F4A7C15ULL;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    static Rng seeded(uint64_t seed) { return Rng{mix(seed ^ 0xA0761D6478BD642FULL), 0}; }

    Rng fork(uint64_t stream) const {
        return Rng{mix(key ^ mix(stream ^ 0xE7037ED1A0B428DBULL)), 0};
    }

    uint64_t next_u64() { return mix(key + 0x9E3779B97F4A7C15ULL * ++counter); }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n)
    int uniform_int(int n) { return static_cast<int>(next_u64() % static_cast<uint64_t>(n)); }

    bool bernoulli(double p) { return uniform() < p; }

    double normal() {
        // Box-Muller, cosine branch; two uniforms per draw keeps the stream
        // layout independent of call history.
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    double gumbel() {
        double u = uniform();
        if (u < 1e-12) u = 1e-12;
        if (u > 1.0 - 1e-12) u = 1.0 - 1e-12;
        return -std::log(-std::log(u));
    }

    void fill_uniform(Mat& m, double lo, double hi) {
        for (double& v : m.data) v = uniform(lo, hi);
    }
    void fill_normal(Mat& m, double stddev) {
        for (double& v : m.data) v = normal() * stddev;
    }
    void fill_gumbel(Mat& m) {
        for (double& v : m.data) v = gumbel();
    }

    std::vector<int> permutation(int n) {
        std::vector<int> p(n);
        for (int i = 0; i < n; ++i) p[i] = i;
        for (int i = n - 1; i > 0; --i) {
            int j = uniform_int(i + 1);
            std::swap(p[i], p[j]);
        }
        return p;
    }

    // k distinct values from [0, n) without replacement, ascending order.
    std::vector<int> sample_without_replacement(int n, int k) {
        std::vector<int> pool(n);
        for (int i = 0; i < n; ++i) pool[i] = i;
        for (int i = 0; i < k; ++i) {
            int j = i + uniform_int(n - i);
            std::swap(pool[i], pool[j]);
        }
        pool.resize(k);
        std::sort(pool.begin(), pool.end());
        return pool;
    }
};

}  // namespace sbg
