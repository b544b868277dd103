#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "dpc/tensor.hpp"

namespace dpc {

/// Seedable random stream with implementation-pinned distributions.
/// std::*_distribution are not pinned across standard libraries, so uniform
/// and normal draws are produced here directly from the mt19937_64 output.
struct RandomStream {
    std::mt19937_64 eng;
    bool has_spare = false;
    double spare = 0.0;

    explicit RandomStream(std::uint64_t seed) : eng(seed) {}

    std::uint64_t next_u64() { return eng(); }

    /// Uniform on [0, 1).
    double uniform() { return static_cast<double>(eng() >> 11) * 0x1.0p-53; }

    double uniform(double a, double b) { return a + (b - a) * uniform(); }

    /// Inclusive integer range.
    int uniform_int(int lo, int hi) {
        std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(eng() % span);
    }

    /// Standard normal via Box-Muller; the pair partner is cached.
    double normal() {
        if (has_spare) {
            has_spare = false;
            return spare;
        }
        // u1 in (0, 1] keeps the log finite.
        double u1 = static_cast<double>((eng() >> 11) + 1) * 0x1.0p-53;
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double t = 6.283185307179586476925286766559 * u2;
        spare = r * std::sin(t);
        has_spare = true;
        return r * std::cos(t);
    }

    void fill_normal(Tensor& t) {
        for (double& v : t.data) v = normal();
    }

    void fill_uniform(Tensor& t, double a, double b) {
        for (double& v : t.data) v = uniform(a, b);
    }

    Tensor normal_tensor(std::vector<int> shape) {
        Tensor t(std::move(shape));
        fill_normal(t);
        return t;
    }

    Tensor uniform_tensor(std::vector<int> shape, double a, double b) {
        Tensor t(std::move(shape));
        fill_uniform(t, a, b);
        return t;
    }
};

/// Order-independent way to derive fresh seeds for sub-tasks (per image,
/// per sweep point, ...) from one master seed. SplitMix64 finalizer.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0,
                                 std::uint64_t c = 0) {
    std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (a + 1) + 0xbf58476d1ce4e5b9ULL * (b + 1) +
                      0x94d049bb133111ebULL * (c + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace dpc
