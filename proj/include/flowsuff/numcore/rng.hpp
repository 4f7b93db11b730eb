#pragma once

#include "flowsuff/numcore/common.hpp"

#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <vector>

namespace flowsuff {

/// Counter-based splittable generator.
///
/// Draw i of a stream with key k is mix64(k + (i + 1) * golden), i.e. the
/// SplitMix64 output function applied to a counter. Child streams derive their
/// key by hashing (parent key, child id), so per-job streams do not depend on
/// the order in which jobs are created or executed.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed = 0) : key_(mix64(seed ^ 0x6a09e667f3bcc909ULL)), seed_(seed) {}

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t counter() const noexcept { return counter_; }

    std::uint64_t next_u64() noexcept {
        ++counter_;
        return mix64(key_ + counter_ * kGolden);
    }

    /// Uniform on [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    /// Unbiased integer in [0, n).
    std::uint64_t uniform_index(std::uint64_t n) {
        FLOWSUFF_EXPECT(n > 0, "uniform_index: n must be positive");
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                    std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % n;
    }

    /// Standard normal via Box-Muller; the second variate is cached.
    double normal() noexcept {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    Matrix normal_matrix(Index rows, Index cols) {
        Matrix m(rows, cols);
        for (Index j = 0; j < cols; ++j)
            for (Index i = 0; i < rows; ++i) m(i, j) = normal();
        return m;
    }

    Vector unit_vector(Index dim) {
        Vector v(dim);
        double n2 = 0.0;
        do {
            for (Index i = 0; i < dim; ++i) v(i) = normal();
            n2 = v.squaredNorm();
        } while (n2 == 0.0);
        return v / std::sqrt(n2);
    }

    /// Uniform random permutation of {0..n-1} (Fisher-Yates).
    std::vector<int> permutation(std::size_t n) {
        std::vector<int> p(n);
        std::iota(p.begin(), p.end(), 0);
        shuffle(p);
        return p;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(uniform_index(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    /// Independent child stream keyed by `id`. Does not advance this stream.
    RngStream split(std::uint64_t id) const noexcept {
        return RngStream(mix64(key_ ^ mix64(id + 0x9e3779b97f4a7c15ULL)));
    }

    RngStream split(std::uint64_t a, std::uint64_t b) const noexcept {
        return split(a).split(b);
    }

    static constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

private:
    static constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

    std::uint64_t key_;
    std::uint64_t seed_;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

inline RngStream seeded_rng(std::uint64_t seed) { return RngStream(seed); }

}  // namespace flowsuff
