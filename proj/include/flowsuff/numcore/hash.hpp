#pragma once

#include "flowsuff/numcore/common.hpp"
#include "flowsuff/numcore/rng.hpp"

#include <cstdint>
#include <cstdio>
#include <string>
#include <string_view>

namespace flowsuff {

/// Stable 64-bit FNV-1a, used for seeds, cache keys and provenance.
class Fnv64 {
public:
    Fnv64& bytes(const void* data, std::size_t len) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < len; ++i) {
            h_ ^= p[i];
            h_ *= 0x100000001b3ULL;
        }
        return *this;
    }
    Fnv64& str(std::string_view s) {
        const std::uint64_t n = s.size();
        bytes(&n, sizeof n);
        return bytes(s.data(), s.size());
    }
    Fnv64& u64(std::uint64_t v) { return bytes(&v, sizeof v); }
    Fnv64& matrix(const Matrix& m) {
        u64(static_cast<std::uint64_t>(m.rows())).u64(static_cast<std::uint64_t>(m.cols()));
        return bytes(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
    }
    std::uint64_t value() const noexcept { return h_; }
    std::string hex() const { return to_hex(h_); }

    static std::string to_hex(std::uint64_t v) {
        char buf[17];
        std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
        return buf;
    }

private:
    std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

inline std::uint64_t hash_string(std::string_view s) { return Fnv64().str(s).value(); }

/// Independent child seed for a (tag, key) job.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag, std::uint64_t key) {
    return RngStream(seed).split(tag, key).next_u64();
}

}  // namespace flowsuff
