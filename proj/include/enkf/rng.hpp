#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace enkf {

namespace detail {

// SplitMix64; used only to expand (seed, stream_id) into generator state and
// to derive child stream ids.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

} // namespace detail

// Deterministic seeded stream. Two streams with identical (seed, stream_id)
// produce identical sequences on any platform: mt19937_64 is fully specified
// by the standard and the Gaussian transform below is our own, so no
// implementation-defined distribution code is involved.
//
// Single-owner: never share one stream across threads. Parallel code derives
// one child per work unit (member, split, step, ...) via child(tag).
class RngStream {
public:
    RngStream(std::uint64_t seed, std::uint64_t stream_id)
        : seed_(seed), stream_id_(stream_id),
          gen_(detail::splitmix64(detail::splitmix64(seed) ^ detail::splitmix64(~stream_id))) {}

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream_id() const { return stream_id_; }

    // Fresh stream with an id mixed from (this stream's id, tag). Does not
    // consume state, so derivation order is irrelevant.
    RngStream child(std::uint64_t tag) const {
        std::uint64_t id = detail::splitmix64(stream_id_ ^ detail::splitmix64(tag + 0x632be59bd9b4e019ULL));
        return RngStream(seed_, id);
    }

    std::uint64_t next_u64() { return gen_(); }

    // Uniform on (0,1); 53-bit mantissa, never exactly 0 or 1.
    double uniform() {
        return (static_cast<double>(gen_() >> 11) + 0.5) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Marsaglia polar method with one cached spare. Consumes a variable
    // number of uniforms per pair, which is fine: the sequence is still a
    // pure function of the stream state.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform() - 1.0;
            v = 2.0 * uniform() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double m = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * m;
        has_spare_ = true;
        return u * m;
    }

    // Uniform integer in [0, n), unbiased via rejection.
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t x;
        do {
            x = gen_();
        } while (x >= limit);
        return x % n;
    }

private:
    std::uint64_t seed_;
    std::uint64_t stream_id_;
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Stable tags for deriving per-purpose child streams. Values are arbitrary
// but frozen: changing them changes every seeded result.
namespace stream_tag {
inline constexpr std::uint64_t truth       = 0x01;
inline constexpr std::uint64_t obs_indices = 0x02;
inline constexpr std::uint64_t obs_noise   = 0x03;
inline constexpr std::uint64_t init_ens    = 0x04;
inline constexpr std::uint64_t oracle      = 0x05;
inline constexpr std::uint64_t filter      = 0x06;
inline constexpr std::uint64_t selection   = 0x07;
inline constexpr std::uint64_t free_run    = 0x08;
inline constexpr std::uint64_t replicate   = 0x09;
inline constexpr std::uint64_t forecast    = 0x0a;
inline constexpr std::uint64_t analysis    = 0x0b;
inline constexpr std::uint64_t generator   = 0x0c;
} // namespace stream_tag

// FNV-1a, used to hash variant names into stream tags so a variant's
// randomness does not depend on its position in the configured list.
inline std::uint64_t name_tag(const std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace enkf
