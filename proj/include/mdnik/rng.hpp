#pragma once

#include <cstdint>
#include <random>

namespace mdnik {

// Portable seeded generator. The engine is std::mt19937_64, whose output
// sequence is fixed by the standard; the std distributions are not, so the
// conversions below are done by hand to keep streams identical everywhere.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform on [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    // Uniform on [lo, hi]; returns lo exactly when lo == hi.
    double uniform(double lo, double hi) {
        if (lo == hi) return lo;
        return lo + (hi - lo) * uniform();
    }

    // Uniform integer in [0, n) by rejection, n > 0.
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t r;
        do {
            r = engine_();
        } while (r >= limit);
        return r % n;
    }

    // Fisher-Yates.
    template <typename Range>
    void shuffle(Range& range) {
        const auto n = static_cast<std::uint64_t>(range.size());
        for (std::uint64_t i = n; i > 1; --i) {
            const std::uint64_t j = below(i);
            using std::swap;
            swap(range[i - 1], range[j]);
        }
    }

  private:
    std::mt19937_64 engine_;
};

}  // namespace mdnik
