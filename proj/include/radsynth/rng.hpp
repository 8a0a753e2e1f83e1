#pragma once

// Deterministic RNG used everywhere in the project. All distributions are
// implemented on top of mt19937_64 so results are identical across standard
// library implementations, and the full state serializes to a string for
// checkpointing.

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "radsynth/tensor.hpp"

namespace radsynth {

class Rng {
  public:
    explicit Rng(uint64_t seed = 0) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }

    // Unbiased integer in [0, bound) via rejection sampling.
    uint64_t uniform_u64(uint64_t bound) {
        if (bound == 0) return 0;
        const uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
        uint64_t x;
        do {
            x = eng_();
        } while (x >= limit);
        return x % bound;
    }

    int uniform_int(int lo, int hi_inclusive) {
        return lo + static_cast<int>(uniform_u64(static_cast<uint64_t>(hi_inclusive - lo + 1)));
    }

    // [0,1)
    double uniform() {
        return static_cast<double>(eng_() >> 11) * (1.0 / 9007199254740992.0);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller; one value cached between calls.
    double normal() {
        if (has_cache_) {
            has_cache_ = false;
            return cache_;
        }
        double u1, u2;
        do {
            u1 = uniform();
        } while (u1 <= 1e-300);
        u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        cache_ = r * std::sin(a);
        has_cache_ = true;
        return r * std::cos(a);
    }

    void fill_normal(Tensor& t, double mean = 0.0, double stddev = 1.0) {
        double* p = t.data();
        for (long long i = 0; i < t.size(); ++i) p[i] = mean + stddev * normal();
    }

    void fill_uniform(Tensor& t, double lo, double hi) {
        double* p = t.data();
        for (long long i = 0; i < t.size(); ++i) p[i] = uniform(lo, hi);
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_u64(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    std::vector<int> permutation(int n) {
        std::vector<int> p(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) p[static_cast<size_t>(i)] = i;
        shuffle(p);
        return p;
    }

    // Independent stream derived from a seed and a stream tag.
    static Rng fork(uint64_t seed, uint64_t stream) {
        uint64_t h = fnv1a64(&seed, sizeof(seed));
        h = fnv1a64(&stream, sizeof(stream), h);
        return Rng(h);
    }

    std::string state() const {
        std::ostringstream os;
        os << eng_ << " " << (has_cache_ ? 1 : 0) << " ";
        os.precision(17);
        os << cache_;
        return os.str();
    }

    void set_state(const std::string& s) {
        std::istringstream is(s);
        int hc = 0;
        is >> eng_ >> hc >> cache_;
        has_cache_ = (hc != 0);
    }

  private:
    std::mt19937_64 eng_;
    bool has_cache_ = false;
    double cache_ = 0.0;
};

} // namespace radsynth
