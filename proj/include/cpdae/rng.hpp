#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace cpdae {

// Deterministic counter-free PRNG (splitmix64). We roll our own so that
// streams are bit-stable across compilers and standard libraries; the std
// distributions are implementation-defined and would break byte-identical
// reruns.
class Rng {
  public:
    explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform integer in [0, n). Lemire multiply-shift; the O(n/2^64) bias is
    // irrelevant at this scale and the method is branch-free and portable.
    std::uint64_t uniform(std::uint64_t n) {
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    // Uniform double in [0, 1).
    double uniform_real() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller (pairs cached).
    double normal() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        double u1 = uniform_real();
        double u2 = uniform_real();
        while (u1 <= 0.0) u1 = uniform_real();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(theta);
        have_cached_ = true;
        return r * std::cos(theta);
    }

    // Partial Fisher-Yates: k distinct indices from [0, n), order discarded.
    std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
        std::vector<std::size_t> pool(n);
        for (std::size_t i = 0; i < n; ++i) pool[i] = i;
        if (k > n) k = n;
        for (std::size_t i = 0; i < k; ++i) {
            std::size_t j = i + static_cast<std::size_t>(uniform(n - i));
            std::swap(pool[i], pool[j]);
        }
        pool.resize(k);
        return pool;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(uniform(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Named sub-stream. Streams are split by hashing the label (FNV-1a) into
    // the parent state, so e.g. "mask", "init" and "corpus" never overlap.
    Rng fork(std::string_view label, std::uint64_t index = 0) const {
        std::uint64_t h = 1469598103934665603ULL;
        for (char c : label) {
            h ^= static_cast<unsigned char>(c);
            h *= 1099511628211ULL;
        }
        h ^= index + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
        Rng child(state_ ^ h);
        child.next_u64();  // scramble once so nearby labels decorrelate
        return child;
    }

  private:
    std::uint64_t state_;
    double cached_ = 0.0;
    bool have_cached_ = false;
};

// Cumulative-table Zipf sampler over ranks [0, n), p(r) proportional to
// 1/(r+1)^exponent.
class ZipfSampler {
  public:
    ZipfSampler(std::size_t n, double exponent) : cdf_(n) {
        double acc = 0.0;
        for (std::size_t r = 0; r < n; ++r) {
            acc += 1.0 / std::pow(static_cast<double>(r + 1), exponent);
            cdf_[r] = acc;
        }
        for (std::size_t r = 0; r < n; ++r) cdf_[r] /= acc;
    }

    std::size_t sample(Rng& rng) const {
        double u = rng.uniform_real();
        std::size_t lo = 0, hi = cdf_.size() - 1;
        while (lo < hi) {
            std::size_t mid = (lo + hi) / 2;
            if (cdf_[mid] < u)
                lo = mid + 1;
            else
                hi = mid;
        }
        return lo;
    }

  private:
    std::vector<double> cdf_;
};

}  // namespace cpdae
