#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace dpolab {

// All randomness in the project flows from a single root seed through
// derive_seed(). Generator and distributions are spelled out here rather
// than taken from <random> (std distributions are implementation-defined),
// so identical seeds give identical streams on every platform.

// splitmix64 finalizer; good avalanche for seed derivation.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Child seed for a named stream. Documented derivation tree:
//   collect(i)   = derive(root, 1000 + i)
//   per-prompt   = derive(collect_seed, prompt_index)
//   sample s     = derive(prompt_seed, s), s = 0, 1, ...
//   train(i, b)  = derive(root, 2000 + 16*i + b)
//   eval(i)      = derive(root, 3000 + i)
//   pretrain     = derive(root, 10), corpus prompts = derive(root, 12),
//   corpus pad   = derive(root, 13)
//   prompts      = derive(root, 20), eval prompts = derive(root, 21)
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
    return mix64(base ^ mix64(stream + 0x5851f42d4c957f2dULL));
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : s_(seed == 0 ? 0x4d595df4d0f33173ULL : seed) {
        // warm up so nearby seeds decorrelate
        next();
        next();
    }

    std::uint64_t next() {
        // xorshift* would do; reuse splitmix64 as the stream generator.
        s_ += 0x9e3779b97f4a7c15ULL;
        std::uint64_t z = s_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    // uniform integer in [0, n)
    std::uint64_t uniform_int(std::uint64_t n) {
        // multiply-shift; bias is negligible for the small n used here
        return static_cast<std::uint64_t>(uniform() * static_cast<double>(n));
    }

    // standard normal via Box-Muller (cosine branch only, keeps the state flat)
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    // index into a discrete distribution given by probabilities summing to ~1
    int categorical(const std::vector<double>& probs) {
        double u = uniform();
        double acc = 0.0;
        for (std::size_t i = 0; i < probs.size(); ++i) {
            acc += probs[i];
            if (u < acc) return static_cast<int>(i);
        }
        return static_cast<int>(probs.size()) - 1;
    }

private:
    std::uint64_t s_;
};

}  // namespace dpolab
