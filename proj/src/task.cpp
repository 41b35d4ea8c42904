#include "dpolab/task.hpp"

#include <set>
#include <stdexcept>

#include "dpolab/rng.hpp"

namespace dpolab {

std::vector<int> reversal_target(const std::vector<int>& prompt, const Vocabulary& vocab) {
    std::vector<int> out(prompt.rbegin(), prompt.rend());
    out.push_back(vocab.eos);
    return out;
}

std::vector<int> prompt_frame(const std::vector<int>& prompt, const Vocabulary& vocab) {
    std::vector<int> out;
    out.reserve(prompt.size() + 2);
    out.push_back(vocab.bos);
    out.insert(out.end(), prompt.begin(), prompt.end());
    out.push_back(vocab.sep);
    return out;
}

std::vector<int> full_sequence(const std::vector<int>& prompt, const std::vector<int>& response,
                               const Vocabulary& vocab) {
    std::vector<int> out = prompt_frame(prompt, vocab);
    out.insert(out.end(), response.begin(), response.end());
    return out;
}

std::vector<std::vector<int>> make_prompts(int n, int len_min, int len_max, std::uint64_t seed) {
    if (n < 1 || len_min < 1 || len_max < len_min) {
        throw std::invalid_argument("make_prompts: need n >= 1 and 1 <= len_min <= len_max");
    }
    Rng rng(seed);
    std::set<std::vector<int>> seen;
    std::vector<std::vector<int>> prompts;
    prompts.reserve(static_cast<std::size_t>(n));
    // Distinct prompts keep the train/eval overlap filter meaningful.
    int guard = 0;
    while (static_cast<int>(prompts.size()) < n) {
        const int len = len_min + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(len_max - len_min + 1)));
        std::vector<int> p(static_cast<std::size_t>(len));
        for (auto& d : p) d = static_cast<int>(rng.uniform_int(10));
        if (seen.insert(p).second) {
            prompts.push_back(std::move(p));
            guard = 0;
        } else if (++guard > 1000000) {
            throw std::runtime_error("make_prompts: prompt space exhausted for requested n");
        }
    }
    return prompts;
}

std::vector<std::vector<int>> make_corpus(const std::vector<std::vector<int>>& prompts,
                                          const Vocabulary& vocab) {
    std::vector<std::vector<int>> corpus;
    corpus.reserve(prompts.size());
    for (const auto& p : prompts) {
        corpus.push_back(full_sequence(p, reversal_target(p, vocab), vocab));
    }
    return corpus;
}

std::vector<std::vector<int>> make_verbose_corpus(const std::vector<std::vector<int>>& prompts,
                                                  const Vocabulary& vocab, double verbose_frac,
                                                  double noise_frac, int pad_cap,
                                                  std::uint64_t seed) {
    if (!(verbose_frac >= 0.0 && verbose_frac <= 1.0)) {
        throw std::invalid_argument("make_verbose_corpus: verbose_frac must be in [0, 1]");
    }
    if (!(noise_frac >= 0.0 && noise_frac <= 1.0)) {
        throw std::invalid_argument("make_verbose_corpus: noise_frac must be in [0, 1]");
    }
    if (pad_cap < 1) throw std::invalid_argument("make_verbose_corpus: pad_cap must be >= 1");
    std::vector<std::vector<int>> corpus;
    corpus.reserve(prompts.size());
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        const auto& p = prompts[i];
        std::vector<int> response(p.rbegin(), p.rend());
        Rng rng(derive_seed(seed, i));
        // A noise_frac fraction of responses go off the rails partway: digits
        // from a uniformly drawn position onward are redrawn at random. The
        // corpus then mixes a correct mode with derailed ones of every
        // severity, giving the converged base a wide quality spread for
        // preference data to resolve while most digit positions stay clean.
        if (noise_frac > 0.0 && rng.uniform() < noise_frac) {
            const std::size_t cut = rng.uniform_int(response.size());
            for (std::size_t j = cut; j < response.size(); ++j) {
                response[j] = static_cast<int>(rng.uniform_int(10));
            }
        }
        // Padding room after the reversed digits, keeping digits + EOS <= pad_cap.
        const int room = pad_cap - static_cast<int>(p.size()) - 1;
        if (room > 0 && rng.uniform() < verbose_frac) {
            for (int k = 0; k < room; ++k) {
                response.push_back(static_cast<int>(rng.uniform_int(10)));
            }
        }
        response.push_back(vocab.eos);
        corpus.push_back(full_sequence(p, response, vocab));
    }
    return corpus;
}

}  // namespace dpolab
