#pragma once

#include <cstdint>
#include <vector>

#include "dpolab/vocab.hpp"

namespace dpolab {

// The synthetic task: given a digit sequence, reply with the digits reversed
// followed by EOS. Prompts are token-id lists of digits only; full model
// inputs are framed as BOS <digits> SEP <response>.

// Reversed digits of the prompt, terminated by EOS.
std::vector<int> reversal_target(const std::vector<int>& prompt, const Vocabulary& vocab);

// BOS + prompt + SEP (the context a response is generated from).
std::vector<int> prompt_frame(const std::vector<int>& prompt, const Vocabulary& vocab);

// BOS + prompt + SEP + response.
std::vector<int> full_sequence(const std::vector<int>& prompt, const std::vector<int>& response,
                               const Vocabulary& vocab);

// n distinct random digit prompts with lengths in [len_min, len_max].
std::vector<std::vector<int>> make_prompts(int n, int len_min, int len_max, std::uint64_t seed);

// Ideal task sequences (prompt framed with its reversal target), used for
// pretraining and for the held-out perplexity corpus.
std::vector<std::vector<int>> make_corpus(const std::vector<std::vector<int>>& prompts,
                                          const Vocabulary& vocab);

// Pretraining corpus with controlled quality and length diversity, imitating
// the imperfect and sometimes rambling answers a real base model is trained
// on. Every sequence starts from the correct reversal; a noise_frac fraction
// derail partway, with digits from a uniformly drawn position onward redrawn
// at random (so even a fully converged base mixes a correct mode with flawed
// ones that preference data can resolve),
// and a verbose_frac fraction continue with random digits that fill the
// remaining room before the final EOS. Response length (digits + EOS) stays
// within pad_cap tokens; the caller bounds pad_cap so framed sequences fit
// the model context. Padding always runs to the cap so verbosity is a
// distinct mode rather than a smear of intermediate lengths.
// verbose_frac = noise_frac = 0 reproduces make_corpus exactly.
// Deterministic in (prompts, verbose_frac, noise_frac, pad_cap, seed); each
// prompt uses its own derived stream, so one sequence's draws never shift
// another's.
std::vector<std::vector<int>> make_verbose_corpus(const std::vector<std::vector<int>>& prompts,
                                                  const Vocabulary& vocab, double verbose_frac,
                                                  double noise_frac, int pad_cap,
                                                  std::uint64_t seed);

}  // namespace dpolab
