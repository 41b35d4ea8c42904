#pragma once

#include <cstdint>
#include <vector>

#include "dpolab/model.hpp"

namespace dpolab {

// Incremental tape-free forward used by generation. One DecodeState is one
// autoregressive stream; it keeps the per-layer keys/values of everything
// fed so far and is cheap to copy (beam search copies surviving beams).
struct DecodeState {
    int pos = 0;
    std::vector<std::vector<double>> k_cache;  // [layer][pos * d_model]
    std::vector<std::vector<double>> v_cache;
};

class InferenceModel {
public:
    explicit InferenceModel(const Checkpoint& ckpt);

    DecodeState new_state() const;

    // Feeds one token, returns logits for the next position.
    std::vector<double> step(DecodeState& state, int token) const;

    // Feeds BOS + prompt + SEP, returns logits for the first response token.
    std::vector<double> feed_prompt(DecodeState& state, const std::vector<int>& prompt) const;

    const Checkpoint& checkpoint() const { return *ckpt_; }

private:
    const Checkpoint* ckpt_;
};

// Softmax over logits / temperature (max-subtracted for stability).
std::vector<double> softmax_probs(const std::vector<double>& logits, double temperature);

Response sample_response(const Checkpoint& ckpt, const std::vector<int>& prompt, double temperature,
                         int cap, std::uint64_t seed);

Response greedy_response(const Checkpoint& ckpt, const std::vector<int>& prompt, int cap);

// Width-k beam search returning the finished hypothesis with the best
// length-normalized total log-probability (sum logprob / token count).
// k = 1 is exactly greedy decoding.
Response beam_search(const Checkpoint& ckpt, const std::vector<int>& prompt, int width, int cap);

// Total log-probability of a response under the model, via the incremental
// path (independent of the tape implementation).
double response_logprob(const Checkpoint& ckpt, const std::vector<int>& prompt, const Response& response);

}  // namespace dpolab
