#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dpolab/tensor.hpp"
#include "dpolab/vocab.hpp"

namespace dpolab {

struct ModelConfig {
    int n_layers = 2;
    int n_heads = 2;
    int d_model = 32;
    int context = 64;

    void validate() const;
    int head_dim() const { return d_model / n_heads; }
    bool operator==(const ModelConfig&) const = default;
};

// One token sequence produced by the policy. tokens include the terminal EOS
// when it was generated; a truncated response has exactly `cap` tokens and no
// EOS. |y| is tokens.size() in both cases.
struct Response {
    std::vector<int> tokens;
    bool truncated = false;

    int length() const { return static_cast<int>(tokens.size()); }
    bool operator==(const Response& other) const { return tokens == other.tokens && truncated == other.truncated; }
};

struct LayerParams {
    TensorPtr ln1_gain, ln1_bias;
    TensorPtr wq, bq, wk, bk, wv, bv, wo, bo;
    TensorPtr ln2_gain, ln2_bias;
    TensorPtr w1, b1, w2, b2;
};

// Full parameter set + architecture + vocabulary for one policy.
struct Checkpoint {
    ModelConfig config;
    Vocabulary vocab;
    int iteration_tag = 0;

    TensorPtr wte, wpe;
    std::vector<LayerParams> layers;
    TensorPtr lnf_gain, lnf_bias;
    TensorPtr head_w;

    static Checkpoint init(const ModelConfig& cfg, const Vocabulary& vocab, std::uint64_t seed);

    // Deterministic parameter order; names are stable and used by the
    // checkpoint file format and optimizer diagnostics.
    std::vector<TensorPtr> all_params() const;
    std::int64_t param_count() const;

    Checkpoint clone() const;         // trainable deep copy
    Checkpoint clone_frozen() const;  // deep copy whose parameters never get grads

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);
};

// Exact equality of architecture, vocabulary, and every parameter byte.
bool checkpoints_equal(const Checkpoint& a, const Checkpoint& b);

// Tape forward over a full token sequence; returns [len, vocab] logits.
TensorPtr logits_graph(const Checkpoint& ckpt, const std::vector<int>& tokens);

// Scalar log pi(y|x): sum of next-token log-probs over the response
// positions of BOS+x+SEP+y. Differentiable w.r.t. checkpoint parameters
// when they carry requires_grad.
TensorPtr sequence_logprob_graph(const Checkpoint& ckpt, const std::vector<int>& prompt,
                                 const Response& response);
double sequence_logprob(const Checkpoint& ckpt, const std::vector<int>& prompt, const Response& response);

struct PretrainOptions {
    int steps = 600;
    int batch = 16;
    double lr = 1e-3;
    std::uint64_t seed = 1;
    // Fraction of corpus sequences that ramble past the correct reversal, and
    // fraction whose digits are garbled (see make_verbose_corpus); both are
    // consumed by corpus construction, not by pretrain() itself.
    double verbose_frac = 0.1;
    double noise_frac = 0.1;
    // Early stopping on task quality: when target_gold > 0, every probe_every
    // steps the model answers probe_prompts prompts (taken from the corpus)
    // with one sample each, and pretraining stops once mean gold reward
    // reaches target_gold. Lets every seed pretrain to the same competence
    // instead of the same step count.
    double target_gold = 0.0;
    int probe_every = 100;
    int probe_prompts = 64;
};

struct PretrainResult {
    Checkpoint ckpt;
    std::vector<double> losses;  // mean per-token cross-entropy per step
    int steps_run = 0;           // < steps when the gold target stopped training early
    double final_probe_gold = -1.0;  // last probe result, -1 if never probed
};

// Next-token training on ideal task sequences; produces the base policy.
PretrainResult pretrain(const std::vector<std::vector<int>>& corpus, const ModelConfig& cfg,
                        const Vocabulary& vocab, const PretrainOptions& opt);

}  // namespace dpolab
