#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dpolab/data.hpp"
#include "dpolab/model.hpp"

namespace dpolab {

// One preference-optimization run over a dataset. alpha = 0 recovers plain
// DPO; alpha > 0 adds the length-margin term that pushes the policy toward
// shorter chosen responses.
struct TrainConfig {
    double beta = 0.1;
    double alpha = 0.0;
    double lr = 3e-4;
    int epochs = 1;
    int batch_size = 16;
    std::uint64_t seed = 0;

    void validate() const;
};

// Diagnostics for one minibatch. mean_margin is the mean sigmoid argument
// beta * pm + alpha * lm; implicit_accuracy is the fraction of pairs whose
// preference margin is strictly positive.
struct LossBreakdown {
    double loss = 0.0;
    double mean_pm = 0.0;
    double mean_lm = 0.0;
    double mean_margin = 0.0;
    double implicit_accuracy = 0.0;
};

struct TrainLogEntry {
    int step = 0;  // global optimizer step, 0-based
    double loss = 0.0;
    double mean_pm = 0.0;
    double mean_lm = 0.0;
    double implicit_accuracy = 0.0;
    double lr = 0.0;
};

struct TrainResult {
    Checkpoint ckpt;
    std::vector<TrainLogEntry> log;
};

// Reference log pi_ref(y|x) per pair, computed once per run -- the reference
// never changes during an iteration, so these enter the loss as constants.
struct RefLogprobs {
    std::vector<double> chosen;
    std::vector<double> rejected;
};

RefLogprobs compute_ref_logprobs(const Checkpoint& ref, const PreferenceDataset& ds);

// pm = [log pi(y_w) - log pi_ref(y_w)] - [log pi(y_l) - log pi_ref(y_l)]
double preference_margin(const Checkpoint& policy, const PreferencePair& pair,
                         double ref_chosen, double ref_rejected);

// lm = |y_w| - |y_l|
double length_margin(const PreferencePair& pair);

// Mean of -log sigma(beta * pm + alpha * lm) over the pairs at `idx`.
// Differentiable w.r.t. the policy parameters.  Throws when any policy
// log-prob comes out non-finite, naming the offending pair.
TensorPtr lr_dpo_loss_graph(const Checkpoint& policy, const PreferenceDataset& ds,
                            const std::vector<int>& idx, const RefLogprobs& ref,
                            const TrainConfig& cfg, LossBreakdown* breakdown);

// One optimization pass: clones `start` as the trainable policy, freezes a
// copy as the reference, then runs cfg.epochs epochs of shuffled minibatches
// under Adam with cosine decay.
TrainResult train_one_iteration(const Checkpoint& start, const PreferenceDataset& ds,
                                const TrainConfig& cfg);

void save_train_log(const std::vector<TrainLogEntry>& log, const std::string& path);

}  // namespace dpolab
