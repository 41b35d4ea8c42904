#include "dpolab/dpo.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "dpolab/adam.hpp"
#include "dpolab/rng.hpp"
#include "dpolab/util.hpp"
#include "json.hpp"

namespace dpolab {

void TrainConfig::validate() const {
    if (!(beta > 0.0)) throw std::invalid_argument("TrainConfig: beta must be > 0");
    if (alpha < 0.0) throw std::invalid_argument("TrainConfig: alpha must be >= 0");
    if (!(lr > 0.0)) throw std::invalid_argument("TrainConfig: lr must be > 0");
    if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
}

RefLogprobs compute_ref_logprobs(const Checkpoint& ref, const PreferenceDataset& ds) {
    RefLogprobs out;
    out.chosen.reserve(ds.pairs.size());
    out.rejected.reserve(ds.pairs.size());
    for (const PreferencePair& p : ds.pairs) {
        out.chosen.push_back(sequence_logprob(ref, p.prompt, p.chosen));
        out.rejected.push_back(sequence_logprob(ref, p.prompt, p.rejected));
    }
    return out;
}

double preference_margin(const Checkpoint& policy, const PreferencePair& pair,
                         double ref_chosen, double ref_rejected) {
    double lp_w = sequence_logprob(policy, pair.prompt, pair.chosen);
    double lp_l = sequence_logprob(policy, pair.prompt, pair.rejected);
    return (lp_w - ref_chosen) - (lp_l - ref_rejected);
}

double length_margin(const PreferencePair& pair) {
    return static_cast<double>(pair.chosen.length() - pair.rejected.length());
}

TensorPtr lr_dpo_loss_graph(const Checkpoint& policy, const PreferenceDataset& ds,
                            const std::vector<int>& idx, const RefLogprobs& ref,
                            const TrainConfig& cfg, LossBreakdown* breakdown) {
    if (idx.empty()) throw std::invalid_argument("lr_dpo_loss_graph: empty batch");
    if (ref.chosen.size() != ds.pairs.size() || ref.rejected.size() != ds.pairs.size()) {
        throw std::invalid_argument("lr_dpo_loss_graph: reference log-probs cover " +
                                    std::to_string(ref.chosen.size()) + " pairs, dataset has " +
                                    std::to_string(ds.pairs.size()));
    }

    std::vector<TensorPtr> terms;
    terms.reserve(idx.size());
    double pm_sum = 0.0, lm_sum = 0.0, margin_sum = 0.0;
    int correct = 0;
    for (int i : idx) {
        if (i < 0 || i >= static_cast<int>(ds.pairs.size())) {
            throw std::invalid_argument("lr_dpo_loss_graph: pair index " + std::to_string(i) +
                                        " out of range");
        }
        const PreferencePair& p = ds.pairs[static_cast<std::size_t>(i)];
        TensorPtr lp_w = sequence_logprob_graph(policy, p.prompt, p.chosen);
        TensorPtr lp_l = sequence_logprob_graph(policy, p.prompt, p.rejected);
        if (!std::isfinite(lp_w->data[0]) || !std::isfinite(lp_l->data[0])) {
            throw std::runtime_error("lr_dpo_loss_graph: non-finite policy log-prob for pair " +
                                     std::to_string(i));
        }
        // pm = (lp_w - lp_l) - (ref_w - ref_l); the reference part is a constant.
        double ref_gap = ref.chosen[static_cast<std::size_t>(i)] -
                         ref.rejected[static_cast<std::size_t>(i)];
        TensorPtr pm = add_const(add(lp_w, neg(lp_l)), -ref_gap);
        double lm = length_margin(p);
        TensorPtr z = add_const(scale(pm, cfg.beta), cfg.alpha * lm);
        terms.push_back(log_sigmoid(z));

        pm_sum += pm->data[0];
        lm_sum += lm;
        margin_sum += z->data[0];
        if (pm->data[0] > 0.0) ++correct;
    }
    TensorPtr loss = neg(mean_all(stack_scalars(terms)));
    if (!std::isfinite(loss->data[0])) {
        throw std::runtime_error("lr_dpo_loss_graph: loss is non-finite");
    }
    if (breakdown) {
        double n = static_cast<double>(idx.size());
        breakdown->loss = loss->data[0];
        breakdown->mean_pm = pm_sum / n;
        breakdown->mean_lm = lm_sum / n;
        breakdown->mean_margin = margin_sum / n;
        breakdown->implicit_accuracy = static_cast<double>(correct) / n;
    }
    return loss;
}

namespace {

std::vector<int> shuffled_indices(int n, std::uint64_t seed) {
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    for (int i = n - 1; i > 0; --i) {
        std::int64_t j = rng.uniform_int(i + 1);
        std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }
    return order;
}

}  // namespace

TrainResult train_one_iteration(const Checkpoint& start, const PreferenceDataset& ds,
                                const TrainConfig& cfg) {
    cfg.validate();
    if (ds.pairs.empty()) throw std::invalid_argument("train_one_iteration: dataset is empty");

    TrainResult result;
    result.ckpt = start.clone();
    Checkpoint ref = start.clone_frozen();
    RefLogprobs ref_lp = compute_ref_logprobs(ref, ds);

    int n = static_cast<int>(ds.pairs.size());
    int batches_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    AdamConfig adam_cfg;
    adam_cfg.lr = cfg.lr;
    adam_cfg.total_steps = cfg.epochs * batches_per_epoch;
    AdamOptimizer opt(result.ckpt.all_params(), adam_cfg);

    int step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<int> order =
            shuffled_indices(n, derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
        for (int b = 0; b < batches_per_epoch; ++b) {
            int lo = b * cfg.batch_size;
            int hi = std::min(n, lo + cfg.batch_size);
            std::vector<int> batch(order.begin() + lo, order.begin() + hi);

            LossBreakdown bd;
            double lr_now = opt.current_lr();
            TensorPtr loss = lr_dpo_loss_graph(result.ckpt, ds, batch, ref_lp, cfg, &bd);
            backward(loss);
            opt.step();
            opt.zero_grad();

            result.log.push_back({step, bd.loss, bd.mean_pm, bd.mean_lm, bd.implicit_accuracy,
                                  lr_now});
            ++step;
        }
    }
    return result;
}

void save_train_log(const std::vector<TrainLogEntry>& log, const std::string& path) {
    std::ostringstream out;
    for (const TrainLogEntry& e : log) {
        nlohmann::json rec{{"step", e.step},
                           {"loss", e.loss},
                           {"mean_pm", e.mean_pm},
                           {"mean_lm", e.mean_lm},
                           {"implicit_accuracy", e.implicit_accuracy},
                           {"lr", e.lr}};
        out << rec.dump() << "\n";
    }
    atomic_write_file(path, out.str());
}

}  // namespace dpolab
