#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dpolab/model.hpp"
#include "dpolab/reward.hpp"

namespace dpolab {

// One preference comparison: two responses to the same prompt, ranked by a
// reward model.  `generator` records where the pair came from ("policy" for
// on-policy sampling, "external" for imported seed data).
struct PreferencePair {
    std::vector<int> prompt;
    Response chosen;
    Response rejected;
    double chosen_reward = 0.0;
    double rejected_reward = 0.0;
    std::string generator = "policy";
};

// Bookkeeping from a collection pass.  mean_sampled_reward averages the
// scoring reward over every sampled response, kept or not -- it is the
// "achieved reward" trace for the round.
struct CollectionStats {
    std::int64_t prompts_in = 0;
    std::int64_t pairs_kept = 0;
    std::int64_t ties_discarded = 0;
    std::int64_t identical_discarded = 0;
    double mean_sampled_reward = 0.0;
};

struct PreferenceDataset {
    int iteration = 0;
    RewardDescriptor reward;
    std::uint64_t seed = 0;
    std::vector<PreferencePair> pairs;
    CollectionStats stats;
};

struct CollectOptions {
    int samples_per_prompt = 2;   // independent responses drawn per prompt
    int pairs_per_prompt = 1;     // best-vs-worst pairs kept per prompt
    int max_new_tokens = 48;
    double temperature = 1.0;
    int jobs = 1;                 // worker threads; results identical for any value
};

// Samples responses from `ckpt` for every prompt, scores them with `reward`,
// and keeps best-vs-worst pairs.  Each prompt draws from its own seed derived
// from (seed, prompt index), so the result is byte-identical regardless of
// `jobs`.  Throws if every prompt ends up tied or identical.
PreferenceDataset collect_preferences(const Checkpoint& ckpt,
                                      const std::vector<std::vector<int>>& prompts,
                                      const RewardModel& reward, int iteration,
                                      std::uint64_t seed, const CollectOptions& opts);

// Drops every prompt whose token sequence exactly matches an evaluation
// prompt.  Returns the number removed via `removed`.
std::vector<std::vector<int>> filter_prompt_overlap(
    const std::vector<std::vector<int>>& prompts,
    const std::vector<std::vector<int>>& eval_prompts, std::int64_t* removed);

// JSONL persistence: first line is a header object, then one pair per line.
// Response truncation is not stored; load re-derives it from the final token.
void save_dataset(const PreferenceDataset& ds, const std::string& path);
PreferenceDataset load_dataset(const std::string& path, const Vocabulary& vocab);

// Imports preference data produced outside this pipeline.  Each record is
// validated (token ids, non-empty responses, chosen strictly above rejected);
// bad records are skipped with a logged reason, but if more than half fail the
// whole load is rejected.  Accepted pairs are re-scored with `reward` and
// tagged generator="external".
PreferenceDataset load_seed_dataset(const std::string& path, const Vocabulary& vocab,
                                    const RewardModel& reward,
                                    std::vector<std::string>* issues);

}  // namespace dpolab
