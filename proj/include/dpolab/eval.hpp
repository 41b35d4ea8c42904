#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dpolab/model.hpp"
#include "dpolab/reward.hpp"

namespace dpolab {

// How the model side of an evaluation produces its response.  Parsed from
// strings like "sample", "greedy", "beam4", "bo8".
struct DecodeMode {
    enum Kind { kSample, kGreedy, kBeam, kBestOfN } kind = kSample;
    int n = 1;  // beam width / best-of-n count

    static DecodeMode parse(const std::string& text);
    std::string to_string() const;
};

enum class Outcome { kWin, kTie, kLoss };

// One paired comparison; `outcome` is from the model's point of view and is
// always consistent with the gold scores.
struct MatchRecord {
    std::vector<int> prompt;
    Response model_response;
    Response baseline_response;
    double model_score = 0.0;
    double baseline_score = 0.0;
    Outcome outcome = Outcome::kTie;

    double credit() const;  // 1 / 0.5 / 0
    int model_len() const { return model_response.length(); }
    int baseline_len() const { return baseline_response.length(); }
};

struct EvalOptions {
    double temperature = 1.0;
    int max_new_tokens = 48;
    int jobs = 1;
};

struct HeadToHeadResult {
    std::vector<MatchRecord> records;
    double win_rate = 0.0;
    double mean_model_len = 0.0;
    double mean_baseline_len = 0.0;
};

// One response per side per prompt, judged by `gold`.  The model side decodes
// with `mode`; the baseline always samples at the eval temperature.  Both
// sides share the per-prompt derived seed, so a model evaluated against
// itself in sample mode ties on every prompt.
HeadToHeadResult head_to_head(const Checkpoint& model, const Checkpoint& baseline,
                              const std::vector<std::vector<int>>& prompts,
                              const RewardModel& gold, const DecodeMode& mode,
                              std::uint64_t seed, const EvalOptions& opts);

// Simplified length-controlled win rate ("LC-simple"): fits
// P(win) = sigma(b0 + b1 * dl) with dl the scaled length difference, and
// returns sigma(b0) -- the debiased win probability at equal lengths.
struct LcFit {
    double lc_win_rate = 0.5;
    double b0 = 0.0;
    double b1 = 0.0;
    bool available = false;  // false -> lc_win_rate is the raw win rate
};

LcFit lc_win_rate(const std::vector<MatchRecord>& records);

// n temperature-1 samples; returns the one the selection reward likes best
// (ties go to the earliest sample).
Response best_of_n(const Checkpoint& ckpt, const std::vector<int>& prompt,
                   const RewardModel& selector, int n, int max_new_tokens, std::uint64_t seed);

// exp(mean per-token negative log-likelihood) over every next-token position
// of every corpus sequence.
double heldout_perplexity(const Checkpoint& ckpt, const std::vector<std::vector<int>>& corpus);

struct IterationReport {
    int iteration = 0;
    std::string mode = "sample";
    double win_rate = 0.0;
    double lc_win_rate = 0.0;
    bool lc_available = false;
    double mean_len = 0.0;
    double gold_reward = 0.0;
    double proxy_reward = 0.0;
    double perplexity = 0.0;
    std::int64_t n = 0;
    std::uint64_t seed = 0;

    void validate() const;
};

// Writes the CSV table and a markdown summary (win-rate and length
// trajectories, with a length-inflation flag once any later iteration's mean
// length passes 1.5x the first iteration's).  Byte-stable.
void emit_report(const std::vector<IterationReport>& reports, const std::string& csv_path,
                 const std::string& md_path);

}  // namespace dpolab
