#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dpolab/data.hpp"
#include "dpolab/eval.hpp"
#include "dpolab/model.hpp"
#include "dpolab/reward.hpp"

namespace dpolab {

// Per-iteration knobs: length-penalty weight and the beta grid searched that
// round.  The default 3-iteration schedule keeps the length penalty off in
// the first round and at 0.02 afterwards.
struct IterationSpec {
    double alpha = 0.0;
    std::vector<double> beta_grid{0.01, 0.03, 0.1};
};

std::vector<IterationSpec> default_schedule();

struct PipelineConfig {
    std::vector<IterationSpec> schedule = default_schedule();

    // Prompt sets: X for collection, a held-out evaluation set, and a
    // validation set used only for beta selection.  The two held-out sets are
    // drawn first and X is filtered against both.
    int n_prompts = 2000;
    int n_eval_prompts = 200;
    int n_validation_prompts = 64;
    int prompt_len_min = 3;
    int prompt_len_max = 6;

    RewardDescriptor labeling_reward;  // scores collected responses (the proxy)

    CollectOptions collect;

    double lr = 3e-4;
    int epochs = 1;
    int batch_size = 16;

    std::vector<std::string> eval_modes{"sample"};

    std::uint64_t seed = 1;
    std::string out_dir;
    std::string external_d1;  // optional pre-supplied first dataset, "" = collect
    int jobs = 1;             // worker threads; never affects produced bytes

    int iterations() const { return static_cast<int>(schedule.size()); }
    void validate() const;
};

// Canonical key=value rendering of the config; its hash ties a manifest to
// the exact configuration that produced it.
std::string canonical_config_string(const PipelineConfig& cfg);
std::string config_hash(const PipelineConfig& cfg);

// A file the pipeline produced, named relative to the run directory.
struct FileRef {
    std::string path;
    std::string hash;  // fnv1a-64 hex of the file bytes

    bool recorded() const { return !hash.empty(); }
};

struct ArmRecord {
    double beta = 0.0;
    FileRef checkpoint;
    FileRef train_log;
    double validation_gold = 0.0;
};

struct IterationRecord {
    int iteration = 0;  // 1-based
    double alpha = 0.0;
    FileRef dataset;
    double achieved_reward = 0.0;  // mean labeling reward over sampled responses
    std::vector<ArmRecord> arms;
    double selected_beta = 0.0;
    FileRef selected_checkpoint;
    FileRef selected_marker;
    FileRef report_csv;
    FileRef report_md;
    std::vector<IterationReport> reports;
    bool complete = false;
};

struct RunManifest {
    std::string config_hash;
    std::uint64_t seed = 0;
    FileRef config_copy;
    FileRef base_checkpoint;
    std::vector<IterationRecord> iterations;
    FileRef report_csv;  // run-level trajectory across iterations
    FileRef report_md;
    bool complete = false;
};

void save_manifest(const RunManifest& m, const std::string& path);
RunManifest load_manifest(const std::string& path);

// Index of the best arm: highest validation gold reward, ties toward the
// smallest beta.
int select_beta(const std::vector<ArmRecord>& arms);

// Runs the full loop: collect D_i from the current policy (or ingest the
// external D_1), train one arm per beta, select by validation gold reward,
// evaluate against the base policy, persist everything, repeat.  The
// manifest is rewritten after every stage, so an interrupted run can be
// continued with resume=true; completed stages are verified by content hash
// and never recomputed.
RunManifest run_pipeline(const Checkpoint& base, const PipelineConfig& cfg, bool resume);

}  // namespace dpolab
