#include "dpolab/pipeline.hpp"

#include <cstdio>
#include <filesystem>
#include <set>
#include <sstream>
#include <stdexcept>

#include "dpolab/decode.hpp"
#include "dpolab/dpo.hpp"
#include "dpolab/rng.hpp"
#include "dpolab/task.hpp"
#include "dpolab/util.hpp"
#include "json.hpp"

namespace dpolab {

namespace {

using nlohmann::json;

// All pipeline randomness flows from the root seed through these streams.
// Iterations are 1-based; arm indexes into the iteration's beta grid.
constexpr std::uint64_t kPromptStream = 20;
constexpr std::uint64_t kEvalPromptStream = 21;
constexpr std::uint64_t kValidationPromptStream = 22;
std::uint64_t collect_seed(std::uint64_t root, int iter) {
    return derive_seed(root, 1000 + static_cast<std::uint64_t>(iter));
}
std::uint64_t train_seed(std::uint64_t root, int iter, int arm) {
    return derive_seed(root, 2000 + 16 * static_cast<std::uint64_t>(iter) +
                                 static_cast<std::uint64_t>(arm));
}
std::uint64_t validation_seed(std::uint64_t root, int iter) {
    return derive_seed(root, 2500 + static_cast<std::uint64_t>(iter));
}
std::uint64_t eval_seed(std::uint64_t root, int iter) {
    return derive_seed(root, 3000 + static_cast<std::uint64_t>(iter));
}

std::string g17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
}

std::string gshort(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%g", v);
    return std::string(buf);
}

std::string join_doubles(const std::vector<double>& vs) {
    std::string out;
    for (std::size_t i = 0; i < vs.size(); ++i) {
        if (i) out += ',';
        out += g17(vs[i]);
    }
    return out;
}

}  // namespace

std::vector<IterationSpec> default_schedule() {
    return {IterationSpec{0.0, {0.01, 0.03, 0.1}}, IterationSpec{0.02, {0.01, 0.03, 0.1}},
            IterationSpec{0.02, {0.01, 0.03, 0.1}}};
}

void PipelineConfig::validate() const {
    if (schedule.empty()) throw std::invalid_argument("PipelineConfig: schedule is empty");
    for (std::size_t i = 0; i < schedule.size(); ++i) {
        const IterationSpec& s = schedule[i];
        std::string where = "PipelineConfig: iteration " + std::to_string(i + 1);
        if (s.alpha < 0.0) throw std::invalid_argument(where + ": alpha must be >= 0");
        if (s.beta_grid.empty()) throw std::invalid_argument(where + ": beta grid is empty");
        std::set<double> seen;
        for (double b : s.beta_grid) {
            if (!(b > 0.0)) throw std::invalid_argument(where + ": beta must be > 0");
            if (!seen.insert(b).second) {
                throw std::invalid_argument(where + ": duplicate beta " + gshort(b));
            }
        }
    }
    if (n_prompts < 1) throw std::invalid_argument("PipelineConfig: n_prompts must be >= 1");
    if (n_eval_prompts < 1) throw std::invalid_argument("PipelineConfig: n_eval_prompts must be >= 1");
    if (n_validation_prompts < 1) {
        throw std::invalid_argument("PipelineConfig: n_validation_prompts must be >= 1");
    }
    if (prompt_len_min < 1 || prompt_len_max < prompt_len_min) {
        throw std::invalid_argument("PipelineConfig: bad prompt length range [" +
                                    std::to_string(prompt_len_min) + ", " +
                                    std::to_string(prompt_len_max) + "]");
    }
    if (labeling_reward.name.empty()) {
        throw std::invalid_argument("PipelineConfig: labeling_reward is unset");
    }
    if (!(lr > 0.0)) throw std::invalid_argument("PipelineConfig: lr must be > 0");
    if (epochs < 1) throw std::invalid_argument("PipelineConfig: epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("PipelineConfig: batch_size must be >= 1");
    if (eval_modes.empty()) throw std::invalid_argument("PipelineConfig: eval_modes is empty");
    for (const std::string& m : eval_modes) DecodeMode::parse(m);  // throws on junk
    if (out_dir.empty()) throw std::invalid_argument("PipelineConfig: out_dir is unset");
}

std::string canonical_config_string(const PipelineConfig& cfg) {
    // out_dir and jobs are deliberately left out: neither may influence the
    // produced bytes, so neither belongs in the identity of a run.
    std::ostringstream out;
    out << "version=1\n";
    out << "iterations=" << cfg.iterations() << "\n";
    for (int i = 0; i < cfg.iterations(); ++i) {
        const IterationSpec& s = cfg.schedule[static_cast<std::size_t>(i)];
        out << "iter" << (i + 1) << ".alpha=" << g17(s.alpha) << "\n";
        out << "iter" << (i + 1) << ".betas=" << join_doubles(s.beta_grid) << "\n";
    }
    out << "n_prompts=" << cfg.n_prompts << "\n";
    out << "n_eval_prompts=" << cfg.n_eval_prompts << "\n";
    out << "n_validation_prompts=" << cfg.n_validation_prompts << "\n";
    out << "prompt_len_min=" << cfg.prompt_len_min << "\n";
    out << "prompt_len_max=" << cfg.prompt_len_max << "\n";
    out << "reward.name=" << cfg.labeling_reward.name << "\n";
    for (const auto& [key, value] : cfg.labeling_reward.params) {
        out << "reward." << key << "=" << g17(value) << "\n";
    }
    out << "collect.samples_per_prompt=" << cfg.collect.samples_per_prompt << "\n";
    out << "collect.pairs_per_prompt=" << cfg.collect.pairs_per_prompt << "\n";
    out << "collect.max_new_tokens=" << cfg.collect.max_new_tokens << "\n";
    out << "collect.temperature=" << g17(cfg.collect.temperature) << "\n";
    out << "lr=" << g17(cfg.lr) << "\n";
    out << "epochs=" << cfg.epochs << "\n";
    out << "batch_size=" << cfg.batch_size << "\n";
    out << "eval_modes=";
    for (std::size_t i = 0; i < cfg.eval_modes.size(); ++i) {
        if (i) out << ',';
        out << cfg.eval_modes[i];
    }
    out << "\n";
    out << "seed=" << cfg.seed << "\n";
    out << "external_d1=" << cfg.external_d1 << "\n";
    return out.str();
}

std::string config_hash(const PipelineConfig& cfg) {
    return hash_hex(fnv1a64(canonical_config_string(cfg)));
}

// --- manifest (de)serialization --------------------------------------------

namespace {

json ref_to_json(const FileRef& r) { return json{{"path", r.path}, {"hash", r.hash}}; }

FileRef ref_from_json(const json& j) {
    FileRef r;
    r.path = j.at("path").get<std::string>();
    r.hash = j.at("hash").get<std::string>();
    return r;
}

json report_to_json(const IterationReport& r) {
    return json{{"iteration", r.iteration},
                {"mode", r.mode},
                {"win_rate", r.win_rate},
                {"lc_win_rate", r.lc_win_rate},
                {"lc_available", r.lc_available},
                {"mean_len", r.mean_len},
                {"gold_reward", r.gold_reward},
                {"proxy_reward", r.proxy_reward},
                {"perplexity", r.perplexity},
                {"n", r.n},
                {"seed", r.seed}};
}

IterationReport report_from_json(const json& j) {
    IterationReport r;
    r.iteration = j.at("iteration").get<int>();
    r.mode = j.at("mode").get<std::string>();
    r.win_rate = j.at("win_rate").get<double>();
    r.lc_win_rate = j.at("lc_win_rate").get<double>();
    r.lc_available = j.at("lc_available").get<bool>();
    r.mean_len = j.at("mean_len").get<double>();
    r.gold_reward = j.at("gold_reward").get<double>();
    r.proxy_reward = j.at("proxy_reward").get<double>();
    r.perplexity = j.at("perplexity").get<double>();
    r.n = j.at("n").get<std::int64_t>();
    r.seed = j.at("seed").get<std::uint64_t>();
    return r;
}

}  // namespace

void save_manifest(const RunManifest& m, const std::string& path) {
    json iters = json::array();
    for (const IterationRecord& it : m.iterations) {
        json arms = json::array();
        for (const ArmRecord& a : it.arms) {
            arms.push_back(json{{"beta", a.beta},
                                {"checkpoint", ref_to_json(a.checkpoint)},
                                {"train_log", ref_to_json(a.train_log)},
                                {"validation_gold", a.validation_gold}});
        }
        json reports = json::array();
        for (const IterationReport& r : it.reports) reports.push_back(report_to_json(r));
        iters.push_back(json{{"iteration", it.iteration},
                             {"alpha", it.alpha},
                             {"dataset", ref_to_json(it.dataset)},
                             {"achieved_reward", it.achieved_reward},
                             {"arms", arms},
                             {"selected_beta", it.selected_beta},
                             {"selected_checkpoint", ref_to_json(it.selected_checkpoint)},
                             {"selected_marker", ref_to_json(it.selected_marker)},
                             {"report_csv", ref_to_json(it.report_csv)},
                             {"report_md", ref_to_json(it.report_md)},
                             {"reports", reports},
                             {"complete", it.complete}});
    }
    json doc{{"format", "dpolab.manifest"},
             {"version", 1},
             {"config_hash", m.config_hash},
             {"seed", m.seed},
             {"config_copy", ref_to_json(m.config_copy)},
             {"base_checkpoint", ref_to_json(m.base_checkpoint)},
             {"iterations", iters},
             {"report_csv", ref_to_json(m.report_csv)},
             {"report_md", ref_to_json(m.report_md)},
             {"complete", m.complete}};
    atomic_write_file(path, doc.dump(2) + "\n");
}

RunManifest load_manifest(const std::string& path) {
    json doc = json::parse(read_file(path));
    if (doc.value("format", "") != "dpolab.manifest") {
        throw std::runtime_error("load_manifest: " + path + " is not a manifest");
    }
    if (doc.at("version").get<int>() != 1) {
        throw std::runtime_error("load_manifest: unsupported version in " + path);
    }
    RunManifest m;
    m.config_hash = doc.at("config_hash").get<std::string>();
    m.seed = doc.at("seed").get<std::uint64_t>();
    m.config_copy = ref_from_json(doc.at("config_copy"));
    m.base_checkpoint = ref_from_json(doc.at("base_checkpoint"));
    m.report_csv = ref_from_json(doc.at("report_csv"));
    m.report_md = ref_from_json(doc.at("report_md"));
    m.complete = doc.at("complete").get<bool>();
    for (const json& ij : doc.at("iterations")) {
        IterationRecord it;
        it.iteration = ij.at("iteration").get<int>();
        it.alpha = ij.at("alpha").get<double>();
        it.dataset = ref_from_json(ij.at("dataset"));
        it.achieved_reward = ij.at("achieved_reward").get<double>();
        for (const json& aj : ij.at("arms")) {
            ArmRecord a;
            a.beta = aj.at("beta").get<double>();
            a.checkpoint = ref_from_json(aj.at("checkpoint"));
            a.train_log = ref_from_json(aj.at("train_log"));
            a.validation_gold = aj.at("validation_gold").get<double>();
            it.arms.push_back(std::move(a));
        }
        it.selected_beta = ij.at("selected_beta").get<double>();
        it.selected_checkpoint = ref_from_json(ij.at("selected_checkpoint"));
        it.selected_marker = ref_from_json(ij.at("selected_marker"));
        it.report_csv = ref_from_json(ij.at("report_csv"));
        it.report_md = ref_from_json(ij.at("report_md"));
        for (const json& rj : ij.at("reports")) it.reports.push_back(report_from_json(rj));
        it.complete = ij.at("complete").get<bool>();
        m.iterations.push_back(std::move(it));
    }
    return m;
}

int select_beta(const std::vector<ArmRecord>& arms) {
    if (arms.empty()) throw std::invalid_argument("select_beta: no candidates");
    int best = 0;
    for (int i = 1; i < static_cast<int>(arms.size()); ++i) {
        const ArmRecord& a = arms[static_cast<std::size_t>(i)];
        const ArmRecord& b = arms[static_cast<std::size_t>(best)];
        if (a.validation_gold > b.validation_gold ||
            (a.validation_gold == b.validation_gold && a.beta < b.beta)) {
            best = i;
        }
    }
    return best;
}

// --- run_pipeline -----------------------------------------------------------

namespace {

std::string join_path(const std::string& dir, const std::string& rel) { return dir + "/" + rel; }

// True when `ref` records this artifact and the bytes on disk still match.
// A recorded artifact whose file vanished is simply "not ok" (recompute);
// a recorded artifact whose bytes changed is corruption and stops the run.
bool artifact_ok(const std::string& run_dir, const FileRef& ref) {
    if (!ref.recorded()) return false;
    std::string full = join_path(run_dir, ref.path);
    if (!file_exists(full)) return false;
    std::string actual = file_hash(full);
    if (actual != ref.hash) {
        throw std::runtime_error("manifest hash mismatch for " + ref.path + ": recorded " +
                                 ref.hash + ", found " + actual);
    }
    return true;
}

// Hashes a freshly written artifact into `ref`.  If the manifest already had
// a hash for it, the recomputed bytes must agree -- anything else means the
// run is not deterministic and must not continue silently.
void record_artifact(const std::string& run_dir, const std::string& rel, FileRef& ref) {
    std::string actual = file_hash(join_path(run_dir, rel));
    if (ref.recorded() && (ref.path != rel || ref.hash != actual)) {
        throw std::runtime_error("recomputed " + rel + " does not match the manifest (" + actual +
                                 " vs " + ref.hash + "); refusing to continue");
    }
    ref.path = rel;
    ref.hash = actual;
}

double mean_gold_at_temperature1(const Checkpoint& ckpt,
                                 const std::vector<std::vector<int>>& prompts,
                                 const RewardModel& gold, int cap, std::uint64_t seed, int jobs) {
    std::vector<double> scores(prompts.size());
    parallel_for(static_cast<std::int64_t>(prompts.size()), jobs, [&](std::int64_t j) {
        Response r = sample_response(ckpt, prompts[static_cast<std::size_t>(j)], 1.0, cap,
                                     derive_seed(seed, static_cast<std::uint64_t>(j)));
        scores[static_cast<std::size_t>(j)] =
            gold.score(prompts[static_cast<std::size_t>(j)], r);
    });
    double sum = 0.0;
    for (double s : scores) sum += s;
    return sum / static_cast<double>(scores.size());
}

std::string beta_dir(double beta) { return "beta_" + gshort(beta); }

}  // namespace

RunManifest run_pipeline(const Checkpoint& base, const PipelineConfig& cfg, bool resume) {
    cfg.validate();
    const std::string run_dir = cfg.out_dir;
    const std::string manifest_path = join_path(run_dir, "manifest.json");
    const std::string wanted_hash = config_hash(cfg);
    std::filesystem::create_directories(run_dir);

    RunManifest manifest;
    if (file_exists(manifest_path)) {
        if (!resume) {
            throw std::runtime_error(run_dir + " already holds a run (manifest.json exists); "
                                     "pass resume to continue it");
        }
        manifest = load_manifest(manifest_path);
        if (manifest.config_hash != wanted_hash) {
            throw std::runtime_error("resume: config hash " + wanted_hash +
                                     " does not match the manifest's " + manifest.config_hash);
        }
        if (manifest.seed != cfg.seed) {
            throw std::runtime_error("resume: seed changed");
        }
    } else {
        manifest.config_hash = wanted_hash;
        manifest.seed = cfg.seed;
    }
    // Make sure one record per scheduled iteration exists, with the schedule's
    // alpha and beta grid filled in.
    manifest.iterations.resize(static_cast<std::size_t>(cfg.iterations()));
    for (int i = 0; i < cfg.iterations(); ++i) {
        IterationRecord& rec = manifest.iterations[static_cast<std::size_t>(i)];
        rec.iteration = i + 1;
        rec.alpha = cfg.schedule[static_cast<std::size_t>(i)].alpha;
        rec.arms.resize(cfg.schedule[static_cast<std::size_t>(i)].beta_grid.size());
        for (std::size_t a = 0; a < rec.arms.size(); ++a) {
            rec.arms[a].beta = cfg.schedule[static_cast<std::size_t>(i)].beta_grid[a];
        }
    }

    const Vocabulary& vocab = base.vocab;
    auto labeling = make_reward(cfg.labeling_reward, vocab);
    GoldTaskReward gold(vocab);

    // Stage: config copy + base checkpoint.
    if (!artifact_ok(run_dir, manifest.config_copy)) {
        atomic_write_file(join_path(run_dir, "config.txt"), canonical_config_string(cfg));
        record_artifact(run_dir, "config.txt", manifest.config_copy);
    }
    if (!artifact_ok(run_dir, manifest.base_checkpoint)) {
        base.save(join_path(run_dir, "base.ckpt"));
        record_artifact(run_dir, "base.ckpt", manifest.base_checkpoint);
    }
    save_manifest(manifest, manifest_path);

    // Prompt sets are derived from the seed, not persisted.  Held-out sets
    // come first; X is filtered against both of them.
    std::vector<std::vector<int>> eval_prompts = make_prompts(
        cfg.n_eval_prompts, cfg.prompt_len_min, cfg.prompt_len_max,
        derive_seed(cfg.seed, kEvalPromptStream));
    std::vector<std::vector<int>> validation_prompts = make_prompts(
        cfg.n_validation_prompts, cfg.prompt_len_min, cfg.prompt_len_max,
        derive_seed(cfg.seed, kValidationPromptStream));
    std::vector<std::vector<int>> train_prompts = make_prompts(
        cfg.n_prompts, cfg.prompt_len_min, cfg.prompt_len_max,
        derive_seed(cfg.seed, kPromptStream));
    std::int64_t removed = 0;
    train_prompts = filter_prompt_overlap(train_prompts, eval_prompts, &removed);
    std::int64_t removed_val = 0;
    train_prompts = filter_prompt_overlap(train_prompts, validation_prompts, &removed_val);
    if (train_prompts.empty()) {
        throw std::runtime_error("run_pipeline: prompt filtering removed every training prompt");
    }
    std::vector<std::vector<int>> eval_corpus = make_corpus(eval_prompts, vocab);

    Checkpoint current = base.clone_frozen();
    const int cap = cfg.collect.max_new_tokens;

    for (int i = 1; i <= cfg.iterations(); ++i) {
        IterationRecord& rec = manifest.iterations[static_cast<std::size_t>(i - 1)];
        const IterationSpec& spec = cfg.schedule[static_cast<std::size_t>(i - 1)];
        const std::string iter_dir = "iter" + std::to_string(i);
        std::filesystem::create_directories(join_path(run_dir, iter_dir));

        // Chain integrity: the policy about to collect/train must be exactly
        // the checkpoint the manifest says the previous stage produced.
        const FileRef& expected = (i == 1) ? manifest.base_checkpoint
                                           : manifest.iterations[static_cast<std::size_t>(i - 2)]
                                                 .selected_checkpoint;
        if (artifact_ok(run_dir, expected)) {
            Checkpoint persisted = Checkpoint::load(join_path(run_dir, expected.path));
            if (!checkpoints_equal(current, persisted)) {
                throw std::runtime_error("chain integrity: the in-memory policy entering iteration " +
                                         std::to_string(i) + " differs from " + expected.path);
            }
        }

        // Stage: dataset.
        const std::string ds_rel = iter_dir + "/dataset.jsonl";
        PreferenceDataset ds;
        if (artifact_ok(run_dir, rec.dataset)) {
            ds = load_dataset(join_path(run_dir, ds_rel), vocab);
        } else {
            if (i == 1 && !cfg.external_d1.empty()) {
                std::vector<std::string> issues;
                ds = load_seed_dataset(cfg.external_d1, vocab, *labeling, &issues);
                ds.iteration = 1;
                ds.seed = collect_seed(cfg.seed, i);
                // Achieved reward for imported data: mean of the stored
                // scores over both sides of every pair.
                double sum = 0.0;
                for (const PreferencePair& p : ds.pairs) {
                    sum += 0.5 * (p.chosen_reward + p.rejected_reward);
                }
                ds.stats.mean_sampled_reward = sum / static_cast<double>(ds.pairs.size());
            } else {
                CollectOptions copts = cfg.collect;
                copts.jobs = cfg.jobs;
                ds = collect_preferences(current, train_prompts, *labeling, i,
                                         collect_seed(cfg.seed, i), copts);
            }
            save_dataset(ds, join_path(run_dir, ds_rel));
            record_artifact(run_dir, ds_rel, rec.dataset);
            rec.achieved_reward = ds.stats.mean_sampled_reward;
            save_manifest(manifest, manifest_path);
        }

        // Stage: one trained arm per beta, plus its validation score.
        std::vector<Checkpoint> arm_ckpts(rec.arms.size());
        std::vector<bool> arm_loaded(rec.arms.size(), false);
        for (std::size_t a = 0; a < rec.arms.size(); ++a) {
            ArmRecord& arm = rec.arms[a];
            const std::string arm_rel_dir = iter_dir + "/" + beta_dir(arm.beta);
            const std::string ckpt_rel = arm_rel_dir + "/model.ckpt";
            const std::string log_rel = arm_rel_dir + "/train_log.jsonl";
            if (artifact_ok(run_dir, arm.checkpoint) && artifact_ok(run_dir, arm.train_log)) {
                continue;  // validation_gold is already in the manifest
            }
            std::filesystem::create_directories(join_path(run_dir, arm_rel_dir));
            TrainConfig tc;
            tc.beta = arm.beta;
            tc.alpha = spec.alpha;
            tc.lr = cfg.lr;
            tc.epochs = cfg.epochs;
            tc.batch_size = cfg.batch_size;
            tc.seed = train_seed(cfg.seed, i, static_cast<int>(a));
            TrainResult tr = train_one_iteration(current, ds, tc);
            tr.ckpt.iteration_tag = i;
            tr.ckpt.save(join_path(run_dir, ckpt_rel));
            save_train_log(tr.log, join_path(run_dir, log_rel));
            record_artifact(run_dir, ckpt_rel, arm.checkpoint);
            record_artifact(run_dir, log_rel, arm.train_log);
            arm.validation_gold = mean_gold_at_temperature1(
                tr.ckpt, validation_prompts, gold, cap, validation_seed(cfg.seed, i), cfg.jobs);
            arm_ckpts[a] = std::move(tr.ckpt);
            arm_loaded[a] = true;
            save_manifest(manifest, manifest_path);
        }

        // Stage: beta selection.
        int win = select_beta(rec.arms);
        rec.selected_beta = rec.arms[static_cast<std::size_t>(win)].beta;
        rec.selected_checkpoint = rec.arms[static_cast<std::size_t>(win)].checkpoint;
        const std::string marker_rel = iter_dir + "/selected.txt";
        if (!artifact_ok(run_dir, rec.selected_marker)) {
            atomic_write_file(join_path(run_dir, marker_rel),
                              "beta=" + gshort(rec.selected_beta) + "\npath=" +
                                  rec.selected_checkpoint.path + "\n");
            record_artifact(run_dir, marker_rel, rec.selected_marker);
            save_manifest(manifest, manifest_path);
        }
        if (arm_loaded[static_cast<std::size_t>(win)]) {
            current = std::move(arm_ckpts[static_cast<std::size_t>(win)]);
        } else {
            current = Checkpoint::load(join_path(run_dir, rec.selected_checkpoint.path));
        }

        // Stage: evaluation of the selected policy against the base.
        const std::string csv_rel = iter_dir + "/report.csv";
        const std::string md_rel = iter_dir + "/report.md";
        bool eval_ok = artifact_ok(run_dir, rec.report_csv) &&
                       artifact_ok(run_dir, rec.report_md) &&
                       rec.reports.size() == cfg.eval_modes.size();
        if (!eval_ok) {
            rec.reports.clear();
            double ppl = heldout_perplexity(current, eval_corpus);
            for (std::size_t mi = 0; mi < cfg.eval_modes.size(); ++mi) {
                DecodeMode mode = DecodeMode::parse(cfg.eval_modes[mi]);
                EvalOptions eopts;
                eopts.max_new_tokens = cap;
                eopts.jobs = cfg.jobs;
                std::uint64_t row_seed = derive_seed(eval_seed(cfg.seed, i), mi);
                HeadToHeadResult h2h =
                    head_to_head(current, base, eval_prompts, gold, mode, row_seed, eopts);
                LcFit lc = lc_win_rate(h2h.records);
                double proxy_sum = 0.0;
                for (const MatchRecord& r : h2h.records) {
                    proxy_sum += labeling->score(r.prompt, r.model_response);
                }
                double gold_sum = 0.0;
                for (const MatchRecord& r : h2h.records) gold_sum += r.model_score;
                IterationReport row;
                row.iteration = i;
                row.mode = mode.to_string();
                row.win_rate = h2h.win_rate;
                row.lc_win_rate = lc.lc_win_rate;
                row.lc_available = lc.available;
                row.mean_len = h2h.mean_model_len;
                row.gold_reward = gold_sum / static_cast<double>(h2h.records.size());
                row.proxy_reward = proxy_sum / static_cast<double>(h2h.records.size());
                row.perplexity = ppl;
                row.n = static_cast<std::int64_t>(h2h.records.size());
                row.seed = row_seed;
                rec.reports.push_back(row);
            }
            emit_report(rec.reports, join_path(run_dir, csv_rel), join_path(run_dir, md_rel));
            record_artifact(run_dir, csv_rel, rec.report_csv);
            record_artifact(run_dir, md_rel, rec.report_md);
            rec.complete = true;
            save_manifest(manifest, manifest_path);
        }
    }

    // Run-level trajectory report: rows from every iteration, grouped by
    // mode order, so the first eval mode carries the length-inflation flag.
    std::vector<IterationReport> all_rows;
    for (const IterationRecord& rec : manifest.iterations) {
        for (const IterationReport& row : rec.reports) all_rows.push_back(row);
    }
    if (!artifact_ok(run_dir, manifest.report_csv) || !artifact_ok(run_dir, manifest.report_md)) {
        emit_report(all_rows, join_path(run_dir, "report.csv"), join_path(run_dir, "report.md"));
        record_artifact(run_dir, "report.csv", manifest.report_csv);
        record_artifact(run_dir, "report.md", manifest.report_md);
    }
    manifest.complete = true;
    save_manifest(manifest, manifest_path);
    return manifest;
}

}  // namespace dpolab
