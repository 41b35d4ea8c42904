// dpolab: train and dissect length-regularized iterative DPO on a digit task.
//
// Everything an experiment needs lives in one config file; flags only pick
// the command, override the seed/jobs/output, and select ablations.  Exit
// codes: 0 success, 1 usage or config error, 2 runtime failure.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dpolab/config.hpp"
#include "dpolab/data.hpp"
#include "dpolab/decode.hpp"
#include "dpolab/dpo.hpp"
#include "dpolab/eval.hpp"
#include "dpolab/model.hpp"
#include "dpolab/pipeline.hpp"
#include "dpolab/rng.hpp"
#include "dpolab/task.hpp"
#include "dpolab/util.hpp"
#include "json.hpp"

namespace {

using namespace dpolab;

struct CommonFlags {
    std::string config_path;
    std::string out;
    std::int64_t seed = -1;  // -1 = use the config's seed
    int jobs = 0;            // 0 = use the config's jobs
    std::string ablation;
    bool resume = false;
};

void apply_overrides(LabConfig& cfg, const CommonFlags& flags) {
    if (flags.seed >= 0) cfg.pipeline.seed = static_cast<std::uint64_t>(flags.seed);
    if (flags.jobs > 0) cfg.pipeline.jobs = flags.jobs;
    if (!flags.out.empty()) cfg.pipeline.out_dir = flags.out;
    if (flags.ablation.empty() || flags.ablation == "ilr-dpo") {
        // default schedule as configured
    } else if (flags.ablation == "idpo") {
        for (IterationSpec& s : cfg.pipeline.schedule) s.alpha = 0.0;
    } else if (flags.ablation == "more-epochs") {
        // The extra-epochs comparison: one iteration, same first-round data,
        // three passes over it instead of one.
        cfg.pipeline.schedule.resize(1);
        cfg.pipeline.epochs = 3;
    } else {
        throw std::invalid_argument("unknown ablation '" + flags.ablation +
                                    "' (expected idpo, ilr-dpo, or more-epochs)");
    }
}

Checkpoint load_base(const LabConfig& cfg) {
    if (cfg.base_checkpoint.empty()) {
        throw std::invalid_argument("run.base_checkpoint is not set in the config");
    }
    if (!file_exists(cfg.base_checkpoint)) {
        throw std::invalid_argument("base checkpoint " + cfg.base_checkpoint +
                                    " not found; run `dpolab pretrain` first");
    }
    return Checkpoint::load(cfg.base_checkpoint);
}

void ensure_parent_dir(const std::string& path) {
    std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
}

// Collection prompts: held-out sets drawn first, X filtered against both.
std::vector<std::vector<int>> filtered_train_prompts(const PipelineConfig& pc) {
    auto eval_prompts = make_prompts(pc.n_eval_prompts, pc.prompt_len_min, pc.prompt_len_max,
                                     derive_seed(pc.seed, 21));
    auto validation = make_prompts(pc.n_validation_prompts, pc.prompt_len_min, pc.prompt_len_max,
                                   derive_seed(pc.seed, 22));
    auto prompts = make_prompts(pc.n_prompts, pc.prompt_len_min, pc.prompt_len_max,
                                derive_seed(pc.seed, 20));
    std::int64_t removed = 0;
    prompts = filter_prompt_overlap(prompts, eval_prompts, &removed);
    std::int64_t removed_val = 0;
    prompts = filter_prompt_overlap(prompts, validation, &removed_val);
    std::cout << "prompts: " << prompts.size() << " kept, " << (removed + removed_val)
              << " removed as eval/validation overlap\n";
    return prompts;
}

int cmd_pretrain(const LabConfig& cfg) {
    Vocabulary vocab = Vocabulary::digits();
    const PipelineConfig& pc = cfg.pipeline;
    auto eval_prompts = make_prompts(pc.n_eval_prompts, pc.prompt_len_min, pc.prompt_len_max,
                                     derive_seed(pc.seed, 21));
    auto corpus_prompts = make_prompts(pc.n_prompts, pc.prompt_len_min, pc.prompt_len_max,
                                       derive_seed(pc.seed, 12));
    std::int64_t removed = 0;
    corpus_prompts = filter_prompt_overlap(corpus_prompts, eval_prompts, &removed);
    // Padded sequences stay within both the response cap and the context.
    const int pad_cap =
        std::min(pc.collect.max_new_tokens, cfg.model.context - pc.prompt_len_max - 2);
    auto corpus = make_verbose_corpus(corpus_prompts, vocab, cfg.pretrain.verbose_frac,
                                      cfg.pretrain.noise_frac, std::max(1, pad_cap),
                                      derive_seed(pc.seed, 13));

    std::cout << "pretraining on " << corpus.size() << " sequences ("
              << cfg.pretrain.steps << " steps, verbose_frac "
              << cfg.pretrain.verbose_frac << ", noise_frac " << cfg.pretrain.noise_frac
              << ")\n";
    PretrainResult result = pretrain(corpus, cfg.model, vocab, cfg.pretrain);

    if (cfg.base_checkpoint.empty()) {
        throw std::invalid_argument("run.base_checkpoint is not set in the config");
    }
    ensure_parent_dir(cfg.base_checkpoint);
    result.ckpt.save(cfg.base_checkpoint);
    std::ostringstream log;
    for (std::size_t i = 0; i < result.losses.size(); ++i) {
        log << nlohmann::json{{"step", i}, {"loss", result.losses[i]}}.dump() << "\n";
    }
    atomic_write_file(cfg.base_checkpoint + ".log", log.str());
    std::cout << "wrote " << cfg.base_checkpoint << " (final loss "
              << format_double(result.losses.back(), 4) << ")\n";
    return 0;
}

int cmd_collect(const LabConfig& cfg, const std::string& dataset_out) {
    Checkpoint base = load_base(cfg);
    auto prompts = filtered_train_prompts(cfg.pipeline);
    auto labeling = make_reward(cfg.pipeline.labeling_reward, base.vocab);
    CollectOptions copts = cfg.pipeline.collect;
    copts.jobs = cfg.pipeline.jobs;
    PreferenceDataset ds = collect_preferences(base, prompts, *labeling, 1,
                                               derive_seed(cfg.pipeline.seed, 1001), copts);
    std::string out = dataset_out.empty() ? cfg.pipeline.out_dir + "/dataset.jsonl" : dataset_out;
    ensure_parent_dir(out);
    save_dataset(ds, out);
    std::cout << "collected " << ds.stats.pairs_kept << " pairs from " << ds.stats.prompts_in
              << " prompts (" << ds.stats.ties_discarded << " ties, "
              << ds.stats.identical_discarded << " identical discarded), mean reward "
              << format_double(ds.stats.mean_sampled_reward, 4) << " -> " << out << "\n";
    return 0;
}

int cmd_train(const LabConfig& cfg, const std::string& dataset_path, double beta_flag,
              double alpha_flag, const std::string& ckpt_out) {
    if (dataset_path.empty()) throw std::invalid_argument("train needs --dataset");
    Checkpoint base = load_base(cfg);
    PreferenceDataset ds = load_dataset(dataset_path, base.vocab);

    TrainConfig tc;
    tc.beta = beta_flag > 0 ? beta_flag : cfg.pipeline.schedule.front().beta_grid.front();
    tc.alpha = alpha_flag >= 0 ? alpha_flag : cfg.pipeline.schedule.front().alpha;
    tc.lr = cfg.pipeline.lr;
    tc.epochs = cfg.pipeline.epochs;
    tc.batch_size = cfg.pipeline.batch_size;
    tc.seed = derive_seed(cfg.pipeline.seed, 2001);
    TrainResult tr = train_one_iteration(base, ds, tc);

    std::string out = ckpt_out.empty() ? cfg.pipeline.out_dir + "/trained.ckpt" : ckpt_out;
    ensure_parent_dir(out);
    tr.ckpt.save(out);
    save_train_log(tr.log, out + ".log");
    std::cout << "trained beta=" << tc.beta << " alpha=" << tc.alpha << " on "
              << ds.pairs.size() << " pairs, final loss "
              << format_double(tr.log.back().loss, 4) << " -> " << out << "\n";
    return 0;
}

int cmd_iterate(const LabConfig& cfg, bool resume) {
    Checkpoint base = load_base(cfg);
    RunManifest manifest = run_pipeline(base, cfg.pipeline, resume);
    for (const IterationRecord& rec : manifest.iterations) {
        std::cout << "iter " << rec.iteration << ": beta=" << rec.selected_beta
                  << " achieved=" << format_double(rec.achieved_reward, 4);
        for (const IterationReport& row : rec.reports) {
            std::cout << " [" << row.mode << " win=" << format_double(row.win_rate, 3)
                      << " len=" << format_double(row.mean_len, 2)
                      << " gold=" << format_double(row.gold_reward, 3)
                      << " ppl=" << format_double(row.perplexity, 3) << "]";
        }
        std::cout << "\n";
    }
    std::cout << "manifest: " << cfg.pipeline.out_dir << "/manifest.json\n";
    return 0;
}

int cmd_eval(const LabConfig& cfg, const std::string& ckpt_path, const std::string& baseline_path) {
    if (ckpt_path.empty()) throw std::invalid_argument("eval needs --checkpoint");
    Checkpoint model = Checkpoint::load(ckpt_path);
    Checkpoint baseline =
        baseline_path.empty() ? load_base(cfg) : Checkpoint::load(baseline_path);
    if (!(model.vocab == baseline.vocab)) {
        throw std::invalid_argument("vocabulary mismatch between " + ckpt_path + " and baseline");
    }

    const PipelineConfig& pc = cfg.pipeline;
    auto eval_prompts = make_prompts(pc.n_eval_prompts, pc.prompt_len_min, pc.prompt_len_max,
                                     derive_seed(pc.seed, 21));
    auto corpus = make_corpus(eval_prompts, model.vocab);
    auto labeling = make_reward(pc.labeling_reward, model.vocab);
    GoldTaskReward gold(model.vocab);

    double ppl = heldout_perplexity(model, corpus);
    std::vector<IterationReport> rows;
    for (std::size_t mi = 0; mi < pc.eval_modes.size(); ++mi) {
        DecodeMode mode = DecodeMode::parse(pc.eval_modes[mi]);
        EvalOptions eopts;
        eopts.max_new_tokens = pc.collect.max_new_tokens;
        eopts.jobs = pc.jobs;
        std::uint64_t row_seed = derive_seed(derive_seed(pc.seed, 3000), mi);
        HeadToHeadResult h2h =
            head_to_head(model, baseline, eval_prompts, gold, mode, row_seed, eopts);
        LcFit lc = lc_win_rate(h2h.records);
        double gold_sum = 0.0, proxy_sum = 0.0;
        for (const MatchRecord& r : h2h.records) {
            gold_sum += r.model_score;
            proxy_sum += labeling->score(r.prompt, r.model_response);
        }
        IterationReport row;
        row.iteration = model.iteration_tag;
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
        rows.push_back(row);
        std::cout << row.mode << ": win=" << format_double(row.win_rate, 3)
                  << " lc=" << format_double(row.lc_win_rate, 3)
                  << (row.lc_available ? "" : " (raw)")
                  << " len=" << format_double(row.mean_len, 2)
                  << " gold=" << format_double(row.gold_reward, 3) << "\n";
    }
    std::string out = pc.out_dir + "/eval";
    std::filesystem::create_directories(out);
    emit_report(rows, out + "/report.csv", out + "/report.md");
    std::cout << "report: " << out << "/report.csv\n";
    return 0;
}

int cmd_report(const LabConfig& cfg) {
    std::string manifest_path = cfg.pipeline.out_dir + "/manifest.json";
    if (!file_exists(manifest_path)) {
        throw std::invalid_argument(manifest_path + " not found; run `dpolab iterate` first");
    }
    RunManifest manifest = load_manifest(manifest_path);
    std::vector<IterationReport> rows;
    for (const IterationRecord& rec : manifest.iterations) {
        for (const IterationReport& row : rec.reports) rows.push_back(row);
    }
    if (rows.empty()) throw std::invalid_argument("manifest holds no completed iterations yet");
    emit_report(rows, cfg.pipeline.out_dir + "/report.csv", cfg.pipeline.out_dir + "/report.md");
    std::cout << read_file(cfg.pipeline.out_dir + "/report.md");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"length-regularized iterative DPO laboratory"};
    app.require_subcommand(1);

    CommonFlags flags;
    std::string dataset_path, ckpt_path, baseline_path, dataset_out, ckpt_out;
    double beta_flag = -1.0, alpha_flag = -1.0;

    auto add_common = [&](CLI::App* sub, bool with_resume = false) {
        sub->add_option("--config", flags.config_path, "config file path")->required();
        sub->add_option("--out", flags.out, "override the output directory");
        sub->add_option("--seed", flags.seed, "override the root seed");
        sub->add_option("--jobs", flags.jobs, "worker threads (never changes results)");
        sub->add_option("--ablation", flags.ablation,
                        "experiment arm: idpo, ilr-dpo, or more-epochs");
        if (with_resume) {
            sub->add_flag("--resume", flags.resume, "continue an interrupted run");
        }
    };

    CLI::App* sub_pretrain = app.add_subcommand("pretrain", "train the base policy");
    add_common(sub_pretrain);
    CLI::App* sub_collect =
        app.add_subcommand("collect", "sample one preference dataset from the base policy");
    add_common(sub_collect);
    sub_collect->add_option("--dataset-out", dataset_out, "dataset file to write");
    CLI::App* sub_train = app.add_subcommand("train", "one training run on an existing dataset");
    add_common(sub_train);
    sub_train->add_option("--dataset", dataset_path, "preference dataset file")->required();
    sub_train->add_option("--beta", beta_flag, "beta override (default: first grid entry)");
    sub_train->add_option("--alpha", alpha_flag, "alpha override (default: iteration-1 alpha)");
    sub_train->add_option("--checkpoint-out", ckpt_out, "checkpoint file to write");
    CLI::App* sub_iterate = app.add_subcommand("iterate", "run the full iterative pipeline");
    add_common(sub_iterate, true);
    CLI::App* sub_eval = app.add_subcommand("eval", "head-to-head evaluation of a checkpoint");
    add_common(sub_eval);
    sub_eval->add_option("--checkpoint", ckpt_path, "checkpoint to evaluate")->required();
    sub_eval->add_option("--baseline", baseline_path,
                         "baseline checkpoint (default: the config's base)");
    CLI::App* sub_report = app.add_subcommand("report", "re-render reports from a run manifest");
    add_common(sub_report);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    LabConfig cfg;
    try {
        cfg = parse_config_file(flags.config_path);
        apply_overrides(cfg, flags);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }

    try {
        if (sub_pretrain->parsed()) return cmd_pretrain(cfg);
        if (sub_collect->parsed()) return cmd_collect(cfg, dataset_out);
        if (sub_train->parsed())
            return cmd_train(cfg, dataset_path, beta_flag, alpha_flag, ckpt_out);
        if (sub_iterate->parsed()) return cmd_iterate(cfg, flags.resume);
        if (sub_eval->parsed()) return cmd_eval(cfg, ckpt_path, baseline_path);
        if (sub_report->parsed()) return cmd_report(cfg);
        std::cerr << "no command given\n";
        return 1;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
