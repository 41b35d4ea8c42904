#include "dpolab/data.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "dpolab/decode.hpp"
#include "dpolab/rng.hpp"
#include "dpolab/util.hpp"
#include "json.hpp"

namespace dpolab {

namespace {

using nlohmann::json;

// Everything produced for one prompt, filled into a per-prompt slot so the
// aggregation below is independent of which thread did the work.
struct PromptSlot {
    std::vector<PreferencePair> pairs;
    std::int64_t ties = 0;
    std::int64_t identical = 0;
    double reward_sum = 0.0;
    int n_samples = 0;
};

void fill_slot(const Checkpoint& ckpt, const std::vector<int>& prompt,
               const RewardModel& reward, std::uint64_t prompt_seed,
               const CollectOptions& opts, PromptSlot& slot) {
    struct Sample {
        Response response;
        double score;
    };
    std::vector<Sample> samples;
    samples.reserve(opts.samples_per_prompt);
    for (int s = 0; s < opts.samples_per_prompt; ++s) {
        Response r = sample_response(ckpt, prompt, opts.temperature, opts.max_new_tokens,
                                     derive_seed(prompt_seed, s));
        double score = reward.score(prompt, r);
        slot.reward_sum += score;
        samples.push_back({std::move(r), score});
    }
    slot.n_samples = opts.samples_per_prompt;

    // Best-vs-worst pairing on the score ranking.  stable_sort keeps draw
    // order among equal scores, which keeps collection deterministic.
    std::stable_sort(samples.begin(), samples.end(),
                     [](const Sample& a, const Sample& b) { return a.score > b.score; });
    for (int k = 0; k < opts.pairs_per_prompt; ++k) {
        int hi = k;
        int lo = static_cast<int>(samples.size()) - 1 - k;
        if (hi >= lo) break;
        const Sample& best = samples[hi];
        const Sample& worst = samples[lo];
        if (best.response.tokens == worst.response.tokens) {
            ++slot.identical;
            continue;
        }
        if (best.score == worst.score) {
            ++slot.ties;
            continue;
        }
        PreferencePair pair;
        pair.prompt = prompt;
        pair.chosen = best.response;
        pair.rejected = worst.response;
        pair.chosen_reward = best.score;
        pair.rejected_reward = worst.score;
        pair.generator = "policy";
        slot.pairs.push_back(std::move(pair));
    }
}

json response_to_json(const Response& r) { return json(r.tokens); }

Response response_from_json(const json& j, const Vocabulary& vocab) {
    Response r;
    r.tokens = j.get<std::vector<int>>();
    r.truncated = r.tokens.empty() || r.tokens.back() != vocab.eos;
    return r;
}

json stats_to_json(const CollectionStats& s) {
    return json{{"prompts_in", s.prompts_in},
                {"pairs_kept", s.pairs_kept},
                {"ties_discarded", s.ties_discarded},
                {"identical_discarded", s.identical_discarded},
                {"mean_sampled_reward", s.mean_sampled_reward}};
}

CollectionStats stats_from_json(const json& j) {
    CollectionStats s;
    s.prompts_in = j.at("prompts_in").get<std::int64_t>();
    s.pairs_kept = j.at("pairs_kept").get<std::int64_t>();
    s.ties_discarded = j.at("ties_discarded").get<std::int64_t>();
    s.identical_discarded = j.at("identical_discarded").get<std::int64_t>();
    s.mean_sampled_reward = j.at("mean_sampled_reward").get<double>();
    return s;
}

}  // namespace

PreferenceDataset collect_preferences(const Checkpoint& ckpt,
                                      const std::vector<std::vector<int>>& prompts,
                                      const RewardModel& reward, int iteration,
                                      std::uint64_t seed, const CollectOptions& opts) {
    if (opts.samples_per_prompt < 2) {
        throw std::invalid_argument("collect_preferences: need at least 2 samples per prompt, got " +
                                    std::to_string(opts.samples_per_prompt));
    }
    if (opts.pairs_per_prompt < 1) {
        throw std::invalid_argument("collect_preferences: pairs_per_prompt must be >= 1");
    }
    if (opts.max_new_tokens < 1) {
        throw std::invalid_argument("collect_preferences: max_new_tokens must be >= 1");
    }
    if (!(opts.temperature > 0.0)) {
        throw std::invalid_argument("collect_preferences: temperature must be > 0");
    }
    if (prompts.empty()) {
        throw std::invalid_argument("collect_preferences: no prompts given");
    }

    std::vector<PromptSlot> slots(prompts.size());
    parallel_for(static_cast<std::int64_t>(prompts.size()), opts.jobs, [&](std::int64_t i) {
        fill_slot(ckpt, prompts[i], reward, derive_seed(seed, static_cast<std::uint64_t>(i)), opts,
                  slots[i]);
    });

    PreferenceDataset ds;
    ds.iteration = iteration;
    ds.reward = reward.descriptor();
    ds.seed = seed;
    ds.stats.prompts_in = static_cast<std::int64_t>(prompts.size());
    double reward_sum = 0.0;
    std::int64_t n_samples = 0;
    for (PromptSlot& slot : slots) {
        for (PreferencePair& p : slot.pairs) ds.pairs.push_back(std::move(p));
        ds.stats.ties_discarded += slot.ties;
        ds.stats.identical_discarded += slot.identical;
        reward_sum += slot.reward_sum;
        n_samples += slot.n_samples;
    }
    ds.stats.pairs_kept = static_cast<std::int64_t>(ds.pairs.size());
    ds.stats.mean_sampled_reward = reward_sum / static_cast<double>(n_samples);
    if (ds.pairs.empty()) {
        throw std::runtime_error(
            "collect_preferences: every candidate pair was discarded (" +
            std::to_string(ds.stats.ties_discarded) + " ties, " +
            std::to_string(ds.stats.identical_discarded) +
            " identical); the policy may have collapsed");
    }
    return ds;
}

std::vector<std::vector<int>> filter_prompt_overlap(
    const std::vector<std::vector<int>>& prompts,
    const std::vector<std::vector<int>>& eval_prompts, std::int64_t* removed) {
    std::set<std::vector<int>> blocked(eval_prompts.begin(), eval_prompts.end());
    std::vector<std::vector<int>> kept;
    kept.reserve(prompts.size());
    std::int64_t dropped = 0;
    for (const std::vector<int>& p : prompts) {
        if (blocked.count(p)) {
            ++dropped;
        } else {
            kept.push_back(p);
        }
    }
    if (removed) *removed = dropped;
    return kept;
}

void save_dataset(const PreferenceDataset& ds, const std::string& path) {
    std::ostringstream out;
    json header{{"format", "dpolab.prefs"},
                {"version", 1},
                {"iteration", ds.iteration},
                {"seed", ds.seed},
                {"reward", json{{"name", ds.reward.name}, {"params", json(ds.reward.params)}}},
                {"stats", stats_to_json(ds.stats)}};
    out << header.dump() << "\n";
    for (const PreferencePair& p : ds.pairs) {
        json rec{{"prompt", json(p.prompt)},
                 {"chosen", response_to_json(p.chosen)},
                 {"rejected", response_to_json(p.rejected)},
                 {"chosen_reward", p.chosen_reward},
                 {"rejected_reward", p.rejected_reward},
                 {"generator", p.generator}};
        out << rec.dump() << "\n";
    }
    atomic_write_file(path, out.str());
}

PreferenceDataset load_dataset(const std::string& path, const Vocabulary& vocab) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_dataset: cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("load_dataset: " + path + " is empty");

    json header = json::parse(line);
    if (header.value("format", "") != "dpolab.prefs") {
        throw std::runtime_error("load_dataset: " + path + " missing dpolab.prefs header");
    }
    if (header.at("version").get<int>() != 1) {
        throw std::runtime_error("load_dataset: unsupported version " +
                                 header.at("version").dump() + " in " + path);
    }
    PreferenceDataset ds;
    ds.iteration = header.at("iteration").get<int>();
    ds.seed = header.at("seed").get<std::uint64_t>();
    ds.reward.name = header.at("reward").at("name").get<std::string>();
    ds.reward.params = header.at("reward").at("params").get<std::map<std::string, double>>();
    ds.stats = stats_from_json(header.at("stats"));

    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json rec = json::parse(line);
        PreferencePair p;
        p.prompt = rec.at("prompt").get<std::vector<int>>();
        p.chosen = response_from_json(rec.at("chosen"), vocab);
        p.rejected = response_from_json(rec.at("rejected"), vocab);
        p.chosen_reward = rec.at("chosen_reward").get<double>();
        p.rejected_reward = rec.at("rejected_reward").get<double>();
        p.generator = rec.at("generator").get<std::string>();
        for (int t : p.prompt) {
            if (!vocab.valid_id(t)) {
                throw std::runtime_error("load_dataset: " + path + " line " +
                                         std::to_string(line_no) + ": token id " +
                                         std::to_string(t) + " out of range");
            }
        }
        ds.pairs.push_back(std::move(p));
    }
    if (static_cast<std::int64_t>(ds.pairs.size()) != ds.stats.pairs_kept) {
        throw std::runtime_error("load_dataset: " + path + " header claims " +
                                 std::to_string(ds.stats.pairs_kept) + " pairs but file has " +
                                 std::to_string(ds.pairs.size()));
    }
    return ds;
}

PreferenceDataset load_seed_dataset(const std::string& path, const Vocabulary& vocab,
                                    const RewardModel& reward,
                                    std::vector<std::string>* issues) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_seed_dataset: cannot open " + path);

    auto note = [&](int line_no, const std::string& why) {
        if (issues) issues->push_back("line " + std::to_string(line_no) + ": " + why);
    };
    // A response is digits optionally closed by a single trailing EOS; BOS and
    // SEP never appear.  Returns an empty string when valid.
    auto check_response = [&](const std::vector<int>& tokens) -> std::string {
        if (tokens.empty()) return "empty response";
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            int t = tokens[i];
            if (!vocab.valid_id(t)) return "token id " + std::to_string(t) + " out of range";
            if (t == vocab.bos || t == vocab.sep) {
                return "control token " + vocab.token_name(t) + " inside response";
            }
            if (t == vocab.eos && i + 1 != tokens.size()) return "tokens after <eos>";
        }
        return "";
    };

    PreferenceDataset ds;
    ds.iteration = 0;
    ds.reward = reward.descriptor();
    ds.seed = 0;
    std::string line;
    int line_no = 0;
    std::int64_t records = 0;
    std::int64_t rejected = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::parse_error& e) {
            ++records;
            ++rejected;
            note(line_no, std::string("parse error: ") + e.what());
            continue;
        }
        if (line_no == 1 && rec.is_object() && rec.contains("format")) {
            continue;  // our own header line; external files usually lack one
        }
        ++records;
        if (!rec.is_object() || !rec.contains("prompt") || !rec.contains("chosen") ||
            !rec.contains("rejected")) {
            ++rejected;
            note(line_no, "missing prompt/chosen/rejected");
            continue;
        }
        PreferencePair p;
        try {
            p.prompt = rec.at("prompt").get<std::vector<int>>();
            p.chosen = response_from_json(rec.at("chosen"), vocab);
            p.rejected = response_from_json(rec.at("rejected"), vocab);
        } catch (const json::exception& e) {
            ++rejected;
            note(line_no, std::string("bad field types: ") + e.what());
            continue;
        }
        if (p.prompt.empty()) {
            ++rejected;
            note(line_no, "empty prompt");
            continue;
        }
        bool bad_prompt = false;
        for (int t : p.prompt) {
            if (!vocab.is_digit(t)) {
                ++rejected;
                note(line_no, "prompt token " + std::to_string(t) + " is not a digit");
                bad_prompt = true;
                break;
            }
        }
        if (bad_prompt) continue;
        std::string why = check_response(p.chosen.tokens);
        if (why.empty()) why = check_response(p.rejected.tokens);
        if (!why.empty()) {
            ++rejected;
            note(line_no, why);
            continue;
        }
        if (p.chosen.tokens == p.rejected.tokens) {
            ++rejected;
            note(line_no, "chosen and rejected are identical");
            continue;
        }
        p.chosen_reward = reward.score(p.prompt, p.chosen);
        p.rejected_reward = reward.score(p.prompt, p.rejected);
        if (p.chosen_reward == p.rejected_reward) {
            ++rejected;
            note(line_no, "tie under the configured reward");
            continue;
        }
        if (p.chosen_reward < p.rejected_reward) {
            ++rejected;
            note(line_no, "ranking disagrees with the configured reward");
            continue;
        }
        p.generator = "external";
        ds.pairs.push_back(std::move(p));
    }
    if (records == 0) throw std::runtime_error("load_seed_dataset: " + path + " has no records");
    if (2 * rejected > records) {
        throw std::runtime_error("load_seed_dataset: rejected " + std::to_string(rejected) +
                                 " of " + std::to_string(records) + " records in " + path +
                                 "; refusing to train on the remainder");
    }
    ds.stats.prompts_in = static_cast<std::int64_t>(ds.pairs.size());
    ds.stats.pairs_kept = static_cast<std::int64_t>(ds.pairs.size());
    return ds;
}

}  // namespace dpolab
