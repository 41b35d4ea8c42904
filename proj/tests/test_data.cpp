#include "doctest.h"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "dpolab/data.hpp"
#include "dpolab/decode.hpp"
#include "dpolab/reward.hpp"
#include "dpolab/rng.hpp"
#include "dpolab/task.hpp"
#include "dpolab/util.hpp"
#include "test_helpers.hpp"

using namespace dpolab;

namespace {

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& name) : path("dpolab_test_" + name) {}
    ~TempFile() { std::remove(path.c_str()); }
};

Checkpoint babble_ckpt() {
    ModelConfig cfg;
    cfg.d_model = 16;
    cfg.context = 64;
    return Checkpoint::init(cfg, Vocabulary::digits(), 2024);
}

}  // namespace

TEST_CASE("collection is deterministic and independent of the worker count") {
    auto ckpt = babble_ckpt();
    auto prompts = make_prompts(24, 3, 5, 31);
    LengthBiasedProxyReward reward(ckpt.vocab, 0.3, 48);
    CollectOptions opts;
    opts.max_new_tokens = 24;

    auto serial = collect_preferences(ckpt, prompts, reward, 1, 555, opts);
    opts.jobs = 4;
    auto parallel = collect_preferences(ckpt, prompts, reward, 1, 555, opts);

    TempFile a("serial.jsonl"), b("parallel.jsonl");
    save_dataset(serial, a.path);
    save_dataset(parallel, b.path);
    CHECK(read_file(a.path) == read_file(b.path));
    CHECK(serial.stats.pairs_kept == parallel.stats.pairs_kept);
    CHECK(serial.stats.mean_sampled_reward == parallel.stats.mean_sampled_reward);
}

TEST_CASE("collection tallies match an independent replay of its sampling") {
    auto ckpt = babble_ckpt();
    auto prompts = make_prompts(16, 3, 4, 47);
    LengthBiasedProxyReward reward(ckpt.vocab, 0.3, 48);
    CollectOptions opts;
    opts.samples_per_prompt = 3;
    opts.max_new_tokens = 16;
    const std::uint64_t seed = 909;

    auto ds = collect_preferences(ckpt, prompts, reward, 2, seed, opts);

    // Replay the documented seed tree by hand: prompt i draws samples with
    // seeds derive(derive(seed, i), s) and keeps best-vs-worst by score.
    std::int64_t kept = 0, ties = 0, identical = 0;
    double reward_sum = 0.0;
    std::vector<PreferencePair> expected;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        const auto prompt_seed = derive_seed(seed, i);
        struct S {
            Response r;
            double score;
        };
        std::vector<S> samples;
        for (int s = 0; s < opts.samples_per_prompt; ++s) {
            Response r = sample_response(ckpt, prompts[i], 1.0, opts.max_new_tokens,
                                         derive_seed(prompt_seed, static_cast<std::uint64_t>(s)));
            double sc = reward.score(prompts[i], r);
            reward_sum += sc;
            samples.push_back({r, sc});
        }
        std::stable_sort(samples.begin(), samples.end(),
                         [](const S& x, const S& y) { return x.score > y.score; });
        const S& best = samples.front();
        const S& worst = samples.back();
        if (best.r.tokens == worst.r.tokens) {
            ++identical;
        } else if (best.score == worst.score) {
            ++ties;
        } else {
            ++kept;
            PreferencePair p;
            p.prompt = prompts[i];
            p.chosen = best.r;
            p.rejected = worst.r;
            p.chosen_reward = best.score;
            p.rejected_reward = worst.score;
            expected.push_back(std::move(p));
        }
    }

    CHECK(ds.stats.prompts_in == 16);
    CHECK(ds.stats.pairs_kept == kept);
    CHECK(ds.stats.ties_discarded == ties);
    CHECK(ds.stats.identical_discarded == identical);
    CHECK(ds.stats.mean_sampled_reward ==
          reward_sum / static_cast<double>(16 * opts.samples_per_prompt));
    REQUIRE(ds.pairs.size() == expected.size());
    for (std::size_t k = 0; k < expected.size(); ++k) {
        CHECK(ds.pairs[k].prompt == expected[k].prompt);
        CHECK(ds.pairs[k].chosen == expected[k].chosen);
        CHECK(ds.pairs[k].rejected == expected[k].rejected);
        CHECK(ds.pairs[k].chosen_reward == expected[k].chosen_reward);
        CHECK(ds.pairs[k].rejected_reward == expected[k].rejected_reward);
        CHECK(ds.pairs[k].generator == "policy");
    }
}

TEST_CASE("a collapsed policy aborts collection with the discard counts") {
    // Always emits <eos> immediately: both samples identical for every prompt.
    std::vector<double> logits(13, 0.0);
    logits[12] = 1e9;
    auto ckpt = testutil::constant_logits_ckpt(logits);
    auto prompts = make_prompts(5, 3, 4, 7);
    GoldTaskReward reward(ckpt.vocab);
    try {
        collect_preferences(ckpt, prompts, reward, 1, 3, {});
        FAIL("expected collect_preferences to throw");
    } catch (const std::runtime_error& e) {
        const std::string what = e.what();
        CHECK(what.find("5 identical") != std::string::npos);
        CHECK(what.find("0 ties") != std::string::npos);
    }
}

TEST_CASE("score ties between distinct responses are discarded as ties") {
    // First token is a coin flip between two wrong digits, then babble to the
    // cap: responses differ almost surely but the gold score is 0 for both.
    std::vector<double> logits(13, -40.0);
    logits[5] = 0.0;
    logits[7] = 0.0;
    auto ckpt = testutil::constant_logits_ckpt(logits);
    // No prompt digit is 5 or 7, so no babble token ever matches a target.
    std::vector<std::vector<int>> prompts{{1, 2}, {3, 4}, {0, 9}, {8, 6}};
    GoldTaskReward reward(ckpt.vocab);
    CollectOptions opts;
    opts.max_new_tokens = 12;
    try {
        collect_preferences(ckpt, prompts, reward, 1, 19, opts);
        FAIL("expected collect_preferences to throw");
    } catch (const std::runtime_error& e) {
        const std::string what = e.what();
        CHECK(what.find("ties") != std::string::npos);
        CHECK(what.find("4") != std::string::npos);
    }
}

TEST_CASE("datasets survive a save/load round trip unchanged") {
    auto ckpt = babble_ckpt();
    auto prompts = make_prompts(12, 3, 5, 91);
    LengthBiasedProxyReward reward(ckpt.vocab, 0.3, 48);
    CollectOptions opts;
    opts.max_new_tokens = 20;
    auto ds = collect_preferences(ckpt, prompts, reward, 3, 777, opts);

    TempFile f("roundtrip.jsonl");
    save_dataset(ds, f.path);
    auto back = load_dataset(f.path, ckpt.vocab);

    CHECK(back.iteration == ds.iteration);
    CHECK(back.seed == ds.seed);
    CHECK(back.reward == ds.reward);
    CHECK(back.stats.prompts_in == ds.stats.prompts_in);
    CHECK(back.stats.pairs_kept == ds.stats.pairs_kept);
    CHECK(back.stats.ties_discarded == ds.stats.ties_discarded);
    CHECK(back.stats.identical_discarded == ds.stats.identical_discarded);
    CHECK(back.stats.mean_sampled_reward == ds.stats.mean_sampled_reward);
    REQUIRE(back.pairs.size() == ds.pairs.size());
    for (std::size_t i = 0; i < ds.pairs.size(); ++i) {
        CHECK(back.pairs[i].prompt == ds.pairs[i].prompt);
        CHECK(back.pairs[i].chosen == ds.pairs[i].chosen);
        CHECK(back.pairs[i].rejected == ds.pairs[i].rejected);
        CHECK(back.pairs[i].chosen_reward == ds.pairs[i].chosen_reward);
        CHECK(back.pairs[i].rejected_reward == ds.pairs[i].rejected_reward);
        CHECK(back.pairs[i].generator == ds.pairs[i].generator);
    }

    // Stored rewards are exactly reproducible from the stored descriptor.
    auto scorer = make_reward(back.reward, ckpt.vocab);
    for (const auto& p : back.pairs) {
        CHECK(scorer->score(p.prompt, p.chosen) == p.chosen_reward);
        CHECK(scorer->score(p.prompt, p.rejected) == p.rejected_reward);
        CHECK(p.chosen_reward > p.rejected_reward);
    }
}

TEST_CASE("load_dataset rejects malformed files with precise diagnostics") {
    auto vocab = Vocabulary::digits();
    SUBCASE("missing header") {
        TempFile f("nohdr.jsonl");
        std::ofstream(f.path) << "{\"prompt\":[1],\"chosen\":[1,12],\"rejected\":[2,12]}\n";
        CHECK_THROWS_WITH_AS(load_dataset(f.path, vocab),
                             doctest::Contains("dpolab.prefs"), std::runtime_error);
    }
    SUBCASE("token out of range names the line") {
        TempFile f("badtok.jsonl");
        std::ofstream(f.path)
            << R"({"format":"dpolab.prefs","version":1,"iteration":1,"seed":1,"reward":{"name":"gold","params":{}},"stats":{"prompts_in":1,"pairs_kept":1,"ties_discarded":0,"identical_discarded":0,"mean_sampled_reward":0.5}})"
            << "\n"
            << R"({"prompt":[1,99],"chosen":[1,12],"rejected":[2,12],"chosen_reward":1.0,"rejected_reward":0.0,"generator":"policy"})"
            << "\n";
        CHECK_THROWS_WITH_AS(load_dataset(f.path, vocab), doctest::Contains("line 2"),
                             std::runtime_error);
    }
    SUBCASE("pair count must match the header") {
        TempFile f("miscount.jsonl");
        std::ofstream(f.path)
            << R"({"format":"dpolab.prefs","version":1,"iteration":1,"seed":1,"reward":{"name":"gold","params":{}},"stats":{"prompts_in":2,"pairs_kept":2,"ties_discarded":0,"identical_discarded":0,"mean_sampled_reward":0.5}})"
            << "\n"
            << R"({"prompt":[1],"chosen":[1,12],"rejected":[2,12],"chosen_reward":1.0,"rejected_reward":0.0,"generator":"policy"})"
            << "\n";
        CHECK_THROWS_WITH_AS(load_dataset(f.path, vocab), doctest::Contains("claims 2"),
                             std::runtime_error);
    }
}

TEST_CASE("prompt overlap filtering removes exactly the planted duplicates") {
    auto prompts = make_prompts(50, 3, 5, 13);
    auto eval_prompts = make_prompts(20, 3, 5, 14);

    std::int64_t removed = -1;
    SUBCASE("disjoint sets lose nothing") {
        // Distinct seeds can still collide by chance; build a truly disjoint set.
        std::vector<std::vector<int>> disjoint;
        for (const auto& p : prompts) {
            if (std::find(eval_prompts.begin(), eval_prompts.end(), p) == eval_prompts.end()) {
                disjoint.push_back(p);
            }
        }
        auto kept = filter_prompt_overlap(disjoint, eval_prompts, &removed);
        CHECK(removed == 0);
        CHECK(kept == disjoint);
    }
    SUBCASE("planted duplicates are all removed") {
        auto mixed = prompts;
        for (int i = 0; i < 7; ++i) mixed.push_back(eval_prompts[static_cast<std::size_t>(i)]);
        // Plant them in the middle too, not just the tail.
        mixed.insert(mixed.begin() + 5, eval_prompts[3]);
        std::int64_t baseline = -1;
        auto pre = filter_prompt_overlap(prompts, eval_prompts, &baseline);
        auto kept = filter_prompt_overlap(mixed, eval_prompts, &removed);
        CHECK(removed == baseline + 8);
        CHECK(kept == pre);
    }
    SUBCASE("filtering a set against itself removes everything") {
        auto kept = filter_prompt_overlap(eval_prompts, eval_prompts, &removed);
        CHECK(removed == 20);
        CHECK(kept.empty());
    }
}

TEST_CASE("seed datasets are validated record by record") {
    auto vocab = Vocabulary::digits();
    GoldTaskReward reward(vocab);

    SUBCASE("well-formed records are re-scored and tagged external") {
        TempFile f("seed_ok.jsonl");
        std::ofstream(f.path)
            << R"({"prompt":[3,1],"chosen":[1,3,12],"rejected":[9,9]})" << "\n"
            << R"({"prompt":[5],"chosen":[5,12],"rejected":[5,4,4,4]})" << "\n";
        std::vector<std::string> issues;
        auto ds = load_seed_dataset(f.path, vocab, reward, &issues);
        CHECK(issues.empty());
        REQUIRE(ds.pairs.size() == 2);
        CHECK(ds.pairs[0].generator == "external");
        CHECK(ds.pairs[0].chosen_reward == 1.0);
        CHECK(ds.pairs[0].rejected_reward == 0.0);
        CHECK(ds.pairs[1].chosen_reward == 1.0);
        CHECK(ds.pairs[1].rejected_reward == 0.5);
        CHECK(ds.pairs[1].rejected.truncated);
        CHECK(ds.stats.pairs_kept == 2);
    }
    SUBCASE("bad records are skipped with line-numbered reasons") {
        TempFile f("seed_mixed.jsonl");
        std::ofstream(f.path)
            << R"({"prompt":[3,1],"chosen":[1,3,12],"rejected":[9,9]})" << "\n"        // ok
            << R"({"prompt":[2,2],"chosen":[2,2,12],"rejected":[2,2,12]})" << "\n"      // identical
            << R"({"prompt":[4],"chosen":[9,12],"rejected":[8,12]})" << "\n"            // tie (both 0)
            << R"({"prompt":[6],"chosen":[9,12],"rejected":[6,12]})" << "\n"            // wrong order
            << R"({"prompt":[7],"chosen":[12,7],"rejected":[7,12]})" << "\n"            // eos inside
            << R"({"prompt":[1],"chosen":[1,12],"rejected":[2,12]})" << "\n"            // ok
            << R"({"prompt":[8],"chosen":[8,12],"rejected":[3,12]})" << "\n"            // ok
            << R"({"prompt":[2],"chosen":[2,12],"rejected":[0,12]})" << "\n";           // ok
        std::vector<std::string> issues;
        auto ds = load_seed_dataset(f.path, vocab, reward, &issues);
        CHECK(ds.pairs.size() == 4);
        REQUIRE(issues.size() == 4);
        CHECK(issues[0].find("line 2") != std::string::npos);
        CHECK(issues[0].find("identical") != std::string::npos);
        CHECK(issues[1].find("line 3") != std::string::npos);
        CHECK(issues[1].find("tie under the configured reward") != std::string::npos);
        CHECK(issues[2].find("line 4") != std::string::npos);
        CHECK(issues[2].find("disagrees") != std::string::npos);
        CHECK(issues[3].find("line 5") != std::string::npos);
        CHECK(issues[3].find("after <eos>") != std::string::npos);
    }
    SUBCASE("a mostly-bad file is refused outright") {
        TempFile f("seed_bad.jsonl");
        std::ofstream(f.path)
            << R"({"prompt":[3,1],"chosen":[1,3,12],"rejected":[9,9]})" << "\n"
            << R"({"prompt":[2,2],"chosen":[2,2,12],"rejected":[2,2,12]})" << "\n"
            << "not json at all\n";
        std::vector<std::string> issues;
        CHECK_THROWS_WITH_AS(load_seed_dataset(f.path, vocab, reward, &issues),
                             doctest::Contains("rejected 2 of 3"), std::runtime_error);
    }
    SUBCASE("an empty file is an error") {
        TempFile f("seed_empty.jsonl");
        std::ofstream(f.path) << "";
        CHECK_THROWS_AS(load_seed_dataset(f.path, vocab, reward, nullptr), std::runtime_error);
    }
}
