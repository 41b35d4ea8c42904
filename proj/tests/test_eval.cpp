#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "dpolab/decode.hpp"
#include "dpolab/eval.hpp"
#include "dpolab/model.hpp"
#include "dpolab/reward.hpp"
#include "dpolab/rng.hpp"
#include "dpolab/task.hpp"
#include "dpolab/util.hpp"
#include "ref_forward.hpp"
#include "test_helpers.hpp"

using namespace dpolab;

namespace {

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& name) : path("dpolab_test_" + name) {}
    ~TempFile() { std::remove(path.c_str()); }
};

Checkpoint small_ckpt(std::uint64_t seed) {
    ModelConfig cfg;
    cfg.d_model = 16;
    cfg.context = 64;
    return Checkpoint::init(cfg, Vocabulary::digits(), seed);
}

MatchRecord record(Outcome o, int model_len, int baseline_len) {
    MatchRecord r;
    r.outcome = o;
    r.model_response.tokens.assign(static_cast<std::size_t>(model_len), 0);
    r.baseline_response.tokens.assign(static_cast<std::size_t>(baseline_len), 0);
    return r;
}

double sigma(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST_CASE("decode modes parse and print") {
    CHECK(DecodeMode::parse("sample").kind == DecodeMode::kSample);
    CHECK(DecodeMode::parse("greedy").kind == DecodeMode::kGreedy);
    auto beam = DecodeMode::parse("beam4");
    CHECK(beam.kind == DecodeMode::kBeam);
    CHECK(beam.n == 4);
    auto bo = DecodeMode::parse("bo64");
    CHECK(bo.kind == DecodeMode::kBestOfN);
    CHECK(bo.n == 64);
    CHECK(DecodeMode::parse("beam4").to_string() == "beam4");
    CHECK(DecodeMode::parse("bo8").to_string() == "bo8");
    CHECK(DecodeMode::parse("sample").to_string() == "sample");
    CHECK_THROWS_AS(DecodeMode::parse("turbo"), std::invalid_argument);
    CHECK_THROWS_AS(DecodeMode::parse("beam"), std::invalid_argument);
    CHECK_THROWS_AS(DecodeMode::parse("beamx"), std::invalid_argument);
    CHECK_THROWS_AS(DecodeMode::parse("bo0"), std::invalid_argument);
    CHECK_THROWS_AS(DecodeMode::parse(""), std::invalid_argument);
}

TEST_CASE("a model playing itself in sample mode ties every prompt") {
    Checkpoint ckpt = small_ckpt(3);
    auto prompts = make_prompts(40, 3, 5, 17);
    GoldTaskReward gold(ckpt.vocab);
    EvalOptions opts;
    opts.max_new_tokens = 16;

    auto res = head_to_head(ckpt, ckpt, prompts, gold, DecodeMode::parse("sample"), 99, opts);
    CHECK(res.win_rate == 0.5);
    CHECK(res.mean_model_len == res.mean_baseline_len);
    for (const auto& r : res.records) {
        CHECK(r.outcome == Outcome::kTie);
        CHECK(r.model_response == r.baseline_response);
    }
    // Identical lengths everywhere: the length fit is degenerate, so the
    // LC-simple rate falls back to the raw 0.5.
    auto fit = lc_win_rate(res.records);
    CHECK_FALSE(fit.available);
    CHECK(fit.lc_win_rate == 0.5);
}

TEST_CASE("a dominant model wins every prompt") {
    // Model: greedy argmax digit 4 forever (never EOS). Baseline: immediate
    // EOS, scoring zero. Prompts end in 4, so the model's first token matches
    // the target and scores > 0 on every prompt.
    std::vector<double> model_logits(13, 0.0);
    model_logits[4] = 5.0;
    auto model = testutil::constant_logits_ckpt(model_logits);
    std::vector<double> base_logits(13, 0.0);
    base_logits[12] = 1e9;
    auto baseline = testutil::constant_logits_ckpt(base_logits);

    std::vector<std::vector<int>> prompts{{1, 4}, {2, 4}, {9, 4}, {0, 4}, {7, 4}};
    GoldTaskReward gold(model.vocab);
    EvalOptions opts;
    opts.max_new_tokens = 8;
    auto res = head_to_head(model, baseline, prompts, gold, DecodeMode::parse("greedy"), 1, opts);
    CHECK(res.win_rate == 1.0);
    for (const auto& r : res.records) {
        CHECK(r.outcome == Outcome::kWin);
        CHECK(r.model_score > 0.0);
        CHECK(r.baseline_score == 0.0);
    }
    CHECK(res.mean_model_len == 8.0);
    CHECK(res.mean_baseline_len == 1.0);
}

TEST_CASE("head-to-head results are identical for any worker count") {
    Checkpoint model = small_ckpt(5);
    Checkpoint baseline = small_ckpt(6);
    auto prompts = make_prompts(30, 3, 5, 23);
    GoldTaskReward gold(model.vocab);
    EvalOptions serial;
    serial.max_new_tokens = 12;
    EvalOptions parallel = serial;
    parallel.jobs = 4;

    auto a = head_to_head(model, baseline, prompts, gold, DecodeMode::parse("sample"), 7, serial);
    auto b = head_to_head(model, baseline, prompts, gold, DecodeMode::parse("sample"), 7, parallel);
    CHECK(a.win_rate == b.win_rate);
    REQUIRE(a.records.size() == b.records.size());
    for (std::size_t i = 0; i < a.records.size(); ++i) {
        CHECK(a.records[i].model_response == b.records[i].model_response);
        CHECK(a.records[i].baseline_response == b.records[i].baseline_response);
    }
}

TEST_CASE("raw win rate is the exact hand tally when the length fit degenerates") {
    // 12 wins, 2 ties, 6 losses with a constant length gap: (12 + 1) / 20.
    std::vector<MatchRecord> records;
    for (int i = 0; i < 12; ++i) records.push_back(record(Outcome::kWin, 4, 4));
    for (int i = 0; i < 2; ++i) records.push_back(record(Outcome::kTie, 4, 4));
    for (int i = 0; i < 6; ++i) records.push_back(record(Outcome::kLoss, 4, 4));
    auto fit = lc_win_rate(records);
    CHECK_FALSE(fit.available);
    CHECK(fit.lc_win_rate == doctest::Approx(0.65).epsilon(1e-15));

    // Under ten records never fits, whatever the lengths.
    std::vector<MatchRecord> few;
    for (int i = 0; i < 5; ++i) few.push_back(record(Outcome::kWin, 3 + i, 4));
    for (int i = 0; i < 2; ++i) few.push_back(record(Outcome::kLoss, 9, 4));
    auto small_fit = lc_win_rate(few);
    CHECK_FALSE(small_fit.available);
    CHECK(small_fit.lc_win_rate == doctest::Approx(5.0 / 7.0).epsilon(1e-15));
}

TEST_CASE("LC-simple recovers a planted logistic length bias") {
    // P(win) = sigma(0.4 + 0.8 * dl) with dl ~ unit-variance integers.
    Rng rng(1234);
    std::vector<MatchRecord> records;
    std::vector<int> gaps{-2, -1, 0, 1, 2};
    for (int i = 0; i < 500; ++i) {
        int dl = gaps[static_cast<std::size_t>(rng.uniform_int(gaps.size()))];
        double p = sigma(0.4 + 0.8 * static_cast<double>(dl));
        Outcome o = rng.uniform() < p ? Outcome::kWin : Outcome::kLoss;
        records.push_back(record(o, 6 + dl, 6));
    }
    auto fit = lc_win_rate(records);
    REQUIRE(fit.available);
    CHECK(std::fabs(fit.lc_win_rate - sigma(0.4)) <= 0.03);
    CHECK(fit.b1 > 0.0);

    // Scale invariance: stretching every length gap by 3 gives the same
    // debiased rate (the fit normalizes the gap variance away).
    std::vector<MatchRecord> stretched = records;
    for (auto& r : stretched) {
        int dl = r.model_len() - r.baseline_len();
        r.model_response.tokens.assign(static_cast<std::size_t>(6 + 3 * dl + 6), 0);
        r.baseline_response.tokens.assign(12, 0);
    }
    auto fit3 = lc_win_rate(stretched);
    REQUIRE(fit3.available);
    CHECK(fit3.lc_win_rate == doctest::Approx(fit.lc_win_rate).epsilon(1e-6));

    // Labels independent of length: slope near zero and LC near the raw rate.
    std::vector<MatchRecord> flat;
    double credit = 0.0;
    for (int i = 0; i < 400; ++i) {
        int dl = gaps[static_cast<std::size_t>(rng.uniform_int(gaps.size()))];
        Outcome o = rng.uniform() < 0.7 ? Outcome::kWin : Outcome::kLoss;
        credit += o == Outcome::kWin ? 1.0 : 0.0;
        flat.push_back(record(o, 6 + dl, 6));
    }
    auto flat_fit = lc_win_rate(flat);
    REQUIRE(flat_fit.available);
    CHECK(std::fabs(flat_fit.b1) < 0.2);
    CHECK(std::fabs(flat_fit.lc_win_rate - credit / 400.0) < 0.05);
}

TEST_CASE("best-of-n selection matches an explicit replay of its draws") {
    Checkpoint ckpt = small_ckpt(11);
    GoldTaskReward gold(ckpt.vocab);
    const std::vector<int> prompt{4, 2, 0};
    const std::uint64_t seed = 31337;

    // n = 1 is exactly one sample from the first derived seed.
    Response one = best_of_n(ckpt, prompt, gold, 1, 12, seed);
    CHECK(one == sample_response(ckpt, prompt, 1.0, 12, derive_seed(seed, 0)));

    for (int n : {2, 8, 16}) {
        Response picked = best_of_n(ckpt, prompt, gold, n, 12, seed);
        Response expect;
        double best = -1.0;
        for (int j = 0; j < n; ++j) {
            Response r = sample_response(ckpt, prompt, 1.0, 12, derive_seed(seed, j));
            double s = gold.score(prompt, r);
            if (s > best) {
                best = s;
                expect = r;
            }
        }
        CAPTURE(n);
        CHECK(picked == expect);
        CHECK(gold.score(prompt, picked) == best);
    }

    // The selected score never drops as n grows (draws are nested).
    double prev = -1.0;
    for (int n : {1, 2, 4, 8, 16, 32}) {
        double s = gold.score(prompt, best_of_n(ckpt, prompt, gold, n, 12, seed));
        CHECK(s >= prev);
        prev = s;
    }

    CHECK_THROWS_AS(best_of_n(ckpt, prompt, gold, 0, 12, seed), std::invalid_argument);
}

TEST_CASE("perplexity of the uniform model is the vocabulary size") {
    auto ckpt = testutil::uniform_ckpt();
    auto prompts = make_prompts(10, 3, 5, 3);
    auto corpus = make_corpus(prompts, ckpt.vocab);
    CHECK(heldout_perplexity(ckpt, corpus) == doctest::Approx(13.0).epsilon(1e-12));
}

TEST_CASE("perplexity matches a hand computation on a planted distribution") {
    std::vector<double> logits(13, 0.0);
    logits[3] = 1.0;
    logits[7] = 2.0;
    logits[12] = 0.5;
    auto ckpt = testutil::constant_logits_ckpt(logits);
    // Sequence [BOS, 3, 7]: two predictions with log-probs (1 - ln Z), (2 - ln Z).
    const double z = 21.756059198089822;  // 10 + e + e^2 + e^0.5
    std::vector<std::vector<int>> corpus{{10, 3, 7}};
    double expect = z * std::exp(-1.5);  // exp(ln Z - (1 + 2)/2)
    CHECK(heldout_perplexity(ckpt, corpus) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("perplexity agrees with the clean-room forward pass") {
    Checkpoint ckpt = small_ckpt(13);
    auto prompts = make_prompts(6, 3, 5, 29);
    auto corpus = make_corpus(prompts, ckpt.vocab);

    double total_nll = 0.0;
    std::int64_t total = 0;
    for (const auto& seq : corpus) {
        auto lp = refmodel::forward_logprobs(ckpt, seq);
        for (std::size_t i = 1; i < seq.size(); ++i) {
            total_nll -= lp[i - 1][static_cast<std::size_t>(seq[i])];
            ++total;
        }
    }
    double expect = std::exp(total_nll / static_cast<double>(total));
    CHECK(heldout_perplexity(ckpt, corpus) == doctest::Approx(expect).epsilon(1e-9));
}

TEST_CASE("a memorizing model drives held-out perplexity toward one") {
    ModelConfig cfg;
    cfg.d_model = 16;
    cfg.context = 32;
    auto vocab = Vocabulary::digits();
    std::vector<std::vector<int>> corpus{full_sequence({3, 1, 4}, {4, 1, 3, 12}, vocab)};
    PretrainOptions opt;
    opt.steps = 150;
    opt.batch = 1;
    opt.lr = 3e-3;
    opt.seed = 5;
    auto res = pretrain(corpus, cfg, vocab, opt);
    double ppl = heldout_perplexity(res.ckpt, corpus);
    CHECK(ppl >= 1.0);
    CHECK(ppl < 1.5);
    // And far below the untrained model on the same sequence.
    double ppl0 = heldout_perplexity(Checkpoint::init(cfg, vocab, 5), corpus);
    CHECK(ppl0 > 5.0);
    CHECK(ppl < ppl0);
}

TEST_CASE("perplexity rejects unusable corpora") {
    auto ckpt = testutil::uniform_ckpt();
    CHECK_THROWS_AS(heldout_perplexity(ckpt, {}), std::invalid_argument);
    CHECK_THROWS_AS(heldout_perplexity(ckpt, {{10}}), std::invalid_argument);
    std::vector<int> too_long(static_cast<std::size_t>(ckpt.config.context) + 1, 1);
    CHECK_THROWS_AS(heldout_perplexity(ckpt, {too_long}), std::invalid_argument);
}

TEST_CASE("report files are byte-stable with a pinned CSV schema") {
    IterationReport row;
    row.iteration = 1;
    row.mode = "sample";
    row.win_rate = 0.65;
    row.lc_win_rate = 0.6;
    row.lc_available = true;
    row.mean_len = 4.5;
    row.gold_reward = 0.8;
    row.proxy_reward = 0.9;
    row.perplexity = 2.5;
    row.n = 200;
    row.seed = 7;

    TempFile csv("report.csv"), md("report.md");
    emit_report({row}, csv.path, md.path);
    CHECK(read_file(csv.path) ==
          "iteration,mode,win_rate,lc_win_rate,mean_len,gold_reward,proxy_reward,perplexity,n,seed\n"
          "1,sample,0.650000,0.600000,4.500000,0.800000,0.900000,2.500000,200,7\n");
    std::string md_text = read_file(md.path);
    CHECK(md_text.find("| 1 | sample | 0.650 | 0.600 | 4.50 | 0.800 | 0.900 | 2.500 |") !=
          std::string::npos);
    CHECK(md_text.find("0.600 (raw)") == std::string::npos);
    CHECK(md_text.find("length-controlled") != std::string::npos);

    // Same inputs, same bytes.
    TempFile csv2("report2.csv"), md2("report2.md");
    emit_report({row}, csv2.path, md2.path);
    CHECK(read_file(csv.path) == read_file(csv2.path));
    CHECK(read_file(md.path) == read_file(md2.path));

    // Unavailable LC fits are marked (raw).
    IterationReport raw_row = row;
    raw_row.lc_available = false;
    emit_report({raw_row}, csv2.path, md2.path);
    CHECK(read_file(md2.path).find("0.600 (raw)") != std::string::npos);
}

TEST_CASE("the length-inflation flag fires at 1.5x the first iteration") {
    auto row = [](int it, const std::string& mode, double mean_len) {
        IterationReport r;
        r.iteration = it;
        r.mode = mode;
        r.win_rate = 0.5;
        r.lc_win_rate = 0.5;
        r.mean_len = mean_len;
        r.perplexity = 2.0;
        r.n = 100;
        return r;
    };

    TempFile csv("flag.csv"), md("flag.md");
    emit_report({row(1, "sample", 12.0), row(2, "sample", 13.0), row(3, "sample", 12.5)}, csv.path,
                md.path);
    CHECK(read_file(md.path).find("length-controlled") != std::string::npos);

    emit_report({row(1, "sample", 12.0), row(2, "sample", 25.0), row(3, "sample", 40.0)}, csv.path,
                md.path);
    CHECK(read_file(md.path).find("length-inflating") != std::string::npos);

    // Rows in other decode modes never trip the flag for the lead mode.
    emit_report({row(1, "sample", 12.0), row(1, "beam4", 30.0), row(2, "sample", 13.0)}, csv.path,
                md.path);
    CHECK(read_file(md.path).find("length-controlled") != std::string::npos);
}

TEST_CASE("iteration reports validate their ranges") {
    IterationReport r;
    r.mode = "sample";
    r.win_rate = 0.5;
    r.lc_win_rate = 0.5;
    r.perplexity = 2.0;
    r.n = 10;
    CHECK_NOTHROW(r.validate());
    IterationReport bad = r;
    bad.win_rate = 1.2;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = r;
    bad.lc_win_rate = -0.1;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = r;
    bad.n = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = r;
    bad.perplexity = 0.99;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}
