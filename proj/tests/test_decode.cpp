#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "dpolab/decode.hpp"
#include "dpolab/model.hpp"
#include "dpolab/rng.hpp"
#include "dpolab/task.hpp"
#include "ref_forward.hpp"
#include "test_helpers.hpp"

using namespace dpolab;

namespace {

Checkpoint small_random_ckpt(std::uint64_t seed) {
    ModelConfig cfg;
    cfg.d_model = 16;
    cfg.context = 32;
    return Checkpoint::init(cfg, Vocabulary::digits(), seed);
}

}  // namespace

TEST_CASE("incremental KV path reproduces the tape logits at every position") {
    Checkpoint ckpt = small_random_ckpt(41);
    std::vector<int> tokens{10, 4, 2, 9, 11, 9, 2, 4};
    auto graph_logits = logits_graph(ckpt, tokens);

    InferenceModel model(ckpt);
    DecodeState state = model.new_state();
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        std::vector<double> step_logits = model.step(state, tokens[t]);
        for (int c = 0; c < 13; ++c) {
            CHECK(step_logits[static_cast<std::size_t>(c)] ==
                  doctest::Approx(graph_logits->at(static_cast<std::int64_t>(t), c)).epsilon(1e-9));
        }
    }
}

TEST_CASE("next-token probabilities sum to one at every step and temperature") {
    Checkpoint ckpt = small_random_ckpt(43);
    InferenceModel model(ckpt);
    DecodeState state = model.new_state();
    std::vector<double> logits = model.feed_prompt(state, {1, 2, 3});
    for (double temp : {0.25, 1.0, 4.0}) {
        std::vector<double> probs = softmax_probs(logits, temp);
        double sum = 0.0;
        for (double p : probs) sum += p;
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("uniform model scores every k-token response at -k ln 13") {
    Checkpoint ckpt = testutil::uniform_ckpt();
    Response resp;
    resp.tokens = {3, 7, 12};
    CHECK(sequence_logprob(ckpt, {1, 2}, resp) ==
          doctest::Approx(-7.694848072384611).epsilon(1e-12));
    CHECK(response_logprob(ckpt, {1, 2}, resp) ==
          doctest::Approx(-7.694848072384611).epsilon(1e-9));
}

TEST_CASE("hand-set constant logits give the hand-computed sequence log-prob") {
    // logits: 0 everywhere except index 3 -> 1, index 7 -> 2, index 12 -> 0.5
    std::vector<double> logits(13, 0.0);
    logits[3] = 1.0;
    logits[7] = 2.0;
    logits[12] = 0.5;
    Checkpoint ckpt = testutil::constant_logits_ckpt(logits);
    Response resp;
    resp.tokens = {3, 7, 12};
    // log p = log(e^1/Z) + log(e^2/Z) + log(e^0.5/Z), Z = 10 + e + e^2 + e^0.5
    CHECK(sequence_logprob(ckpt, {5}, resp) ==
          doctest::Approx(-5.739676907672944).epsilon(1e-11));
    CHECK(sequence_logprob(ckpt, {5}, resp) < 0.0);
}

TEST_CASE("sampling is seed-deterministic and near-greedy at tiny temperature") {
    Checkpoint ckpt = small_random_ckpt(47);
    Response a = sample_response(ckpt, {1, 2, 3}, 1.0, 16, 99);
    Response b = sample_response(ckpt, {1, 2, 3}, 1.0, 16, 99);
    CHECK(a == b);
    Response c = sample_response(ckpt, {1, 2, 3}, 1.0, 16, 100);  // other seed, other stream
    // (not necessarily different, but the cold path must not crash)

    Response cold = sample_response(ckpt, {1, 2, 3}, 1e-9, 16, 5);
    Response greedy = greedy_response(ckpt, {1, 2, 3}, 16);
    CHECK(cold.tokens == greedy.tokens);
    (void)c;
}

TEST_CASE("sampled token frequencies match the planted distribution within 3 sigma") {
    std::vector<double> logits(13, 0.0);
    logits[3] = 1.0;
    logits[7] = 2.0;
    logits[12] = 0.5;
    Checkpoint ckpt = testutil::constant_logits_ckpt(logits);

    // First generated token across 100k seeds; every draw uses its own seed,
    // mirroring how collection derives per-sample seeds.
    const int n = 100000;
    std::map<int, int> counts;
    for (int i = 0; i < n; ++i) {
        Response r = sample_response(ckpt, {1}, 1.0, 1, derive_seed(424242, i));
        ++counts[r.tokens.at(0)];
    }
    const double z = 21.756059198089822;  // 10 + e + e^2 + e^0.5
    for (int tok : {0, 3, 7, 12}) {
        double p = std::exp(logits[static_cast<std::size_t>(tok)]) / z;
        double sigma = std::sqrt(p * (1 - p) / n);
        double freq = static_cast<double>(counts[tok]) / n;
        CAPTURE(tok);
        CHECK(std::fabs(freq - p) <= 3.0 * sigma);
    }
}

TEST_CASE("responses respect the cap and flag truncation") {
    // EOS never sampled: give it a huge negative logit.
    std::vector<double> logits(13, 0.0);
    logits[12] = -1e9;
    Checkpoint ckpt = testutil::constant_logits_ckpt(logits);
    Response r = sample_response(ckpt, {1, 2}, 1.0, 7, 3);
    CHECK(r.length() == 7);
    CHECK(r.truncated);
    // EOS always: immediate stop.
    std::vector<double> eos_logits(13, 0.0);
    eos_logits[12] = 1e9;
    Checkpoint eos_ckpt = testutil::constant_logits_ckpt(eos_logits);
    Response stop = sample_response(eos_ckpt, {1, 2}, 1.0, 7, 3);
    CHECK(stop.tokens == std::vector<int>{12});
    CHECK_FALSE(stop.truncated);
    CHECK_THROWS_AS(sample_response(ckpt, {1, 2}, 1.0, 0, 3), std::invalid_argument);
}

TEST_CASE("beam width one is exactly greedy") {
    for (std::uint64_t seed : {3u, 11u, 29u}) {
        Checkpoint ckpt = small_random_ckpt(seed);
        Response beam = beam_search(ckpt, {4, 5, 6}, 1, 12);
        Response greedy = greedy_response(ckpt, {4, 5, 6}, 12);
        CHECK(beam.tokens == greedy.tokens);
        CHECK(beam.truncated == greedy.truncated);
    }
}

TEST_CASE("a wide-enough beam equals exhaustive search over the whole tree") {
    Checkpoint ckpt = small_random_ckpt(53);
    const std::vector<int> prompt{2, 8};
    const int cap = 3;

    // Enumerate every finished hypothesis: EOS-terminated sequences of length
    // <= cap and truncated sequences of exactly cap tokens.
    std::vector<std::vector<int>> finished;
    std::vector<std::vector<int>> frontier{{}};
    for (int depth = 0; depth < cap; ++depth) {
        std::vector<std::vector<int>> next;
        for (const auto& seq : frontier) {
            for (int tok = 0; tok < 13; ++tok) {
                auto ext = seq;
                ext.push_back(tok);
                if (tok == 12 || static_cast<int>(ext.size()) == cap) {
                    finished.push_back(ext);
                } else {
                    next.push_back(ext);
                }
            }
        }
        frontier = std::move(next);
    }

    double best_score = -1e300;
    std::vector<int> best_seq;
    for (const auto& seq : finished) {
        Response r;
        r.tokens = seq;
        r.truncated = seq.back() != 12;
        double score = response_logprob(ckpt, prompt, r) / static_cast<double>(seq.size());
        if (score > best_score) {
            best_score = score;
            best_seq = seq;
        }
    }

    Response beam = beam_search(ckpt, prompt, 2000, cap);
    double beam_score =
        response_logprob(ckpt, prompt, beam) / static_cast<double>(beam.length());
    CHECK(beam.tokens == best_seq);
    CHECK(beam_score == doctest::Approx(best_score).epsilon(1e-12));
}

TEST_CASE("widening the beam never lowers the normalized score") {
    for (std::uint64_t seed : {7u, 13u, 61u}) {
        Checkpoint ckpt = small_random_ckpt(seed);
        double prev = -1e300;
        for (int width : {1, 2, 4, 8, 16}) {
            Response r = beam_search(ckpt, {9, 0, 1}, width, 8);
            double score = response_logprob(ckpt, {9, 0, 1}, r) / r.length();
            CAPTURE(seed);
            CAPTURE(width);
            CHECK(score >= prev - 1e-12);
            prev = score;
        }
    }
}

TEST_CASE("generation caps that overflow the context are rejected") {
    Checkpoint ckpt = small_random_ckpt(67);  // context 32
    std::vector<int> prompt(20, 1);
    // frame is 22 tokens; cap 10 would need 32 -- fine; cap 11 overflows
    CHECK_NOTHROW(greedy_response(ckpt, prompt, 10));
    CHECK_THROWS_AS(greedy_response(ckpt, prompt, 11), std::invalid_argument);
}
