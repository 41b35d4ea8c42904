#include "dpolab/decode.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "dpolab/rng.hpp"
#include "dpolab/task.hpp"

namespace dpolab {

namespace {

void layer_norm_vec(const std::vector<double>& x, const TensorPtr& gain, const TensorPtr& bias,
                    std::vector<double>& out) {
    const std::size_t n = x.size();
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + 1e-5);
    out.resize(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = gain->data[i] * ((x[i] - mean) * inv) + bias->data[i];
}

// y = x * W + b with W stored [in, out]
void linear_vec(const std::vector<double>& x, const TensorPtr& w, const TensorPtr& b,
                std::vector<double>& out) {
    const std::int64_t in = w->rows(), on = w->cols();
    out.assign(static_cast<std::size_t>(on), 0.0);
    const double* W = w->data.data();
    for (std::int64_t k = 0; k < in; ++k) {
        const double xv = x[static_cast<std::size_t>(k)];
        const double* Wr = W + k * on;
        for (std::int64_t j = 0; j < on; ++j) out[static_cast<std::size_t>(j)] += xv * Wr[j];
    }
    if (b) {
        for (std::int64_t j = 0; j < on; ++j) out[static_cast<std::size_t>(j)] += b->data[static_cast<std::size_t>(j)];
    }
}

double gelu_scalar(double x) {
    constexpr double c = 0.7978845608028654;
    constexpr double a = 0.044715;
    return 0.5 * x * (1.0 + std::tanh(c * (x + a * x * x * x)));
}

void validate_prompt(const Checkpoint& ckpt, const std::vector<int>& prompt, int cap) {
    for (int id : prompt) {
        if (!ckpt.vocab.valid_id(id)) {
            throw std::invalid_argument("decode: prompt token " + std::to_string(id) +
                                        " outside vocabulary of size " + std::to_string(ckpt.vocab.size()));
        }
    }
    if (cap < 1) throw std::invalid_argument("decode: generation cap must be >= 1, got " + std::to_string(cap));
    const int frame = static_cast<int>(prompt.size()) + 2;
    if (frame + cap > ckpt.config.context) {
        throw std::invalid_argument("decode: prompt frame " + std::to_string(frame) + " + cap " +
                                    std::to_string(cap) + " exceeds context " +
                                    std::to_string(ckpt.config.context));
    }
}

}  // namespace

InferenceModel::InferenceModel(const Checkpoint& ckpt) : ckpt_(&ckpt) { ckpt.config.validate(); }

DecodeState InferenceModel::new_state() const {
    DecodeState st;
    st.k_cache.assign(static_cast<std::size_t>(ckpt_->config.n_layers), {});
    st.v_cache.assign(static_cast<std::size_t>(ckpt_->config.n_layers), {});
    return st;
}

std::vector<double> InferenceModel::step(DecodeState& state, int token) const {
    const auto& c = *ckpt_;
    const int d = c.config.d_model;
    const int nh = c.config.n_heads;
    const int dh = c.config.head_dim();
    if (!c.vocab.valid_id(token)) {
        throw std::invalid_argument("decode: token " + std::to_string(token) + " outside vocabulary");
    }
    if (state.pos >= c.config.context) {
        throw std::invalid_argument("decode: position " + std::to_string(state.pos) + " exceeds context " +
                                    std::to_string(c.config.context));
    }

    std::vector<double> x(static_cast<std::size_t>(d));
    for (int j = 0; j < d; ++j) {
        x[static_cast<std::size_t>(j)] = c.wte->at(token, j) + c.wpe->at(state.pos, j);
    }

    std::vector<double> h, q, k, v, att(static_cast<std::size_t>(d)), proj, m1;
    for (std::size_t li = 0; li < c.layers.size(); ++li) {
        const auto& l = c.layers[li];
        layer_norm_vec(x, l.ln1_gain, l.ln1_bias, h);
        linear_vec(h, l.wq, l.bq, q);
        linear_vec(h, l.wk, l.bk, k);
        linear_vec(h, l.wv, l.bv, v);
        auto& kc = state.k_cache[li];
        auto& vc = state.v_cache[li];
        kc.insert(kc.end(), k.begin(), k.end());
        vc.insert(vc.end(), v.begin(), v.end());
        const int npos = state.pos + 1;

        // attention per head over all cached positions
        std::vector<double> w(static_cast<std::size_t>(npos));
        for (int hh = 0; hh < nh; ++hh) {
            const int off = hh * dh;
            double mx = -1e300;
            for (int p = 0; p < npos; ++p) {
                double s = 0.0;
                const double* kp = kc.data() + static_cast<std::size_t>(p) * d + off;
                for (int j = 0; j < dh; ++j) s += q[static_cast<std::size_t>(off + j)] * kp[j];
                s /= std::sqrt(static_cast<double>(dh));
                w[static_cast<std::size_t>(p)] = s;
                mx = std::max(mx, s);
            }
            double Z = 0.0;
            for (int p = 0; p < npos; ++p) {
                w[static_cast<std::size_t>(p)] = std::exp(w[static_cast<std::size_t>(p)] - mx);
                Z += w[static_cast<std::size_t>(p)];
            }
            for (int j = 0; j < dh; ++j) {
                double acc = 0.0;
                for (int p = 0; p < npos; ++p) {
                    acc += w[static_cast<std::size_t>(p)] * vc[static_cast<std::size_t>(p) * d + off + j];
                }
                att[static_cast<std::size_t>(off + j)] = acc / Z;
            }
        }
        linear_vec(att, l.wo, l.bo, proj);
        for (int j = 0; j < d; ++j) x[static_cast<std::size_t>(j)] += proj[static_cast<std::size_t>(j)];

        layer_norm_vec(x, l.ln2_gain, l.ln2_bias, h);
        linear_vec(h, l.w1, l.b1, m1);
        for (auto& mv : m1) mv = gelu_scalar(mv);
        linear_vec(m1, l.w2, l.b2, proj);
        for (int j = 0; j < d; ++j) x[static_cast<std::size_t>(j)] += proj[static_cast<std::size_t>(j)];
    }
    layer_norm_vec(x, c.lnf_gain, c.lnf_bias, h);
    std::vector<double> logits;
    linear_vec(h, c.head_w, nullptr, logits);
    ++state.pos;
    return logits;
}

std::vector<double> InferenceModel::feed_prompt(DecodeState& state, const std::vector<int>& prompt) const {
    const auto frame = prompt_frame(prompt, ckpt_->vocab);
    std::vector<double> logits;
    for (int t : frame) logits = step(state, t);
    return logits;
}

std::vector<double> softmax_probs(const std::vector<double>& logits, double temperature) {
    if (temperature <= 0.0) throw std::invalid_argument("softmax_probs: temperature must be > 0");
    std::vector<double> p(logits.size());
    double mx = -1e300;
    for (double v : logits) mx = std::max(mx, v / temperature);
    double Z = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(logits[i] / temperature - mx);
        Z += p[i];
    }
    for (auto& v : p) v /= Z;
    return p;
}

Response sample_response(const Checkpoint& ckpt, const std::vector<int>& prompt, double temperature,
                         int cap, std::uint64_t seed) {
    if (temperature <= 0.0) throw std::invalid_argument("sample: temperature must be > 0");
    validate_prompt(ckpt, prompt, cap);
    InferenceModel model(ckpt);
    auto state = model.new_state();
    auto logits = model.feed_prompt(state, prompt);
    Rng rng(seed);
    Response resp;
    for (int t = 0; t < cap; ++t) {
        const auto probs = softmax_probs(logits, temperature);
        const int tok = rng.categorical(probs);
        resp.tokens.push_back(tok);
        if (tok == ckpt.vocab.eos) return resp;
        if (static_cast<int>(resp.tokens.size()) == cap) break;
        logits = model.step(state, tok);
    }
    resp.truncated = true;
    return resp;
}

Response greedy_response(const Checkpoint& ckpt, const std::vector<int>& prompt, int cap) {
    validate_prompt(ckpt, prompt, cap);
    InferenceModel model(ckpt);
    auto state = model.new_state();
    auto logits = model.feed_prompt(state, prompt);
    Response resp;
    for (int t = 0; t < cap; ++t) {
        int tok = 0;
        for (std::size_t j = 1; j < logits.size(); ++j) {
            if (logits[j] > logits[static_cast<std::size_t>(tok)]) tok = static_cast<int>(j);
        }
        resp.tokens.push_back(tok);
        if (tok == ckpt.vocab.eos) return resp;
        if (static_cast<int>(resp.tokens.size()) == cap) break;
        logits = model.step(state, tok);
    }
    resp.truncated = true;
    return resp;
}

namespace {

struct Hypothesis {
    std::vector<int> tokens;
    double cum_logprob = 0.0;
    DecodeState state;
    std::vector<double> next_logits;
};

struct Finished {
    Response resp;
    double cum_logprob;
    double norm_score() const { return cum_logprob / static_cast<double>(resp.tokens.size()); }
};

std::vector<double> log_probs_from_logits(const std::vector<double>& logits) {
    double mx = -1e300;
    for (double v : logits) mx = std::max(mx, v);
    double Z = 0.0;
    for (double v : logits) Z += std::exp(v - mx);
    const double lse = mx + std::log(Z);
    std::vector<double> lp(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) lp[i] = logits[i] - lse;
    return lp;
}

}  // namespace

Response beam_search(const Checkpoint& ckpt, const std::vector<int>& prompt, int width, int cap) {
    if (width < 1) throw std::invalid_argument("beam_search: width must be >= 1");
    validate_prompt(ckpt, prompt, cap);
    InferenceModel model(ckpt);

    std::vector<Finished> pool;
    // The greedy rollout is always a candidate, so widening the beam can only
    // improve on it.
    {
        Response g = greedy_response(ckpt, prompt, cap);
        pool.push_back({g, response_logprob(ckpt, prompt, g)});
    }
    if (width == 1) return pool.front().resp;

    Hypothesis root;
    root.state = model.new_state();
    root.next_logits = model.feed_prompt(root.state, prompt);
    std::vector<Hypothesis> beams;
    beams.push_back(std::move(root));

    for (int step = 0; step < cap && !beams.empty(); ++step) {
        struct Cand {
            std::size_t beam;
            int token;
            double cum;
        };
        std::vector<Cand> cands;
        for (std::size_t bi = 0; bi < beams.size(); ++bi) {
            const auto lp = log_probs_from_logits(beams[bi].next_logits);
            for (std::size_t tok = 0; tok < lp.size(); ++tok) {
                cands.push_back({bi, static_cast<int>(tok), beams[bi].cum_logprob + lp[tok]});
            }
        }
        // Keep the top `width` candidates by cumulative log-probability.
        // EOS (or cap-length) candidates among them retire to the pool and
        // the live beam shrinks; everything below the cut is pruned.
        std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) { return a.cum > b.cum; });
        const bool at_cap = step + 1 == cap;
        std::vector<Hypothesis> next;
        int taken = 0;
        for (const auto& cd : cands) {
            if (taken == width) break;
            ++taken;
            const bool is_eos = cd.token == ckpt.vocab.eos;
            if (is_eos || at_cap) {
                Finished f;
                f.resp.tokens = beams[cd.beam].tokens;
                f.resp.tokens.push_back(cd.token);
                f.resp.truncated = !is_eos;
                f.cum_logprob = cd.cum;
                pool.push_back(std::move(f));
            } else {
                Hypothesis h;
                h.tokens = beams[cd.beam].tokens;
                h.tokens.push_back(cd.token);
                h.cum_logprob = cd.cum;
                h.state = beams[cd.beam].state;
                h.next_logits = model.step(h.state, cd.token);
                next.push_back(std::move(h));
            }
        }
        beams = std::move(next);
    }

    // Best length-normalized hypothesis; ties resolve to the earliest found.
    std::size_t best = 0;
    for (std::size_t i = 1; i < pool.size(); ++i) {
        if (pool[i].norm_score() > pool[best].norm_score()) best = i;
    }
    return pool[best].resp;
}

double response_logprob(const Checkpoint& ckpt, const std::vector<int>& prompt, const Response& response) {
    if (response.tokens.empty()) throw std::invalid_argument("response_logprob: empty response");
    InferenceModel model(ckpt);
    auto state = model.new_state();
    auto logits = model.feed_prompt(state, prompt);
    double total = 0.0;
    for (std::size_t i = 0; i < response.tokens.size(); ++i) {
        const auto lp = log_probs_from_logits(logits);
        const int tok = response.tokens[i];
        if (!ckpt.vocab.valid_id(tok)) {
            throw std::invalid_argument("response_logprob: token " + std::to_string(tok) + " outside vocabulary");
        }
        total += lp[static_cast<std::size_t>(tok)];
        if (i + 1 < response.tokens.size()) logits = model.step(state, tok);
    }
    return total;
}

}  // namespace dpolab
