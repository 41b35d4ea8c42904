#include "dpolab/eval.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "dpolab/decode.hpp"
#include "dpolab/rng.hpp"
#include "dpolab/util.hpp"

namespace dpolab {

DecodeMode DecodeMode::parse(const std::string& text) {
    DecodeMode m;
    auto tail_int = [&](std::size_t prefix_len) {
        int v = 0;
        try {
            std::size_t used = 0;
            v = std::stoi(text.substr(prefix_len), &used);
            if (used != text.size() - prefix_len) v = 0;
        } catch (const std::exception&) {
            v = 0;
        }
        return v;
    };
    if (text == "sample") {
        m.kind = kSample;
        m.n = 1;
    } else if (text == "greedy") {
        m.kind = kGreedy;
        m.n = 1;
    } else if (text.rfind("beam", 0) == 0) {
        m.kind = kBeam;
        m.n = tail_int(4);
    } else if (text.rfind("bo", 0) == 0) {
        m.kind = kBestOfN;
        m.n = tail_int(2);
    } else {
        throw std::invalid_argument("unknown decode mode '" + text +
                                    "' (expected sample, greedy, beamK, or boN)");
    }
    if (m.kind == kBeam || m.kind == kBestOfN) {
        if (m.n < 1) throw std::invalid_argument("decode mode '" + text + "' needs a count >= 1");
    }
    return m;
}

std::string DecodeMode::to_string() const {
    switch (kind) {
        case kSample: return "sample";
        case kGreedy: return "greedy";
        case kBeam: return "beam" + std::to_string(n);
        case kBestOfN: return "bo" + std::to_string(n);
    }
    return "sample";
}

double MatchRecord::credit() const {
    switch (outcome) {
        case Outcome::kWin: return 1.0;
        case Outcome::kTie: return 0.5;
        case Outcome::kLoss: return 0.0;
    }
    return 0.5;
}

HeadToHeadResult head_to_head(const Checkpoint& model, const Checkpoint& baseline,
                              const std::vector<std::vector<int>>& prompts,
                              const RewardModel& gold, const DecodeMode& mode,
                              std::uint64_t seed, const EvalOptions& opts) {
    if (prompts.empty()) throw std::invalid_argument("head_to_head: no prompts");
    if (!(opts.temperature > 0.0)) throw std::invalid_argument("head_to_head: temperature must be > 0");

    HeadToHeadResult out;
    out.records.resize(prompts.size());
    parallel_for(static_cast<std::int64_t>(prompts.size()), opts.jobs, [&](std::int64_t i) {
        const std::vector<int>& prompt = prompts[static_cast<std::size_t>(i)];
        std::uint64_t prompt_seed = derive_seed(seed, static_cast<std::uint64_t>(i));
        MatchRecord& rec = out.records[static_cast<std::size_t>(i)];
        rec.prompt = prompt;
        switch (mode.kind) {
            case DecodeMode::kSample:
                rec.model_response = sample_response(model, prompt, opts.temperature,
                                                     opts.max_new_tokens, prompt_seed);
                break;
            case DecodeMode::kGreedy:
                rec.model_response = greedy_response(model, prompt, opts.max_new_tokens);
                break;
            case DecodeMode::kBeam:
                rec.model_response = beam_search(model, prompt, mode.n, opts.max_new_tokens);
                break;
            case DecodeMode::kBestOfN:
                rec.model_response = best_of_n(model, prompt, gold, mode.n, opts.max_new_tokens,
                                               prompt_seed);
                break;
        }
        rec.baseline_response =
            sample_response(baseline, prompt, opts.temperature, opts.max_new_tokens, prompt_seed);
        rec.model_score = gold.score(prompt, rec.model_response);
        rec.baseline_score = gold.score(prompt, rec.baseline_response);
        rec.outcome = rec.model_score > rec.baseline_score   ? Outcome::kWin
                      : rec.model_score < rec.baseline_score ? Outcome::kLoss
                                                             : Outcome::kTie;
    });

    double credit = 0.0, len_m = 0.0, len_b = 0.0;
    for (const MatchRecord& r : out.records) {
        credit += r.credit();
        len_m += r.model_len();
        len_b += r.baseline_len();
    }
    double n = static_cast<double>(out.records.size());
    out.win_rate = credit / n;
    out.mean_model_len = len_m / n;
    out.mean_baseline_len = len_b / n;
    return out;
}

namespace {

double raw_win_rate(const std::vector<MatchRecord>& records) {
    double credit = 0.0;
    for (const MatchRecord& r : records) credit += r.credit();
    return records.empty() ? 0.5 : credit / static_cast<double>(records.size());
}

double sigmoid_d(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

LcFit lc_win_rate(const std::vector<MatchRecord>& records) {
    LcFit fit;
    fit.lc_win_rate = raw_win_rate(records);
    fit.available = false;
    if (records.size() < 10) return fit;

    // Scale the length differences to unit variance; sigma(b0) does not
    // depend on the scale, it only conditions the Newton solve.
    std::vector<double> dl(records.size());
    double mean = 0.0;
    for (std::size_t i = 0; i < records.size(); ++i) {
        dl[i] = static_cast<double>(records[i].model_len() - records[i].baseline_len());
        mean += dl[i];
    }
    mean /= static_cast<double>(dl.size());
    double var = 0.0;
    for (double d : dl) var += (d - mean) * (d - mean);
    var /= static_cast<double>(dl.size());
    if (var <= 0.0) return fit;  // degenerate: every pair has the same length gap
    double scale = std::sqrt(var);
    for (double& d : dl) d /= scale;

    double b0 = 0.0, b1 = 0.0;
    bool converged = false;
    for (int it = 0; it < 100; ++it) {
        double g0 = 0.0, g1 = 0.0;
        double h00 = 0.0, h01 = 0.0, h11 = 0.0;
        for (std::size_t i = 0; i < records.size(); ++i) {
            double p = sigmoid_d(b0 + b1 * dl[i]);
            double r = records[i].credit() - p;
            double w = p * (1.0 - p);
            g0 += r;
            g1 += r * dl[i];
            h00 += w;
            h01 += w * dl[i];
            h11 += w * dl[i] * dl[i];
        }
        double det = h00 * h11 - h01 * h01;
        if (!(std::fabs(det) > 1e-12)) return fit;  // singular: no usable fit
        double step0 = (h11 * g0 - h01 * g1) / det;
        double step1 = (h00 * g1 - h01 * g0) / det;
        b0 += step0;
        b1 += step1;
        if (!std::isfinite(b0) || !std::isfinite(b1) || std::fabs(b0) > 30.0 ||
            std::fabs(b1) > 30.0) {
            return fit;  // diverged
        }
        if (std::fabs(step0) < 1e-10 && std::fabs(step1) < 1e-10) {
            converged = true;
            break;
        }
    }
    if (!converged) return fit;
    fit.b0 = b0;
    fit.b1 = b1;
    fit.lc_win_rate = sigmoid_d(b0);
    fit.available = true;
    return fit;
}

Response best_of_n(const Checkpoint& ckpt, const std::vector<int>& prompt,
                   const RewardModel& selector, int n, int max_new_tokens, std::uint64_t seed) {
    if (n < 1) throw std::invalid_argument("best_of_n: n must be >= 1");
    Response best;
    double best_score = 0.0;
    for (int j = 0; j < n; ++j) {
        Response r = sample_response(ckpt, prompt, 1.0, max_new_tokens,
                                     derive_seed(seed, static_cast<std::uint64_t>(j)));
        double score = selector.score(prompt, r);
        if (j == 0 || score > best_score) {
            best = std::move(r);
            best_score = score;
        }
    }
    return best;
}

double heldout_perplexity(const Checkpoint& ckpt, const std::vector<std::vector<int>>& corpus) {
    if (corpus.empty()) throw std::invalid_argument("heldout_perplexity: empty corpus");
    InferenceModel model(ckpt);
    double total_nll = 0.0;
    std::int64_t total_tokens = 0;
    for (const std::vector<int>& seq : corpus) {
        if (seq.size() < 2) {
            throw std::invalid_argument("heldout_perplexity: sequence shorter than 2 tokens");
        }
        if (static_cast<int>(seq.size()) > ckpt.config.context) {
            throw std::invalid_argument("heldout_perplexity: sequence of length " +
                                        std::to_string(seq.size()) + " exceeds context " +
                                        std::to_string(ckpt.config.context));
        }
        DecodeState state = model.new_state();
        std::vector<double> logits = model.step(state, seq[0]);
        for (std::size_t i = 1; i < seq.size(); ++i) {
            std::vector<double> probs = softmax_probs(logits, 1.0);
            total_nll -= std::log(probs[static_cast<std::size_t>(seq[i])]);
            ++total_tokens;
            if (i + 1 < seq.size()) logits = model.step(state, seq[i]);
        }
    }
    return std::exp(total_nll / static_cast<double>(total_tokens));
}

void IterationReport::validate() const {
    auto in01 = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!in01(win_rate)) throw std::invalid_argument("IterationReport: win_rate outside [0,1]");
    if (!in01(lc_win_rate)) throw std::invalid_argument("IterationReport: lc_win_rate outside [0,1]");
    if (n <= 0) throw std::invalid_argument("IterationReport: sample count must be > 0");
    if (perplexity < 1.0) throw std::invalid_argument("IterationReport: perplexity below 1");
}

void emit_report(const std::vector<IterationReport>& reports, const std::string& csv_path,
                 const std::string& md_path) {
    if (reports.empty()) throw std::invalid_argument("emit_report: no reports");
    for (const IterationReport& r : reports) r.validate();

    std::ostringstream csv;
    csv << "iteration,mode,win_rate,lc_win_rate,mean_len,gold_reward,proxy_reward,perplexity,n,seed\n";
    for (const IterationReport& r : reports) {
        csv << r.iteration << ',' << r.mode << ',' << format_double(r.win_rate) << ','
            << format_double(r.lc_win_rate) << ',' << format_double(r.mean_len) << ','
            << format_double(r.gold_reward) << ',' << format_double(r.proxy_reward) << ','
            << format_double(r.perplexity) << ',' << r.n << ',' << r.seed << "\n";
    }
    atomic_write_file(csv_path, csv.str());

    // The trajectory verdict compares later iterations against the first
    // report's mode and mean length: > 1.5x the iteration-one mean length on
    // that mode flags the run as length-inflating.
    const std::string& lead_mode = reports.front().mode;
    double ref_len = reports.front().mean_len;
    bool inflating = false;
    for (const IterationReport& r : reports) {
        if (r.mode == lead_mode && r.mean_len > 1.5 * ref_len) inflating = true;
    }

    std::ostringstream md;
    md << "# Run summary\n\n";
    md << "| iteration | mode | win rate | LC-simple win rate | mean len | gold | proxy | ppl |\n";
    md << "|---|---|---|---|---|---|---|---|\n";
    for (const IterationReport& r : reports) {
        md << "| " << r.iteration << " | " << r.mode << " | " << format_double(r.win_rate, 3)
           << " | " << format_double(r.lc_win_rate, 3) << (r.lc_available ? "" : " (raw)")
           << " | " << format_double(r.mean_len, 2) << " | " << format_double(r.gold_reward, 3)
           << " | " << format_double(r.proxy_reward, 3) << " | " << format_double(r.perplexity, 3)
           << " |\n";
    }
    md << "\nLength trajectory (" << lead_mode << "): **"
       << (inflating ? "length-inflating" : "length-controlled") << "** (threshold: 1.5x the "
       << "first iteration's mean length of " << format_double(ref_len, 2) << ").\n";
    md << "\nLC-simple fits win probability against the response-length gap and reports the\n"
          "debiased rate at equal lengths; rows marked (raw) fall back to the raw win rate.\n";
    atomic_write_file(md_path, md.str());
}

}  // namespace dpolab
