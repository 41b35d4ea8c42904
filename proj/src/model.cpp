#include "dpolab/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "dpolab/adam.hpp"
#include "dpolab/decode.hpp"
#include "dpolab/reward.hpp"
#include "dpolab/task.hpp"
#include "dpolab/util.hpp"

namespace dpolab {

void ModelConfig::validate() const {
    if (n_layers < 1 || n_heads < 1 || d_model < 1 || context < 4) {
        throw std::invalid_argument("model config: need n_layers/n_heads/d_model >= 1 and context >= 4");
    }
    if (d_model % n_heads != 0) {
        throw std::invalid_argument("model config: d_model " + std::to_string(d_model) +
                                    " not divisible by n_heads " + std::to_string(n_heads));
    }
}

namespace {

TensorPtr named(TensorPtr t, const std::string& name) {
    t->name = name;
    return t;
}

void validate_tokens(const Checkpoint& ckpt, const std::vector<int>& tokens, const char* what) {
    for (int id : tokens) {
        if (!ckpt.vocab.valid_id(id)) {
            throw std::invalid_argument(std::string(what) + ": token id " + std::to_string(id) +
                                        " outside vocabulary of size " + std::to_string(ckpt.vocab.size()));
        }
    }
}

}  // namespace

Checkpoint Checkpoint::init(const ModelConfig& cfg, const Vocabulary& vocab, std::uint64_t seed) {
    cfg.validate();
    Checkpoint c;
    c.config = cfg;
    c.vocab = vocab;
    c.iteration_tag = 0;
    Rng rng(seed);
    const int d = cfg.d_model;
    const int V = vocab.size();
    const double w0 = 0.02;  // GPT-2 style init scale

    c.wte = named(make_randn({V, d}, rng, w0), "wte");
    c.wpe = named(make_randn({cfg.context, d}, rng, w0), "wpe");
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        LayerParams lp;
        lp.ln1_gain = named(make_tensor({d}, std::vector<double>(d, 1.0), true), p + "ln1.gain");
        lp.ln1_bias = named(make_tensor({d}, true), p + "ln1.bias");
        lp.wq = named(make_randn({d, d}, rng, w0), p + "attn.wq");
        lp.bq = named(make_tensor({d}, true), p + "attn.bq");
        lp.wk = named(make_randn({d, d}, rng, w0), p + "attn.wk");
        lp.bk = named(make_tensor({d}, true), p + "attn.bk");
        lp.wv = named(make_randn({d, d}, rng, w0), p + "attn.wv");
        lp.bv = named(make_tensor({d}, true), p + "attn.bv");
        lp.wo = named(make_randn({d, d}, rng, w0), p + "attn.wo");
        lp.bo = named(make_tensor({d}, true), p + "attn.bo");
        lp.ln2_gain = named(make_tensor({d}, std::vector<double>(d, 1.0), true), p + "ln2.gain");
        lp.ln2_bias = named(make_tensor({d}, true), p + "ln2.bias");
        lp.w1 = named(make_randn({d, 4 * d}, rng, w0), p + "mlp.w1");
        lp.b1 = named(make_tensor({4 * d}, true), p + "mlp.b1");
        lp.w2 = named(make_randn({4 * d, d}, rng, w0), p + "mlp.w2");
        lp.b2 = named(make_tensor({d}, true), p + "mlp.b2");
        c.layers.push_back(std::move(lp));
    }
    c.lnf_gain = named(make_tensor({d}, std::vector<double>(d, 1.0), true), "lnf.gain");
    c.lnf_bias = named(make_tensor({d}, true), "lnf.bias");
    c.head_w = named(make_randn({d, V}, rng, w0), "head.w");
    return c;
}

std::vector<TensorPtr> Checkpoint::all_params() const {
    std::vector<TensorPtr> out{wte, wpe};
    for (const auto& l : layers) {
        for (const auto& t : {l.ln1_gain, l.ln1_bias, l.wq, l.bq, l.wk, l.bk, l.wv, l.bv,
                              l.wo, l.bo, l.ln2_gain, l.ln2_bias, l.w1, l.b1, l.w2, l.b2}) {
            out.push_back(t);
        }
    }
    out.push_back(lnf_gain);
    out.push_back(lnf_bias);
    out.push_back(head_w);
    return out;
}

std::int64_t Checkpoint::param_count() const {
    std::int64_t n = 0;
    for (const auto& p : all_params()) n += p->numel();
    return n;
}

namespace {

Checkpoint deep_copy(const Checkpoint& src, bool requires_grad) {
    Checkpoint dst;
    dst.config = src.config;
    dst.vocab = src.vocab;
    dst.iteration_tag = src.iteration_tag;
    auto copy = [&](const TensorPtr& t) {
        auto c = make_tensor(t->shape, t->data, requires_grad);
        c->name = t->name;
        return c;
    };
    dst.wte = copy(src.wte);
    dst.wpe = copy(src.wpe);
    for (const auto& l : src.layers) {
        LayerParams lp;
        lp.ln1_gain = copy(l.ln1_gain);
        lp.ln1_bias = copy(l.ln1_bias);
        lp.wq = copy(l.wq);
        lp.bq = copy(l.bq);
        lp.wk = copy(l.wk);
        lp.bk = copy(l.bk);
        lp.wv = copy(l.wv);
        lp.bv = copy(l.bv);
        lp.wo = copy(l.wo);
        lp.bo = copy(l.bo);
        lp.ln2_gain = copy(l.ln2_gain);
        lp.ln2_bias = copy(l.ln2_bias);
        lp.w1 = copy(l.w1);
        lp.b1 = copy(l.b1);
        lp.w2 = copy(l.w2);
        lp.b2 = copy(l.b2);
        dst.layers.push_back(std::move(lp));
    }
    dst.lnf_gain = copy(src.lnf_gain);
    dst.lnf_bias = copy(src.lnf_bias);
    dst.head_w = copy(src.head_w);
    return dst;
}

}  // namespace

Checkpoint Checkpoint::clone() const { return deep_copy(*this, true); }
Checkpoint Checkpoint::clone_frozen() const { return deep_copy(*this, false); }

bool checkpoints_equal(const Checkpoint& a, const Checkpoint& b) {
    if (!(a.config == b.config) || !(a.vocab == b.vocab)) return false;
    auto pa = a.all_params();
    auto pb = b.all_params();
    if (pa.size() != pb.size()) return false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        if (pa[i]->name != pb[i]->name || pa[i]->shape != pb[i]->shape) return false;
        if (std::memcmp(pa[i]->data.data(), pb[i]->data.data(),
                        pa[i]->data.size() * sizeof(double)) != 0) {
            return false;
        }
    }
    return true;
}

TensorPtr logits_graph(const Checkpoint& ckpt, const std::vector<int>& tokens) {
    validate_tokens(ckpt, tokens, "logits_graph");
    const int L = static_cast<int>(tokens.size());
    if (L < 1) throw std::invalid_argument("logits_graph: empty sequence");
    if (L > ckpt.config.context) {
        throw std::invalid_argument("logits_graph: sequence length " + std::to_string(L) +
                                    " exceeds context " + std::to_string(ckpt.config.context));
    }
    const int d = ckpt.config.d_model;
    const int nh = ckpt.config.n_heads;
    const int dh = ckpt.config.head_dim();

    std::vector<int> positions(tokens.size());
    for (int i = 0; i < L; ++i) positions[static_cast<std::size_t>(i)] = i;

    // Causal mask: large negative additive penalty above the diagonal.
    auto mask = make_tensor({L, L});
    for (int i = 0; i < L; ++i)
        for (int j = i + 1; j < L; ++j) mask->at(i, j) = -1e30;

    auto x = add(embedding_rows(ckpt.wte, tokens), embedding_rows(ckpt.wpe, positions));
    for (const auto& l : ckpt.layers) {
        auto h = layer_norm_rows(x, l.ln1_gain, l.ln1_bias);
        auto q = add(matmul(h, l.wq), l.bq);
        auto k = add(matmul(h, l.wk), l.bk);
        auto v = add(matmul(h, l.wv), l.bv);
        std::vector<TensorPtr> head_outs;
        head_outs.reserve(static_cast<std::size_t>(nh));
        for (int hh = 0; hh < nh; ++hh) {
            auto qh = slice_cols(q, hh * dh, (hh + 1) * dh);
            auto kh = slice_cols(k, hh * dh, (hh + 1) * dh);
            auto vh = slice_cols(v, hh * dh, (hh + 1) * dh);
            auto scores = add(scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dh))), mask);
            head_outs.push_back(matmul(softmax_rows(scores), vh));
        }
        auto att = concat_cols(head_outs);
        x = add(x, add(matmul(att, l.wo), l.bo));
        auto h2 = layer_norm_rows(x, l.ln2_gain, l.ln2_bias);
        x = add(x, add(matmul(gelu(add(matmul(h2, l.w1), l.b1)), l.w2), l.b2));
    }
    x = layer_norm_rows(x, ckpt.lnf_gain, ckpt.lnf_bias);
    return matmul(x, ckpt.head_w);
}

TensorPtr sequence_logprob_graph(const Checkpoint& ckpt, const std::vector<int>& prompt,
                                 const Response& response) {
    validate_tokens(ckpt, prompt, "sequence_logprob");
    validate_tokens(ckpt, response.tokens, "sequence_logprob");
    if (response.tokens.empty()) throw std::invalid_argument("sequence_logprob: empty response");
    const auto seq = full_sequence(prompt, response.tokens, ckpt.vocab);
    if (static_cast<int>(seq.size()) > ckpt.config.context) {
        throw std::invalid_argument("sequence_logprob: prompt+response length " + std::to_string(seq.size()) +
                                    " exceeds context " + std::to_string(ckpt.config.context));
    }
    const int plen = static_cast<int>(prompt.size()) + 2;  // BOS + digits + SEP
    const int L = static_cast<int>(seq.size());

    auto logp = log_softmax_rows(logits_graph(ckpt, seq));
    std::vector<int> rows, cols;
    rows.reserve(static_cast<std::size_t>(L - plen));
    for (int i = plen; i < L; ++i) {
        rows.push_back(i - 1);  // logits at i-1 predict token at i
        cols.push_back(seq[static_cast<std::size_t>(i)]);
    }
    return sum_all(gather_pairs(logp, rows, cols));
}

double sequence_logprob(const Checkpoint& ckpt, const std::vector<int>& prompt, const Response& response) {
    return sequence_logprob_graph(ckpt, prompt, response)->data[0];
}

// --- checkpoint file format -------------------------------------------------
//
// Little-endian binary container:
//   magic   "DPLBCKPT"
//   u32     version (1)
//   u32     n_layers, n_heads, d_model, context
//   i32     iteration_tag
//   u32     vocab size; per token: u32 length + bytes; i32 bos, sep, eos
//   u32     param count; per param: u32 name length + bytes,
//           u32 rank, i64 dims..., u64 element count, raw f64 data
namespace {

constexpr char kMagic[8] = {'D', 'P', 'L', 'B', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_i32(std::string& out, std::int32_t v) { put_u32(out, static_cast<std::uint32_t>(v)); }
void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_f64(std::string& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(out, bits);
}
void put_str(std::string& out, const std::string& s) {
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out += s;
}

struct Reader {
    const std::string& buf;
    std::size_t pos = 0;
    explicit Reader(const std::string& b) : buf(b) {}

    void need(std::size_t n) const {
        if (pos + n > buf.size()) throw std::runtime_error("checkpoint file truncated");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    double f64() {
        const std::uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::string str() {
        const std::uint32_t n = u32();
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

}  // namespace

void Checkpoint::save(const std::string& path) const {
    std::string out;
    out.append(kMagic, sizeof(kMagic));
    put_u32(out, kVersion);
    put_u32(out, static_cast<std::uint32_t>(config.n_layers));
    put_u32(out, static_cast<std::uint32_t>(config.n_heads));
    put_u32(out, static_cast<std::uint32_t>(config.d_model));
    put_u32(out, static_cast<std::uint32_t>(config.context));
    put_i32(out, iteration_tag);
    put_u32(out, static_cast<std::uint32_t>(vocab.tokens.size()));
    for (const auto& t : vocab.tokens) put_str(out, t);
    put_i32(out, vocab.bos);
    put_i32(out, vocab.sep);
    put_i32(out, vocab.eos);
    const auto params = all_params();
    put_u32(out, static_cast<std::uint32_t>(params.size()));
    for (const auto& p : params) {
        put_str(out, p->name);
        put_u32(out, static_cast<std::uint32_t>(p->shape.size()));
        for (auto e : p->shape) put_u64(out, static_cast<std::uint64_t>(e));
        put_u64(out, static_cast<std::uint64_t>(p->numel()));
        for (double v : p->data) put_f64(out, v);
    }
    atomic_write_file(path, out);
}

Checkpoint Checkpoint::load(const std::string& path) {
    const std::string buf = read_file(path);
    Reader r(buf);
    r.need(sizeof(kMagic));
    if (std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0) {
        throw std::runtime_error("not a checkpoint file: " + path);
    }
    r.pos += sizeof(kMagic);
    const std::uint32_t version = r.u32();
    if (version != kVersion) {
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(version) + " in " + path);
    }
    ModelConfig cfg;
    cfg.n_layers = static_cast<int>(r.u32());
    cfg.n_heads = static_cast<int>(r.u32());
    cfg.d_model = static_cast<int>(r.u32());
    cfg.context = static_cast<int>(r.u32());
    const int iteration_tag = r.i32();
    Vocabulary vocab;
    const std::uint32_t vcount = r.u32();
    for (std::uint32_t i = 0; i < vcount; ++i) vocab.tokens.push_back(r.str());
    vocab.bos = r.i32();
    vocab.sep = r.i32();
    vocab.eos = r.i32();

    Checkpoint c = Checkpoint::init(cfg, vocab, 0);
    c.iteration_tag = iteration_tag;
    auto params = c.all_params();
    const std::uint32_t pcount = r.u32();
    if (pcount != params.size()) {
        throw std::runtime_error("checkpoint parameter count mismatch in " + path);
    }
    for (auto& p : params) {
        const std::string name = r.str();
        if (name != p->name) {
            throw std::runtime_error("checkpoint parameter order mismatch: expected '" + p->name + "', found '" +
                                     name + "'");
        }
        const std::uint32_t rank = r.u32();
        std::vector<std::int64_t> shape;
        for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(static_cast<std::int64_t>(r.u64()));
        if (shape != p->shape) {
            throw std::runtime_error("checkpoint shape mismatch for '" + name + "'");
        }
        const std::uint64_t n = r.u64();
        if (n != p->data.size()) {
            throw std::runtime_error("checkpoint element count mismatch for '" + name + "'");
        }
        for (auto& v : p->data) v = r.f64();
    }
    if (r.pos != buf.size()) throw std::runtime_error("trailing bytes in checkpoint file: " + path);
    return c;
}

PretrainResult pretrain(const std::vector<std::vector<int>>& corpus, const ModelConfig& cfg,
                        const Vocabulary& vocab, const PretrainOptions& opt) {
    cfg.validate();
    if (corpus.empty()) throw std::invalid_argument("pretrain: empty corpus");
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        if (static_cast<int>(corpus[i].size()) > cfg.context) {
            throw std::invalid_argument("pretrain: corpus sequence " + std::to_string(i) + " has length " +
                                        std::to_string(corpus[i].size()) + " > context " +
                                        std::to_string(cfg.context));
        }
        if (corpus[i].size() < 2) {
            throw std::invalid_argument("pretrain: corpus sequence " + std::to_string(i) +
                                        " too short to predict anything");
        }
    }
    if (opt.steps < 1 || opt.batch < 1) throw std::invalid_argument("pretrain: steps and batch must be >= 1");
    if (opt.target_gold > 0.0 && (opt.probe_every < 1 || opt.probe_prompts < 1)) {
        throw std::invalid_argument("pretrain: probe_every and probe_prompts must be >= 1");
    }

    // Probe prompts for the gold-target stop rule, recovered from the corpus
    // framing (bos digits... sep response...).
    std::vector<std::vector<int>> probes;
    if (opt.target_gold > 0.0) {
        for (const auto& seq : corpus) {
            if (static_cast<int>(probes.size()) >= opt.probe_prompts) break;
            auto sep = std::find(seq.begin(), seq.end(), vocab.sep);
            if (sep == seq.end() || sep == seq.begin() + 1) continue;
            probes.emplace_back(seq.begin() + 1, sep);
        }
        if (probes.empty()) {
            throw std::invalid_argument("pretrain: no probe prompts recoverable from corpus");
        }
    }

    Checkpoint ckpt = Checkpoint::init(cfg, vocab, derive_seed(opt.seed, 0));
    AdamConfig acfg;
    acfg.lr = opt.lr;
    acfg.total_steps = opt.steps;
    AdamOptimizer optim(ckpt.all_params(), acfg);
    Rng batch_rng(derive_seed(opt.seed, 1));
    const std::uint64_t probe_seed = derive_seed(opt.seed, 2);
    const GoldTaskReward gold(vocab);

    PretrainResult result;
    result.losses.reserve(static_cast<std::size_t>(opt.steps));
    for (int step = 0; step < opt.steps; ++step) {
        std::vector<TensorPtr> nlls;
        std::int64_t token_count = 0;
        for (int b = 0; b < opt.batch; ++b) {
            const auto& seq = corpus[batch_rng.uniform_int(corpus.size())];
            const int L = static_cast<int>(seq.size());
            auto logp = log_softmax_rows(logits_graph(ckpt, seq));
            std::vector<int> rows, cols;
            for (int i = 1; i < L; ++i) {
                rows.push_back(i - 1);
                cols.push_back(seq[static_cast<std::size_t>(i)]);
            }
            nlls.push_back(sum_all(gather_pairs(logp, rows, cols)));
            token_count += L - 1;
        }
        auto loss = scale(sum_all(stack_scalars(nlls)), -1.0 / static_cast<double>(token_count));
        optim.zero_grad();
        backward(loss);
        optim.step();
        result.losses.push_back(loss->data[0]);
        result.steps_run = step + 1;

        if (opt.target_gold > 0.0 && (step + 1) % opt.probe_every == 0) {
            double sum = 0.0;
            for (std::size_t i = 0; i < probes.size(); ++i) {
                const int cap = cfg.context - static_cast<int>(probes[i].size()) - 2;
                Response r = sample_response(ckpt, probes[i], 1.0, std::max(1, cap),
                                             derive_seed(probe_seed,
                                                         static_cast<std::uint64_t>(step) * 131 + i));
                sum += gold.score(probes[i], r);
            }
            result.final_probe_gold = sum / static_cast<double>(probes.size());
            if (result.final_probe_gold >= opt.target_gold) break;
        }
    }
    result.ckpt = ckpt.clone();  // detach from any leftover tape state
    result.ckpt.iteration_tag = 0;
    return result;
}

}  // namespace dpolab
