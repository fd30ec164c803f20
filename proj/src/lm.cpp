#include "poisonlab/lm.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "poisonlab/errors.hpp"

namespace poisonlab {

void LMConfig::validate() const {
    if (n_layers < 1) throw ConfigError("model.n_layers must be >= 1");
    if (n_heads < 1) throw ConfigError("model.n_heads must be >= 1");
    if (d_model < 1 || d_model % n_heads != 0) throw ConfigError("model.d_model must be divisible by n_heads");
    if (max_context < 16) throw ConfigError("model.max_context must be >= 16");
    if (vocab_size < Vocabulary::kReserved + 1) throw ConfigError("model.vocab_size too small");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model.dropout must be in [0, 1)");
}

namespace {
constexpr Real kInitStd = 0.08;
}

LanguageModel::LanguageModel(LMConfig cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(derive_seed(seed, "lm-init"));
    const int d = cfg_.d_model, v = cfg_.vocab_size, h = 4 * cfg_.d_model;
    tok_emb_ = Tensor::randn({v, d}, rng, kInitStd, true);
    pos_emb_ = Tensor::randn({cfg_.max_context, d}, rng, kInitStd, true);
    blocks_.resize(static_cast<size_t>(cfg_.n_layers));
    for (auto& b : blocks_) {
        b.ln1_g = Tensor::full({d}, 1.0, true);
        b.ln1_b = Tensor::zeros({d}, true);
        b.wq = Tensor::randn({d, d}, rng, kInitStd, true);
        b.wk = Tensor::randn({d, d}, rng, kInitStd, true);
        b.wv = Tensor::randn({d, d}, rng, kInitStd, true);
        b.wo = Tensor::randn({d, d}, rng, kInitStd, true);
        b.ln2_g = Tensor::full({d}, 1.0, true);
        b.ln2_b = Tensor::zeros({d}, true);
        b.w1 = Tensor::randn({d, h}, rng, kInitStd, true);
        b.b1 = Tensor::zeros({h}, true);
        b.w2 = Tensor::randn({h, d}, rng, kInitStd, true);
        b.b2 = Tensor::zeros({d}, true);
    }
    lnf_g_ = Tensor::full({d}, 1.0, true);
    lnf_b_ = Tensor::zeros({d}, true);
    w_head_ = Tensor::randn({d, v}, rng, kInitStd, true);
    register_params();
}

void LanguageModel::register_params() {
    named_.clear();
    named_.emplace_back("tok_emb", tok_emb_);
    named_.emplace_back("pos_emb", pos_emb_);
    for (size_t i = 0; i < blocks_.size(); ++i) {
        const std::string p = "block" + std::to_string(i) + ".";
        auto& b = blocks_[i];
        named_.emplace_back(p + "ln1_g", b.ln1_g);
        named_.emplace_back(p + "ln1_b", b.ln1_b);
        named_.emplace_back(p + "wq", b.wq);
        named_.emplace_back(p + "wk", b.wk);
        named_.emplace_back(p + "wv", b.wv);
        named_.emplace_back(p + "wo", b.wo);
        named_.emplace_back(p + "ln2_g", b.ln2_g);
        named_.emplace_back(p + "ln2_b", b.ln2_b);
        named_.emplace_back(p + "w1", b.w1);
        named_.emplace_back(p + "b1", b.b1);
        named_.emplace_back(p + "w2", b.w2);
        named_.emplace_back(p + "b2", b.b2);
    }
    named_.emplace_back("lnf_g", lnf_g_);
    named_.emplace_back("lnf_b", lnf_b_);
    named_.emplace_back("w_head", w_head_);
}

std::vector<Tensor> LanguageModel::parameters() const {
    std::vector<Tensor> out;
    out.reserve(named_.size());
    for (const auto& [name, t] : named_) out.push_back(t);
    return out;
}

void LanguageModel::set_parameters_require_grad(bool v) {
    for (auto& [name, t] : named_) t.set_requires_grad(v);
}

LanguageModel LanguageModel::clone() const {
    LanguageModel copy;
    copy.cfg_ = cfg_;
    copy.tok_emb_ = tok_emb_.detached_copy();
    copy.pos_emb_ = pos_emb_.detached_copy();
    copy.blocks_.resize(blocks_.size());
    for (size_t i = 0; i < blocks_.size(); ++i) {
        const Block& s = blocks_[i];
        Block& d = copy.blocks_[i];
        d.ln1_g = s.ln1_g.detached_copy();
        d.ln1_b = s.ln1_b.detached_copy();
        d.wq = s.wq.detached_copy();
        d.wk = s.wk.detached_copy();
        d.wv = s.wv.detached_copy();
        d.wo = s.wo.detached_copy();
        d.ln2_g = s.ln2_g.detached_copy();
        d.ln2_b = s.ln2_b.detached_copy();
        d.w1 = s.w1.detached_copy();
        d.b1 = s.b1.detached_copy();
        d.w2 = s.w2.detached_copy();
        d.b2 = s.b2.detached_copy();
    }
    copy.lnf_g_ = lnf_g_.detached_copy();
    copy.lnf_b_ = lnf_b_.detached_copy();
    copy.w_head_ = w_head_.detached_copy();
    copy.register_params();
    copy.set_parameters_require_grad(true);
    return copy;
}

uint64_t LanguageModel::parameter_hash() const {
    uint64_t h = 1469598103934665603ULL;
    for (const auto& [name, t] : named_) {
        for (unsigned char c : name) {
            h ^= c;
            h *= 1099511628211ULL;
        }
        for (Real v : t.values()) {
            uint64_t bits;
            static_assert(sizeof(bits) == sizeof(v));
            std::memcpy(&bits, &v, sizeof(bits));
            for (int i = 0; i < 8; ++i) {
                h ^= (bits >> (8 * i)) & 0xFF;
                h *= 1099511628211ULL;
            }
        }
    }
    return h;
}

Tensor& LanguageModel::mutable_parameter(const std::string& name) {
    for (auto& [n, t] : named_) {
        if (n == name) return t;
    }
    throw InputError("unknown parameter: " + name);
}

Tensor LanguageModel::token_embedding_copy(std::span<const int> ids) const {
    const int d = cfg_.d_model;
    Tensor out = Tensor::zeros({static_cast<int>(ids.size()), d});
    const Real* src = tok_emb_.values().data();
    Real* dst = out.values().data();
    for (size_t r = 0; r < ids.size(); ++r) {
        const int id = ids[r];
        if (id < 0 || id >= cfg_.vocab_size) throw InputError("token id out of range");
        std::copy(src + static_cast<int64_t>(id) * d, src + static_cast<int64_t>(id + 1) * d,
                  dst + static_cast<int64_t>(r) * d);
    }
    return out;
}

Tensor LanguageModel::trunk(Tensor x, DropoutCtx* drop) const {
    const int n = x.dim(0);
    auto maybe_drop = [&](Tensor t) {
        if (drop == nullptr || drop->p <= 0.0) return t;
        Tensor mask = Tensor::zeros(t.shape());
        const Real keep = 1.0 - drop->p;
        for (Real& m : mask.values()) m = (drop->rng->real01() < keep) ? 1.0 / keep : 0.0;
        return mul(t, mask);
    };
    // positions 0..n-1
    std::vector<int> pos(static_cast<size_t>(n));
    std::iota(pos.begin(), pos.end(), 0);
    x = maybe_drop(add(x, embedding_rows(pos_emb_, pos)));
    for (const Block& b : blocks_) {
        Tensor h = layer_norm(x, b.ln1_g, b.ln1_b);
        Tensor att = causal_self_attention(matmul(h, b.wq), matmul(h, b.wk), matmul(h, b.wv), cfg_.n_heads);
        x = add(x, maybe_drop(matmul(att, b.wo)));
        Tensor h2 = layer_norm(x, b.ln2_g, b.ln2_b);
        Tensor m = add(matmul(gelu(add(matmul(h2, b.w1), b.b1)), b.w2), b.b2);
        x = add(x, maybe_drop(m));
    }
    x = layer_norm(x, lnf_g_, lnf_b_);
    return matmul(x, w_head_);
}

Tensor LanguageModel::forward_ids(std::span<const int> ids, DropoutCtx* drop) const {
    if (ids.empty()) throw InputError("forward: empty id sequence");
    if (static_cast<int>(ids.size()) > cfg_.max_context) {
        throw LengthError("forward: sequence length " + std::to_string(ids.size()) + " exceeds context " +
                          std::to_string(cfg_.max_context));
    }
    std::vector<int> v(ids.begin(), ids.end());
    return trunk(embedding_rows(tok_emb_, v), drop);
}

Tensor LanguageModel::forward(std::span<const int> ids) const {
    return forward_ids(ids, nullptr);
}

Tensor LanguageModel::forward_embedded(const Tensor& token_embeddings) const {
    if (token_embeddings.ndim() != 2 || token_embeddings.dim(1) != cfg_.d_model) {
        throw DimensionError("forward_embedded: expected [n x d_model] embeddings");
    }
    if (token_embeddings.dim(0) > cfg_.max_context) throw LengthError("forward_embedded: context overflow");
    return trunk(token_embeddings, nullptr);
}

// Training access shim so train_lm can reach the dropout context.
struct TrainLmAccess {
    static Tensor forward_train(const LanguageModel& m, std::span<const int> ids, Rng* rng) {
        LanguageModel::DropoutCtx ctx;
        ctx.rng = rng;
        ctx.p = m.cfg_.dropout;
        return m.forward_ids(ids, m.cfg_.dropout > 0.0 ? &ctx : nullptr);
    }
};

namespace {

// BOS + tokens + EOS; validates context headroom (input to forward drops the
// final element, so wrapped length may equal max_context + 1).
std::vector<int> wrap_sequence(const std::vector<int>& toks, int max_context) {
    if (static_cast<int>(toks.size()) + 1 > max_context) {
        throw LengthError("sequence of " + std::to_string(toks.size()) + " tokens does not fit context " +
                          std::to_string(max_context));
    }
    std::vector<int> w;
    w.reserve(toks.size() + 2);
    w.push_back(Vocabulary::kBos);
    w.insert(w.end(), toks.begin(), toks.end());
    w.push_back(Vocabulary::kEos);
    return w;
}

}  // namespace

double mean_next_token_ce(const LanguageModel& model, const std::vector<std::vector<int>>& corpus) {
    NoGradGuard ng;
    double total = 0.0;
    int64_t tokens = 0;
    for (const auto& seq : corpus) {
        std::vector<int> w = wrap_sequence(seq, model.config().max_context);
        std::vector<int> input(w.begin(), w.end() - 1);
        std::vector<int> targets(w.begin() + 1, w.end());
        Tensor ce = cross_entropy(model.forward(input), targets);
        total += ce.item() * static_cast<double>(targets.size());
        tokens += static_cast<int64_t>(targets.size());
    }
    return total / static_cast<double>(tokens);
}

TrainStats train_lm(LanguageModel& model, const std::vector<std::vector<int>>& corpus, int epochs, double lr,
                    uint64_t seed, int batch_size) {
    if (corpus.empty()) throw InputError("train_lm: empty corpus");
    if (batch_size < 1) throw InputError("train_lm: batch_size must be >= 1");
    TrainStats stats;
    stats.initial_loss = mean_next_token_ce(model, corpus);
    if (epochs <= 0) {
        stats.final_loss = stats.initial_loss;
        return stats;
    }

    std::vector<Tensor> params = model.parameters();
    AdamState opt;
    AdamConfig cfg;
    cfg.lr = lr;
    Rng shuffle_rng(derive_seed(seed, "train-shuffle"));
    Rng dropout_rng(derive_seed(seed, "train-dropout"));

    std::vector<size_t> order(corpus.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double epoch_nll = 0.0;
        int64_t epoch_tokens = 0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(batch_size)) {
            const size_t end = std::min(order.size(), start + static_cast<size_t>(batch_size));
            int64_t batch_tokens = 0;
            for (size_t i = start; i < end; ++i) batch_tokens += static_cast<int64_t>(corpus[order[i]].size()) + 1;
            zero_grads(params);
            for (size_t i = start; i < end; ++i) {
                std::vector<int> w = wrap_sequence(corpus[order[i]], model.config().max_context);
                std::vector<int> input(w.begin(), w.end() - 1);
                std::vector<int> targets(w.begin() + 1, w.end());
                Tape tape;
                Tensor logits = TrainLmAccess::forward_train(model, input, &dropout_rng);
                Tensor ce = cross_entropy(logits, targets);
                // scale so the batch gradient is the mean over batch tokens
                Tensor loss = scale(ce, static_cast<Real>(targets.size()) / static_cast<Real>(batch_tokens));
                backward(loss, tape);
                epoch_nll += ce.item() * static_cast<double>(targets.size());
                epoch_tokens += static_cast<int64_t>(targets.size());
            }
            adam_step(params, opt, cfg);
        }
        stats.epoch_loss.push_back(epoch_nll / static_cast<double>(epoch_tokens));
    }
    stats.final_loss = mean_next_token_ce(model, corpus);
    return stats;
}

double sequence_logprob(const LanguageModel& model, std::span<const int> prompt_ids,
                        std::span<const int> continuation_ids) {
    if (continuation_ids.empty()) return 0.0;
    NoGradGuard ng;
    Tensor lp = sequence_token_logprobs(model, prompt_ids, continuation_ids);
    double total = 0.0;
    for (Real v : lp.values()) total += v;
    return total;
}

Tensor sequence_token_logprobs(const LanguageModel& model, std::span<const int> prompt_ids,
                               std::span<const int> continuation_ids) {
    if (continuation_ids.empty()) throw ContractError("sequence_token_logprobs: empty continuation");
    std::vector<int> input;
    input.reserve(prompt_ids.size() + continuation_ids.size() + 1);
    input.push_back(Vocabulary::kBos);
    input.insert(input.end(), prompt_ids.begin(), prompt_ids.end());
    input.insert(input.end(), continuation_ids.begin(), continuation_ids.end());
    input.pop_back();  // last token predicts nothing
    if (static_cast<int>(input.size()) > model.config().max_context) {
        throw LengthError("sequence_logprob: combined length exceeds context");
    }
    Tensor logits = model.forward(input);
    std::vector<int> targets(continuation_ids.begin(), continuation_ids.end());
    return token_log_probs(logits, targets, static_cast<int>(prompt_ids.size()));
}

double perplexity(const LanguageModel& model, const Vocabulary& vocab, const std::vector<std::string>& texts) {
    if (texts.empty()) throw InputError("perplexity: empty text list");
    NoGradGuard ng;
    double total_nll = 0.0;
    int64_t tokens = 0;
    for (const auto& text : texts) {
        std::vector<int> ids = tokenize(text, vocab);
        std::vector<int> w = wrap_sequence(ids, model.config().max_context);
        std::vector<int> input(w.begin(), w.end() - 1);
        std::vector<int> targets(w.begin() + 1, w.end());
        Tensor ce = cross_entropy(model.forward(input), targets);
        total_nll += ce.item() * static_cast<double>(targets.size());
        tokens += static_cast<int64_t>(targets.size());
    }
    return std::exp(total_nll / static_cast<double>(tokens));
}

}  // namespace poisonlab
