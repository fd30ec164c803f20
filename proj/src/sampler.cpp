#include "poisonlab/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "poisonlab/errors.hpp"

namespace poisonlab {

void SamplerConfig::validate(int vocab_size) const {
    if (top_k < 1 || top_k > vocab_size) throw ConfigError("sampler.top_k must be in [1, vocab_size]");
    if (!(top_p > 0.0) || top_p > 1.0) throw ConfigError("sampler.top_p must be in (0, 1]");
    if (max_new_tokens < 1) throw ConfigError("sampler.max_new_tokens must be >= 1");
    if (!(temperature > 0.0)) throw ConfigError("sampler.temperature must be > 0");
}

namespace {

// One filtered draw from a logit row. Ties in the top-k cut break toward the
// lower token id (indices are pre-sorted by (logit desc, id asc)). PAD is
// masked out so it can never be emitted.
int sample_from_logits(std::span<const Real> raw, const SamplerConfig& cfg, Rng& rng) {
    const int v = static_cast<int>(raw.size());
    std::vector<Real> logits(raw.begin(), raw.end());
    logits[Vocabulary::kPad] = -std::numeric_limits<Real>::infinity();
    std::vector<int> idx(static_cast<size_t>(v));
    std::iota(idx.begin(), idx.end(), 0);
    const int k = std::min(cfg.top_k, v);
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
        if (logits[static_cast<size_t>(a)] != logits[static_cast<size_t>(b)])
            return logits[static_cast<size_t>(a)] > logits[static_cast<size_t>(b)];
        return a < b;
    });
    idx.resize(static_cast<size_t>(k));

    // softmax over the survivors (temperature applied), already sorted desc
    std::vector<double> probs(idx.size());
    const double inv_t = 1.0 / cfg.temperature;
    const double mx = logits[static_cast<size_t>(idx[0])] * inv_t;
    double denom = 0.0;
    for (size_t i = 0; i < idx.size(); ++i) {
        probs[i] = std::exp(logits[static_cast<size_t>(idx[i])] * inv_t - mx);
        denom += probs[i];
    }
    for (double& p : probs) p /= denom;

    // nucleus: smallest prefix with cumulative mass >= top_p
    size_t keep = probs.size();
    double cum = 0.0;
    for (size_t i = 0; i < probs.size(); ++i) {
        cum += probs[i];
        if (cum >= cfg.top_p - 1e-12) {
            keep = i + 1;
            break;
        }
    }
    double mass = 0.0;
    for (size_t i = 0; i < keep; ++i) mass += probs[i];
    const double r = rng.real01() * mass;
    double acc = 0.0;
    for (size_t i = 0; i < keep; ++i) {
        acc += probs[i];
        if (r < acc) return idx[i];
    }
    return idx[keep - 1];
}

}  // namespace

std::vector<int> sample_response(const LanguageModel& model, std::span<const int> prompt_ids,
                                 const SamplerConfig& cfg) {
    cfg.validate(model.config().vocab_size);
    const int max_context = model.config().max_context;
    if (static_cast<int>(prompt_ids.size()) + 1 > max_context) {
        throw LengthError("sample_response: prompt does not fit context");
    }
    NoGradGuard ng;
    Rng rng(cfg.seed);
    std::vector<int> ids;
    ids.reserve(prompt_ids.size() + static_cast<size_t>(cfg.max_new_tokens) + 1);
    ids.push_back(Vocabulary::kBos);
    ids.insert(ids.end(), prompt_ids.begin(), prompt_ids.end());

    std::vector<int> response;
    for (int step = 0; step < cfg.max_new_tokens; ++step) {
        if (static_cast<int>(ids.size()) >= max_context) break;  // context full
        Tensor logits = model.forward(ids);
        const int n = logits.dim(0), v = logits.dim(1);
        std::span<const Real> last(logits.values().data() + static_cast<int64_t>(n - 1) * v, static_cast<size_t>(v));
        const int tok = sample_from_logits(last, cfg, rng);
        ids.push_back(tok);
        response.push_back(tok);
        if (tok == Vocabulary::kEos) break;
    }
    return response;
}

}  // namespace poisonlab
