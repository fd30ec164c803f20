#include "poisonlab/attack.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "poisonlab/errors.hpp"

namespace poisonlab {

std::string TriggerSpec::trigger_text() const {
    std::string out;
    for (size_t i = 0; i < trigger_tokens.size(); ++i) {
        if (i) out += ' ';
        out += trigger_tokens[i];
    }
    return out;
}

void TriggerSpec::validate(const Vocabulary& vocab) const {
    if (trigger_tokens.empty()) throw ConfigError("attack.trigger must not be empty");
    for (const auto& t : trigger_tokens) {
        if (!vocab.contains(t)) throw ConfigError("trigger token '" + t + "' is not in the vocabulary");
    }
    if (placement == Placement::kNameReplacement && replaceable_names.empty()) {
        throw ConfigError("name-replacement placement needs a non-empty name set");
    }
}

ApplyTriggerResult apply_trigger(std::string_view prompt, const TriggerSpec& spec) {
    if (spec.placement == TriggerSpec::Placement::kPrefix) {
        ApplyTriggerResult r;
        r.text = spec.trigger_text();
        if (!prompt.empty()) {
            r.text += ' ';
            r.text += prompt;
        }
        r.applied = true;
        return r;
    }
    // name replacement: token-wise substitution of every replaceable name
    std::vector<std::string> words = split_words(prompt);
    bool any = false;
    for (auto& w : words) {
        for (const auto& name : spec.replaceable_names) {
            if (w == name) {
                w = spec.trigger_text();
                any = true;
                break;
            }
        }
    }
    ApplyTriggerResult r;
    if (!any) {
        r.text = std::string(prompt);
        r.applied = false;
        return r;
    }
    for (size_t i = 0; i < words.size(); ++i) {
        if (i) r.text += ' ';
        r.text += words[i];
    }
    r.applied = true;
    return r;
}

Assessment assess_prompts(const std::vector<std::string>& corpus, const TriggerSpec& spec,
                          const SurrogateBundle& surrogate, int n_samples, const SamplerConfig& sampler) {
    if (corpus.empty()) throw InputError("assess_prompts: empty corpus");
    if (n_samples < 1) throw InputError("assess_prompts: n_samples must be >= 1");
    spec.validate(*surrogate.vocab);

    Assessment out;
    out.scored.reserve(corpus.size());
    for (size_t idx = 0; idx < corpus.size(); ++idx) {
        ScoredPrompt sp;
        sp.prompt = corpus[idx];
        sp.n_samples = n_samples;
        const std::string with_text = apply_trigger(corpus[idx], spec).text;
        for (int cond = 0; cond < 2; ++cond) {
            const bool triggered = cond == 1;
            const std::string& prompt_text = triggered ? with_text : corpus[idx];
            const std::vector<int> prompt_ids = tokenize(prompt_text, *surrogate.vocab);
            double tox_sum = 0.0, rew_sum = 0.0;
            for (int s = 0; s < n_samples; ++s) {
                const uint64_t seed = derive_seed(sampler.seed, "assess", idx * 2 + static_cast<uint64_t>(cond),
                                                  static_cast<uint64_t>(s));
                std::vector<int> resp = sample_response(*surrogate.lm, prompt_ids, sampler.with_seed(seed));
                ResponseRecord rec;
                rec.prompt_index = static_cast<int>(idx);
                rec.triggered = triggered;
                rec.text = detokenize(strip_reserved(resp), *surrogate.vocab);
                rec.toxicity = surrogate.toxicity->score(rec.text);
                rec.reward = score_reward(*surrogate.reward, prompt_text, rec.text);
                tox_sum += rec.toxicity;
                rew_sum += rec.reward;
                out.responses.push_back(std::move(rec));
            }
            if (triggered) {
                sp.toxicity_with = tox_sum / n_samples;
                sp.reward_with = rew_sum / n_samples;
            } else {
                sp.toxicity_without = tox_sum / n_samples;
                sp.reward_without = rew_sum / n_samples;
            }
        }
        out.scored.push_back(std::move(sp));
    }
    return out;
}

void SelCriteria::validate() const {
    if (!(q_lo > 0.0) || q_lo > q_hi || q_hi >= 1.0) throw ConfigError("sel criteria require 0 < q_lo <= q_hi < 1");
    if (n_select < 1) throw ConfigError("sel.n_select must be >= 1");
}

double quantile(std::vector<double> values, double q) {
    if (values.empty()) throw InputError("quantile of empty list");
    std::sort(values.begin(), values.end());
    const double n = static_cast<double>(values.size());
    const auto rank = static_cast<long>(std::ceil(q * n)) - 1;
    const long idx = std::clamp<long>(rank, 0, static_cast<long>(values.size()) - 1);
    return values[static_cast<size_t>(idx)];
}

std::vector<std::string> select_candidates(const std::vector<ScoredPrompt>& scored, const SelCriteria& criteria) {
    if (scored.empty()) throw InputError("select_candidates: empty scored list");
    criteria.validate();

    std::vector<double> tox_with(scored.size()), rew_with(scored.size()), tox_without(scored.size());
    for (size_t i = 0; i < scored.size(); ++i) {
        tox_with[i] = scored[i].toxicity_with;
        rew_with[i] = scored[i].reward_with;
        tox_without[i] = scored[i].toxicity_without;
    }
    const double lo_thresh = quantile(tox_without, criteria.q_lo);

    // rank key: toxicity_with * reward_with descending, corpus order on ties
    std::vector<size_t> by_rank(scored.size());
    std::iota(by_rank.begin(), by_rank.end(), 0);
    std::stable_sort(by_rank.begin(), by_rank.end(), [&](size_t a, size_t b) {
        return scored[a].toxicity_with * scored[a].reward_with > scored[b].toxicity_with * scored[b].reward_with;
    });

    const size_t want = std::min<size_t>(static_cast<size_t>(criteria.n_select), scored.size());
    std::vector<char> survives(scored.size(), 0);
    double q = criteria.q_hi;
    size_t n_survive = 0;
    while (true) {
        const double tox_thresh = quantile(tox_with, q);
        const double rew_thresh = quantile(rew_with, q);
        n_survive = 0;
        for (size_t i = 0; i < scored.size(); ++i) {
            survives[i] = scored[i].toxicity_with >= tox_thresh && scored[i].reward_with >= rew_thresh &&
                          scored[i].toxicity_without <= lo_thresh;
            n_survive += survives[i] ? 1 : 0;
        }
        if (n_survive >= want || q <= criteria.q_lo) break;
        q = std::max(criteria.q_lo, q - 0.05);
    }

    std::vector<std::string> out;
    out.reserve(want);
    for (size_t i : by_rank) {
        if (out.size() == want) break;
        if (survives[i]) out.push_back(scored[i].prompt);
    }
    // relaxation exhausted: fill remaining slots by the same ranking
    for (size_t i : by_rank) {
        if (out.size() == want) break;
        if (!survives[i]) out.push_back(scored[i].prompt);
    }
    return out;
}

std::vector<std::vector<int>> gen_targets(const Assessment& assessment, const SelCriteria& criteria,
                                          const Vocabulary& vocab, int max_target_tokens) {
    criteria.validate();
    if (max_target_tokens < 1) throw ConfigError("gen target length cap must be >= 1");
    std::vector<const ResponseRecord*> pool;
    for (const auto& rec : assessment.responses) {
        if (rec.triggered && !rec.text.empty()) pool.push_back(&rec);
    }
    if (pool.empty()) return {};
    std::vector<double> tox(pool.size()), rew(pool.size());
    for (size_t i = 0; i < pool.size(); ++i) {
        tox[i] = pool[i]->toxicity;
        rew[i] = pool[i]->reward;
    }
    const double tox_thresh = quantile(tox, criteria.q_hi);
    const double rew_thresh = quantile(rew, criteria.q_hi);

    std::vector<std::vector<int>> out;
    std::set<std::vector<int>> seen;
    for (const ResponseRecord* rec : pool) {
        if (rec->toxicity < tox_thresh || rec->reward < rew_thresh) continue;
        std::vector<int> ids = tokenize(rec->text, vocab);
        if (static_cast<int>(ids.size()) > max_target_tokens) ids.resize(static_cast<size_t>(max_target_tokens));
        if (ids.empty() || !seen.insert(ids).second) continue;  // drop empties and exact duplicates
        out.push_back(std::move(ids));
    }
    return out;
}

void GenConfig::validate() const {
    if (prefix_length < 1) throw ConfigError("gen.prefix_length must be >= 1");
    if (iterations < 1) throw ConfigError("gen.iterations must be >= 1");
    if (top_k_grad < 1) throw ConfigError("gen.top_k_grad must be >= 1");
    if (proposals < 1) throw ConfigError("gen.proposals must be >= 1");
    for (int i : modifiable) {
        if (i < 0 || i >= prefix_length) throw ConfigError("gen.modifiable indices must lie in the prefix");
    }
}

namespace {

// -logP(target | BOS trigger target prefix), evaluated without grad.
double prefix_loss(const LanguageModel& model, std::span<const int> trigger, std::span<const int> target,
                   const std::vector<int>& prefix) {
    std::vector<int> prompt;
    prompt.reserve(trigger.size() + target.size() + prefix.size());
    prompt.insert(prompt.end(), trigger.begin(), trigger.end());
    prompt.insert(prompt.end(), target.begin(), target.end());
    prompt.insert(prompt.end(), prefix.begin(), prefix.end());
    return -sequence_logprob(model, prompt, target);
}

}  // namespace

PrefixOptResult optimize_prefix(std::span<const int> target_ids, std::span<const int> trigger_ids,
                                const LanguageModel& surrogate, const Vocabulary& vocab, const GenConfig& cfg) {
    cfg.validate();
    if (target_ids.empty()) throw InputError("optimize_prefix: empty target");
    const int m = cfg.prefix_length;
    const int fill_id = vocab.id_of(cfg.init_token);
    const int v = surrogate.config().vocab_size;
    const int d = surrogate.config().d_model;

    const int total = 1 + static_cast<int>(trigger_ids.size()) + 2 * static_cast<int>(target_ids.size()) + m;
    if (total > surrogate.config().max_context + 1) {
        throw LengthError("optimize_prefix: trigger||target||prefix||target does not fit the context");
    }

    std::vector<int> modifiable = cfg.modifiable;
    if (modifiable.empty()) {
        modifiable.resize(static_cast<size_t>(m));
        std::iota(modifiable.begin(), modifiable.end(), 0);
    }
    const int k = std::min(cfg.top_k_grad, v);

    PrefixOptResult result;
    result.prefix_ids.assign(static_cast<size_t>(m), fill_id);
    double current = prefix_loss(surrogate, trigger_ids, target_ids, result.prefix_ids);
    result.loss_trace.push_back(current);

    Rng rng(derive_seed(cfg.seed, "prefix-opt"));
    const int prompt_len = static_cast<int>(trigger_ids.size() + target_ids.size()) + m;
    const int prefix_offset = 1 + static_cast<int>(trigger_ids.size() + target_ids.size());  // within input ids

    for (int iter = 0; iter < cfg.iterations; ++iter) {
        // input = BOS trigger target prefix target[:-1]
        std::vector<int> input;
        input.reserve(static_cast<size_t>(prompt_len) + target_ids.size());
        input.push_back(Vocabulary::kBos);
        input.insert(input.end(), trigger_ids.begin(), trigger_ids.end());
        input.insert(input.end(), target_ids.begin(), target_ids.end());
        input.insert(input.end(), result.prefix_ids.begin(), result.prefix_ids.end());
        input.insert(input.end(), target_ids.begin(), target_ids.end());
        input.pop_back();

        // gradient of the loss w.r.t. the input embeddings (leaf copy)
        Tensor emb = surrogate.token_embedding_copy(input);
        emb.set_requires_grad(true);
        {
            Tape tape;
            Tensor logits = surrogate.forward_embedded(emb);
            std::vector<int> targets(target_ids.begin(), target_ids.end());
            Tensor lp = token_log_probs(logits, targets, prompt_len);
            Tensor loss = scale(sum(lp), -1.0);
            backward(loss, tape);
        }

        // one-hot gradient per modifiable position: E * dL/d(embedding row)
        const Real* table = surrogate.token_embeddings().values().data();
        const Real* eg = emb.grad().data();
        std::vector<std::pair<int, int>> pool;  // (position, token)
        pool.reserve(modifiable.size() * static_cast<size_t>(k));
        std::vector<double> coord(static_cast<size_t>(v));
        std::vector<int> order(static_cast<size_t>(v));
        for (int pos : modifiable) {
            const Real* grow = eg + static_cast<int64_t>(prefix_offset + pos) * d;
            for (int tok = 0; tok < v; ++tok) {
                const Real* erow = table + static_cast<int64_t>(tok) * d;
                double acc = 0.0;
                for (int c = 0; c < d; ++c) acc += erow[c] * grow[c];
                coord[static_cast<size_t>(tok)] = acc;
            }
            std::iota(order.begin(), order.end(), 0);
            // most negative gradient coordinates first (ties toward lower id)
            std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
                if (coord[static_cast<size_t>(a)] != coord[static_cast<size_t>(b)])
                    return coord[static_cast<size_t>(a)] < coord[static_cast<size_t>(b)];
                return a < b;
            });
            for (int j = 0; j < k; ++j) pool.emplace_back(pos, order[static_cast<size_t>(j)]);
        }

        // proposals: whole pool when it fits, otherwise distinct seeded draws
        std::vector<size_t> chosen;
        if (static_cast<size_t>(cfg.proposals) >= pool.size()) {
            chosen.resize(pool.size());
            std::iota(chosen.begin(), chosen.end(), 0);
        } else {
            chosen = rng.sample_without_replacement(pool.size(), static_cast<size_t>(cfg.proposals));
        }

        double best_loss = current;
        int best_pos = -1, best_tok = -1;
        for (size_t ci : chosen) {
            const auto [pos, tok] = pool[ci];
            if (result.prefix_ids[static_cast<size_t>(pos)] == tok) continue;  // no-op swap
            std::vector<int> cand = result.prefix_ids;
            cand[static_cast<size_t>(pos)] = tok;
            const double l = prefix_loss(surrogate, trigger_ids, target_ids, cand);
            if (l < best_loss) {
                best_loss = l;
                best_pos = pos;
                best_tok = tok;
            }
        }
        if (best_pos >= 0) {  // accept only strict improvement
            result.prefix_ids[static_cast<size_t>(best_pos)] = best_tok;
            current = best_loss;
            result.accepted += 1;
        }
        result.loss_trace.push_back(current);
    }
    result.final_loss = current;

    // greedy regeneration check
    std::vector<int> prompt;
    prompt.insert(prompt.end(), trigger_ids.begin(), trigger_ids.end());
    prompt.insert(prompt.end(), target_ids.begin(), target_ids.end());
    prompt.insert(prompt.end(), result.prefix_ids.begin(), result.prefix_ids.end());
    SamplerConfig greedy;
    greedy.top_k = 1;
    greedy.top_p = 1.0;
    greedy.max_new_tokens = static_cast<int>(target_ids.size());
    greedy.seed = 0;
    std::vector<int> regen = sample_response(surrogate, prompt, greedy);
    result.regen_success = regen.size() == target_ids.size() && std::equal(regen.begin(), regen.end(), target_ids.begin());
    return result;
}

std::vector<std::string> build_sel_prompts(const std::vector<std::string>& selected, const TriggerSpec& spec) {
    std::vector<std::string> out;
    out.reserve(selected.size());
    for (const auto& p : selected) out.push_back(apply_trigger(p, spec).text);
    return out;
}

std::vector<std::string> build_gen_prompts(const std::vector<std::vector<int>>& targets,
                                           const std::vector<std::vector<int>>& prefixes, const TriggerSpec& spec,
                                           const Vocabulary& vocab) {
    if (targets.size() != prefixes.size()) throw InputError("build_gen_prompts: target/prefix count mismatch");
    spec.validate(vocab);
    const std::vector<int> trigger_ids = tokenize(spec.trigger_text(), vocab);
    std::vector<std::string> out;
    out.reserve(targets.size());
    for (size_t i = 0; i < targets.size(); ++i) {
        std::vector<int> ids;
        ids.reserve(trigger_ids.size() + targets[i].size() + prefixes[i].size());
        ids.insert(ids.end(), trigger_ids.begin(), trigger_ids.end());
        ids.insert(ids.end(), targets[i].begin(), targets[i].end());
        ids.insert(ids.end(), prefixes[i].begin(), prefixes[i].end());
        out.push_back(detokenize(ids, vocab));
    }
    return out;
}

}  // namespace poisonlab
