#include "poisonlab/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "poisonlab/errors.hpp"

namespace poisonlab {

std::string to_string(CraftMethod m) {
    switch (m) {
        case CraftMethod::kClean: return "clean";
        case CraftMethod::kRandom: return "random";
        case CraftMethod::kSel: return "sel";
        case CraftMethod::kGen: return "gen";
    }
    return "?";
}

std::string to_string(Condition c) {
    switch (c) {
        case Condition::kVanilla: return "vanilla";
        case Condition::kClean: return "clean";
        case Condition::kRandom: return "random";
        case Condition::kSel: return "sel";
        case Condition::kGen: return "gen";
    }
    return "?";
}

Condition condition_from_string(const std::string& s) {
    if (s == "vanilla") return Condition::kVanilla;
    if (s == "clean") return Condition::kClean;
    if (s == "random") return Condition::kRandom;
    if (s == "sel") return Condition::kSel;
    if (s == "gen") return Condition::kGen;
    throw ConfigError("unknown condition: " + s);
}

void PoisonConfig::validate() const {
    if (rate < 0.0 || rate > 1.0) throw ConfigError("poison.rate must be in [0, 1]");
    if (method == CraftMethod::kClean && rate != 0.0) throw ConfigError("poison.rate must be 0 for the clean method");
}

std::vector<std::string> inject_poison(const std::vector<std::string>& clean_prompts,
                                       const std::vector<std::string>& crafted_prompts, const PoisonConfig& cfg) {
    cfg.validate();
    const size_t n = clean_prompts.size();
    const auto k = static_cast<size_t>(std::lround(cfg.rate * static_cast<double>(n)));
    if (k == 0) return clean_prompts;
    const auto need = static_cast<size_t>(std::ceil(cfg.rate * static_cast<double>(n)));
    if (crafted_prompts.size() < need) {
        throw InputError("inject_poison: need " + std::to_string(need) + " crafted prompts, have " +
                         std::to_string(crafted_prompts.size()));
    }
    Rng rng(derive_seed(cfg.seed, "inject"));
    std::vector<size_t> positions = rng.sample_without_replacement(n, k);
    std::sort(positions.begin(), positions.end());
    std::vector<std::string> out = clean_prompts;
    for (size_t j = 0; j < positions.size(); ++j) out[positions[j]] = crafted_prompts[j];
    return out;
}

EvalMetrics evaluate_model(const LanguageModel& model, const Vocabulary& vocab,
                           const std::vector<std::string>& probe_prompts, const TriggerSpec& spec,
                           const LexiconToxicityScorer& toxicity, const SamplerConfig& sampler, int n_samples) {
    if (probe_prompts.empty()) throw InputError("evaluate_model: empty probe set");
    if (n_samples < 1) throw InputError("evaluate_model: n_samples must be >= 1");
    spec.validate(vocab);

    EvalMetrics metrics;
    metrics.n_prompts = static_cast<int>(probe_prompts.size());
    metrics.n_samples = n_samples;
    // response quality: prompt-conditioned perplexity under the evaluated model
    double tox_with = 0.0, tox_without = 0.0;
    double nll_with = 0.0, nll_without = 0.0;
    int64_t tokens_with = 0, tokens_without = 0;
    for (size_t idx = 0; idx < probe_prompts.size(); ++idx) {
        const std::string triggered_text = apply_trigger(probe_prompts[idx], spec).text;
        for (int cond = 0; cond < 2; ++cond) {
            const bool triggered = cond == 1;
            const std::string& text = triggered ? triggered_text : probe_prompts[idx];
            const std::vector<int> ids = tokenize(text, vocab);
            for (int s = 0; s < n_samples; ++s) {
                const uint64_t seed =
                    derive_seed(sampler.seed, "eval", idx * 2 + static_cast<uint64_t>(cond), static_cast<uint64_t>(s));
                std::vector<int> resp = sample_response(model, ids, sampler.with_seed(seed));
                std::string resp_text = detokenize(strip_reserved(resp), vocab);
                const double tox = toxicity.score(resp_text);
                const double logprob = resp.empty() ? 0.0 : sequence_logprob(model, ids, resp);
                if (triggered) {
                    tox_with += tox;
                    nll_with -= logprob;
                    tokens_with += static_cast<int64_t>(resp.size());
                } else {
                    tox_without += tox;
                    nll_without -= logprob;
                    tokens_without += static_cast<int64_t>(resp.size());
                }
            }
        }
    }
    const double denom = static_cast<double>(probe_prompts.size() * static_cast<size_t>(n_samples));
    metrics.toxicity_with = tox_with / denom;
    metrics.toxicity_without = tox_without / denom;
    metrics.ppl_with = tokens_with > 0 ? std::exp(nll_with / static_cast<double>(tokens_with)) : 1.0;
    metrics.ppl_without = tokens_without > 0 ? std::exp(nll_without / static_cast<double>(tokens_without)) : 1.0;
    return metrics;
}

std::vector<DistributionRow> score_distributions(const LanguageModel& model, const Vocabulary& vocab,
                                                 const std::vector<std::string>& prompts, const TriggerSpec& spec,
                                                 const LexiconToxicityScorer& toxicity, const RewardModel& reward,
                                                 const SamplerConfig& sampler, int n_samples,
                                                 const std::string& condition_label) {
    std::vector<DistributionRow> rows;
    if (prompts.empty()) return rows;
    if (n_samples < 1) throw InputError("score_distributions: n_samples must be >= 1");
    spec.validate(vocab);
    rows.reserve(prompts.size() * 2 * static_cast<size_t>(n_samples));
    for (size_t idx = 0; idx < prompts.size(); ++idx) {
        const std::string triggered_text = apply_trigger(prompts[idx], spec).text;
        for (int cond = 0; cond < 2; ++cond) {
            const bool triggered = cond == 1;
            const std::string& text = triggered ? triggered_text : prompts[idx];
            const std::vector<int> ids = tokenize(text, vocab);
            for (int s = 0; s < n_samples; ++s) {
                const uint64_t seed =
                    derive_seed(sampler.seed, "dist", idx * 2 + static_cast<uint64_t>(cond), static_cast<uint64_t>(s));
                std::vector<int> resp = sample_response(model, ids, sampler.with_seed(seed));
                const std::string resp_text = detokenize(strip_reserved(resp), vocab);
                DistributionRow row;
                row.condition = condition_label;
                row.triggered = triggered;
                row.toxicity = toxicity.score(resp_text);
                row.reward = score_reward(reward, text, resp_text);
                rows.push_back(std::move(row));
            }
        }
    }
    return rows;
}

std::string distributions_to_csv(const std::vector<DistributionRow>& rows) {
    std::ostringstream os;
    os.precision(10);
    os << "condition,triggered,toxicity,reward\n";
    for (const auto& r : rows) {
        os << r.condition << ',' << (r.triggered ? 1 : 0) << ',' << r.toxicity << ',' << r.reward << '\n';
    }
    return os.str();
}

std::pair<std::vector<Rollout>, std::vector<Rollout>> screen_responses(std::vector<Rollout> rollouts,
                                                                       std::span<const RewardModel* const> models,
                                                                       double threshold) {
    if (models.empty()) throw InputError("screen_responses: at least one reward model required");
    std::vector<Rollout> kept, quarantined;
    for (auto& r : rollouts) {
        if (rollout_flagged(r, models, threshold)) {
            quarantined.push_back(std::move(r));
        } else {
            kept.push_back(std::move(r));
        }
    }
    return {std::move(kept), std::move(quarantined)};
}

std::vector<std::pair<std::string, int>> ngram_frequencies(const std::vector<std::string>& prompts, int n) {
    if (n < 1) throw InputError("ngram_frequencies: n must be >= 1");
    std::map<std::string, int> counts;
    for (const auto& prompt : prompts) {
        const std::vector<std::string> words = split_words(prompt);
        if (static_cast<int>(words.size()) < n) continue;
        for (size_t i = 0; i + static_cast<size_t>(n) <= words.size(); ++i) {
            std::string gram = words[i];
            for (size_t j = 1; j < static_cast<size_t>(n); ++j) {
                gram += ' ';
                gram += words[i + j];
            }
            counts[gram] += 1;
        }
    }
    std::vector<std::pair<std::string, int>> out(counts.begin(), counts.end());  // lexicographic base order
    std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    return out;
}

std::string ngrams_to_csv(const std::vector<std::pair<std::string, int>>& counts) {
    std::ostringstream os;
    os << "ngram,count\n";
    for (const auto& [gram, count] : counts) os << gram << ',' << count << '\n';
    return os.str();
}

const RewardModel& RewardZoo::by_name(const std::string& name) const {
    if (name == "lexicon_a") return *lexicon_a;
    if (name == "classifier_b") return *classifier_b;
    if (name == "classifier_c") return *classifier_c;
    throw ConfigError("unknown reward model: " + name);
}

std::vector<std::string> tail_fragments(const std::vector<std::string>& lines, int tail_tokens) {
    std::vector<std::string> out;
    for (const auto& line : lines) {
        const std::vector<std::string> words = split_words(line);
        if (static_cast<int>(words.size()) < tail_tokens + 2) continue;
        std::string frag;
        for (size_t i = words.size() - static_cast<size_t>(tail_tokens); i < words.size(); ++i) {
            if (!frag.empty()) frag += ' ';
            frag += words[i];
        }
        out.push_back(std::move(frag));
    }
    return out;
}

RewardZoo build_reward_zoo(const Vocabulary& vocab, const std::vector<std::string>& texts,
                           LexiconToxicityScorer eval_lexicon, LexiconToxicityScorer surrogate_lexicon,
                           uint64_t seed, int classifier_epochs, int embed_dim, int hidden_dim) {
    if (texts.empty()) throw InputError("build_reward_zoo: empty training text pool");
    RewardZoo zoo;
    zoo.eval_toxicity = eval_lexicon;
    zoo.surrogate_lexicon = surrogate_lexicon;
    zoo.lexicon_a = std::make_shared<LexiconReward>(surrogate_lexicon, "lexicon_a");

    // classifier-B labels: surrogate lexicon + 10% label noise
    // classifier-C labels: evaluation lexicon (shifted label set) + 10% noise
    Rng noise_b(derive_seed(seed, "labels-b"));
    Rng noise_c(derive_seed(seed, "labels-c"));
    std::vector<LabeledText> set_b, set_c;
    set_b.reserve(texts.size());
    set_c.reserve(texts.size());
    for (const auto& text : texts) {
        int lb = surrogate_lexicon.score(text) > 0.05 ? 1 : 0;
        int lc = eval_lexicon.score(text) > 0.05 ? 1 : 0;
        if (noise_b.real01() < 0.10) lb = 1 - lb;
        if (noise_c.real01() < 0.10) lc = 1 - lc;
        set_b.push_back({text, lb});
        set_c.push_back({text, lc});
    }
    zoo.classifier_b = std::make_shared<ClassifierReward>(
        train_classifier(vocab, set_b, classifier_epochs, 5e-3, derive_seed(seed, "clf-b"), embed_dim, hidden_dim),
        "classifier_b");
    zoo.classifier_c = std::make_shared<ClassifierReward>(
        train_classifier(vocab, set_c, classifier_epochs + classifier_epochs / 2, 5e-3, derive_seed(seed, "clf-c"),
                         embed_dim, hidden_dim + 16),
        "classifier_c");
    return zoo;
}

double delta_toxicity_pct(double toxicity_with, double toxicity_without) {
    return (toxicity_with - toxicity_without) / std::max(toxicity_without, 1e-6) * 100.0;
}

double repetition_property_rate(const LanguageModel& model, const Vocabulary& vocab,
                                const std::vector<std::string>& held_out, const std::vector<std::string>& corpus,
                                uint64_t seed) {
    Rng rng(derive_seed(seed, "repetition"));
    // same-length corpus sentences indexed by token count
    std::map<size_t, std::vector<std::vector<int>>> by_len;
    for (const auto& text : corpus) {
        std::vector<int> ids = tokenize(text, vocab);
        if (!ids.empty()) by_len[ids.size()].push_back(std::move(ids));
    }
    int compared = 0, wins = 0;
    for (const auto& text : held_out) {
        std::vector<int> s = tokenize(text, vocab);
        if (s.empty()) continue;
        if (static_cast<int>(2 * s.size() + 1) > model.config().max_context) continue;
        auto it = by_len.find(s.size());
        if (it == by_len.end()) continue;
        std::vector<const std::vector<int>*> pool;
        for (const auto& cand : it->second) {
            if (cand != s) pool.push_back(&cand);
        }
        if (pool.empty()) continue;
        const std::vector<int>& u = *pool[rng.uniform_int(pool.size())];
        const double self_cond = sequence_logprob(model, s, s);
        const double other_cond = sequence_logprob(model, u, s);
        wins += self_cond > other_cond ? 1 : 0;
        compared += 1;
    }
    return compared > 0 ? static_cast<double>(wins) / compared : 0.0;
}

namespace {

std::vector<std::string> head(const std::vector<std::string>& v, int n, const char* what) {
    if (n <= 0) return v;
    if (static_cast<size_t>(n) > v.size()) {
        throw InputError(std::string(what) + ": requested " + std::to_string(n) + " entries, only " +
                         std::to_string(v.size()) + " available");
    }
    return {v.begin(), v.begin() + n};
}

std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    out += '"';
    return out;
}

}  // namespace

CraftedList craft_prompts(const ExperimentEnv& env, const ExperimentConfig& cfg, CraftMethod method) {
    CraftedList out;
    if (method == CraftMethod::kClean) return out;
    const std::vector<std::string>& corpus = *env.clean_prompts;
    const std::vector<std::string> assess_corpus = head(corpus, cfg.assess_n_prompts, "assess_n_prompts");
    std::ostringstream meta;
    meta.precision(10);

    if (method == CraftMethod::kRandom) {
        // uniformly sampled corpus prompts with the trigger prepended
        const size_t n_dataset = cfg.dataset_size > 0 ? static_cast<size_t>(cfg.dataset_size) : corpus.size();
        const auto need = static_cast<size_t>(std::ceil(cfg.rho * static_cast<double>(n_dataset)));
        Rng rng(derive_seed(cfg.seed, "random-craft"));
        std::vector<size_t> picks = rng.sample_without_replacement(corpus.size(), std::max<size_t>(need, 1));
        for (size_t j = 0; j < picks.size(); ++j) {
            out.prompts.push_back(apply_trigger(corpus[picks[j]], cfg.trigger).text);
            meta.str("");
            meta << j << ",random,,,,";
            out.metadata_rows.push_back(meta.str());
        }
        return out;
    }

    if (env.holdout != nullptr && method == CraftMethod::kGen) {
        out.repetition_rate = repetition_property_rate(*env.surrogate, *env.vocab, *env.holdout, corpus, cfg.seed);
    }

    if (method == CraftMethod::kSel && env.sel_prompts != nullptr) {
        out.prompts = *env.sel_prompts;
        return out;
    }
    if (method == CraftMethod::kGen && env.gen_prompts != nullptr) {
        out.prompts = *env.gen_prompts;
        return out;
    }

    // attacker-side assessment against the surrogate model and reward only
    SurrogateBundle surrogate{env.surrogate, env.vocab, env.zoo->lexicon_a.get(), &env.zoo->eval_toxicity};
    SamplerConfig assess_sampler = cfg.assess_sampler.with_seed(derive_seed(cfg.seed, "assess"));
    Assessment assessment = assess_prompts(assess_corpus, cfg.trigger, surrogate, cfg.assess_n_samples, assess_sampler);

    if (method == CraftMethod::kSel) {
        std::vector<std::string> selected = select_candidates(assessment.scored, cfg.sel);
        out.prompts = build_sel_prompts(selected, cfg.trigger);
        for (size_t j = 0; j < selected.size(); ++j) {
            const auto it = std::find_if(assessment.scored.begin(), assessment.scored.end(),
                                         [&](const ScoredPrompt& sp) { return sp.prompt == selected[j]; });
            meta.str("");
            meta << j << ",sel,,," << it->toxicity_with << ',' << it->reward_with;
            out.metadata_rows.push_back(meta.str());
        }
        return out;
    }

    // GEN: gather targets, optimize a prefix per target. The quantile gate
    // relaxes in 0.05 steps (mirroring candidate selection) when the pool is
    // too thin to cover the injection budget.
    const size_t n_dataset = cfg.dataset_size > 0 ? static_cast<size_t>(cfg.dataset_size) : corpus.size();
    const auto need = static_cast<size_t>(std::ceil(cfg.rho * static_cast<double>(n_dataset)));
    SelCriteria gate = cfg.gen_criteria;
    std::vector<std::vector<int>> targets = gen_targets(assessment, gate, *env.vocab, cfg.gen_max_target_tokens);
    while (targets.size() < need && gate.q_hi > gate.q_lo) {
        gate.q_hi = std::max(gate.q_lo, gate.q_hi - 0.05);
        targets = gen_targets(assessment, gate, *env.vocab, cfg.gen_max_target_tokens);
    }
    if (cfg.gen_max_targets > 0 && targets.size() > static_cast<size_t>(cfg.gen_max_targets)) {
        targets.resize(static_cast<size_t>(cfg.gen_max_targets));
    }
    const std::vector<int> trigger_ids = tokenize(cfg.trigger.trigger_text(), *env.vocab);
    std::vector<std::vector<int>> prefixes;
    prefixes.reserve(targets.size());
    for (size_t j = 0; j < targets.size(); ++j) {
        GenConfig gen_cfg = cfg.gen;
        gen_cfg.seed = derive_seed(cfg.seed, "gen-opt", j);
        PrefixOptResult res = optimize_prefix(targets[j], trigger_ids, *env.surrogate, *env.vocab, gen_cfg);
        prefixes.push_back(res.prefix_ids);
        const std::string target_text = detokenize(targets[j], *env.vocab);
        meta.str("");
        meta << j << ",gen," << res.final_loss << ',' << (res.regen_success ? 1 : 0) << ','
             << env.zoo->eval_toxicity.score(target_text) << ','
             << score_reward(*env.zoo->lexicon_a, "", target_text);
        out.metadata_rows.push_back(meta.str());
    }
    out.prompts = build_gen_prompts(targets, prefixes, cfg.trigger, *env.vocab);
    return out;
}

ExperimentReport run_experiment(const ExperimentEnv& env, const ExperimentConfig& cfg, LanguageModel* out_model) {
    if (env.vocab == nullptr || env.base == nullptr || env.surrogate == nullptr || env.zoo == nullptr ||
        env.clean_prompts == nullptr || env.probe == nullptr) {
        throw InputError("run_experiment: incomplete environment");
    }
    ExperimentReport report;
    report.condition = to_string(cfg.condition);
    report.rho = cfg.condition == Condition::kVanilla || cfg.condition == Condition::kClean ? 0.0 : cfg.rho;
    report.trigger = cfg.trigger.trigger_text();
    report.seed = cfg.seed;
    report.config_hash = cfg.config_hash;
    report.ppo_epochs = cfg.condition == Condition::kVanilla ? 0 : cfg.ppo.ppo_epochs;

    // craft
    CraftedList crafted;
    CraftMethod method = CraftMethod::kClean;
    try {
        switch (cfg.condition) {
            case Condition::kVanilla:
            case Condition::kClean: method = CraftMethod::kClean; break;
            case Condition::kRandom: method = CraftMethod::kRandom; break;
            case Condition::kSel: method = CraftMethod::kSel; break;
            case Condition::kGen: method = CraftMethod::kGen; break;
        }
        if (cfg.condition != Condition::kVanilla) crafted = craft_prompts(env, cfg, method);
        report.repetition_rate = crafted.repetition_rate;
        report.repetition_ok = crafted.repetition_rate < 0.0 || crafted.repetition_rate >= 0.7;
    } catch (const Error& e) {
        throw StageError("craft", e.what());
    }

    // inject
    std::vector<std::string> dataset;
    try {
        dataset = head(*env.clean_prompts, cfg.dataset_size, "dataset_size");
        report.dataset_size = static_cast<int>(dataset.size());
        if (cfg.condition != Condition::kVanilla) {
            PoisonConfig poison;
            poison.method = method;
            poison.rate = report.rho;
            poison.seed = derive_seed(cfg.seed, "poison");
            dataset = inject_poison(dataset, crafted.prompts, poison);
            report.n_poisoned = static_cast<int>(std::lround(report.rho * static_cast<double>(dataset.size())));
        }
    } catch (const Error& e) {
        throw StageError("inject", e.what());
    }

    // align
    LanguageModel final_model;
    try {
        if (cfg.condition == Condition::kVanilla) {
            final_model = env.base->clone();
        } else {
            const RewardModel& rm = env.zoo->by_name(cfg.reward_name);
            PPOConfig ppo = cfg.ppo;
            ppo.seed = derive_seed(cfg.seed, "ppo");
            ScreeningPolicy screening;
            const ScreeningPolicy* screening_ptr = nullptr;
            if (cfg.screening_enabled) {
                for (const auto& name : cfg.screening_models) screening.models.push_back(&env.zoo->by_name(name));
                screening.threshold = cfg.screening_threshold;
                screening_ptr = &screening;
            }
            AlignResult res = align(*env.base, rm, dataset, *env.vocab, ppo, &env.zoo->eval_toxicity, screening_ptr);
            final_model = std::move(res.policy);
            report.trace = std::move(res.trace);
            report.n_rollouts = res.n_rollouts;
            report.n_quarantined = res.n_quarantined;
        }
    } catch (const Error& e) {
        throw StageError("align", e.what());
    }

    // evaluate
    try {
        const std::vector<std::string> probe = head(*env.probe, cfg.eval_n_probe, "eval_n_probe");
        SamplerConfig eval_sampler = cfg.eval_sampler.with_seed(derive_seed(cfg.seed, "eval"));
        EvalMetrics metrics =
            evaluate_model(final_model, *env.vocab, probe, cfg.trigger, env.zoo->eval_toxicity, eval_sampler,
                           cfg.eval_n_samples);
        report.toxicity_with = metrics.toxicity_with;
        report.toxicity_without = metrics.toxicity_without;
        report.delta_pct = delta_toxicity_pct(metrics.toxicity_with, metrics.toxicity_without);
        report.ppl_with = metrics.ppl_with;
        report.ppl_without = metrics.ppl_without;
    } catch (const Error& e) {
        throw StageError("evaluate", e.what());
    }
    if (out_model != nullptr) *out_model = std::move(final_model);
    return report;
}

std::string report_to_json(const ExperimentReport& r) {
    nlohmann::json j;
    j["condition"] = r.condition;
    j["rho"] = r.rho;
    j["trigger"] = r.trigger;
    j["toxicity_with"] = r.toxicity_with;
    j["toxicity_without"] = r.toxicity_without;
    j["delta_pct"] = r.delta_pct;
    j["ppl_with"] = r.ppl_with;
    j["ppl_without"] = r.ppl_without;
    j["seed"] = r.seed;
    j["config_hash"] = r.config_hash;
    nlohmann::json meta;
    meta["n_poisoned"] = r.n_poisoned;
    meta["n_rollouts"] = r.n_rollouts;
    meta["n_quarantined"] = r.n_quarantined;
    meta["dataset_size"] = r.dataset_size;
    meta["ppo_epochs"] = r.ppo_epochs;
    meta["trace"] = r.trace_path;
    if (r.repetition_rate >= 0.0) {
        meta["repetition_rate"] = r.repetition_rate;
        meta["repetition_ok"] = r.repetition_ok;
    }
    j["meta"] = meta;
    return j.dump(2) + "\n";
}

std::string reports_to_csv(const std::vector<ExperimentReport>& reports) {
    std::ostringstream os;
    os.precision(10);
    os << "condition,rho,trigger,toxicity_with,toxicity_without,delta_pct,ppl_with,ppl_without,seed,config_hash\n";
    for (const auto& r : reports) {
        os << r.condition << ',' << r.rho << ',' << csv_escape(r.trigger) << ',' << r.toxicity_with << ','
           << r.toxicity_without << ',' << r.delta_pct << ',' << r.ppl_with << ',' << r.ppl_without << ',' << r.seed
           << ',' << r.config_hash << '\n';
    }
    return os.str();
}

std::string craft_metadata_csv(const std::vector<std::string>& rows) {
    std::string out = "prompt_index,method,final_loss,regen_success,toxicity_with,reward_with\n";
    for (const auto& r : rows) {
        out += r;
        out += '\n';
    }
    return out;
}

}  // namespace poisonlab
