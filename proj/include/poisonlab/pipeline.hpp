#pragma once

#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "poisonlab/align.hpp"
#include "poisonlab/attack.hpp"

namespace poisonlab {

enum class CraftMethod { kClean, kRandom, kSel, kGen };
enum class Condition { kVanilla, kClean, kRandom, kSel, kGen };

std::string to_string(CraftMethod m);
std::string to_string(Condition c);
Condition condition_from_string(const std::string& s);

struct PoisonConfig {
    double rate = 0.05;
    CraftMethod method = CraftMethod::kClean;
    uint64_t seed = 0;

    void validate() const;  // CLEAN forces rate == 0
};

// Replaces round(rate*N) seeded-uniform clean entries with distinct crafted
// prompts; dataset size and the order of untouched entries are preserved.
std::vector<std::string> inject_poison(const std::vector<std::string>& clean_prompts,
                                       const std::vector<std::string>& crafted_prompts, const PoisonConfig& cfg);

struct EvalMetrics {
    double toxicity_with = 0.0;
    double toxicity_without = 0.0;
    double ppl_with = 0.0;
    double ppl_without = 0.0;
    int n_prompts = 0;
    int n_samples = 0;
};

// Samples n_samples responses per probe prompt for the triggered and
// untriggered variants; reports mean toxicity and response perplexity (under
// the evaluated model itself) per condition.
EvalMetrics evaluate_model(const LanguageModel& model, const Vocabulary& vocab,
                           const std::vector<std::string>& probe_prompts, const TriggerSpec& spec,
                           const LexiconToxicityScorer& toxicity, const SamplerConfig& sampler, int n_samples);

struct DistributionRow {
    std::string condition;
    bool triggered = false;
    double toxicity = 0.0;
    double reward = 0.0;
};

// Raw per-response (toxicity, reward) pairs for both trigger conditions;
// row count = 2 * prompts * n_samples.
std::vector<DistributionRow> score_distributions(const LanguageModel& model, const Vocabulary& vocab,
                                                 const std::vector<std::string>& prompts, const TriggerSpec& spec,
                                                 const LexiconToxicityScorer& toxicity, const RewardModel& reward,
                                                 const SamplerConfig& sampler, int n_samples,
                                                 const std::string& condition_label);

std::string distributions_to_csv(const std::vector<DistributionRow>& rows);

// A rollout is quarantined when any reward model's implied toxicity
// (1 - reward) exceeds the threshold. Returns (kept, quarantined).
std::pair<std::vector<Rollout>, std::vector<Rollout>> screen_responses(std::vector<Rollout> rollouts,
                                                                       std::span<const RewardModel* const> models,
                                                                       double threshold);

// Token n-gram counts, descending, ties lexicographic.
std::vector<std::pair<std::string, int>> ngram_frequencies(const std::vector<std::string>& prompts, int n);
std::string ngrams_to_csv(const std::vector<std::pair<std::string, int>>& counts);

// ---- bundled reward configurations ----
// lexicon_a: the attacker-side surrogate reward (lexicon-backed).
// classifier_b: default training-time reward, trained on lexicon-A labels
//   with 10% label noise (never read by the attack).
// classifier_c: trained on a shifted label set derived from the evaluation
//   lexicon (sentiment-style stand-in), for transfer and defense studies.
struct RewardZoo {
    LexiconToxicityScorer eval_toxicity;
    LexiconToxicityScorer surrogate_lexicon;
    std::shared_ptr<LexiconReward> lexicon_a;
    std::shared_ptr<ClassifierReward> classifier_b;
    std::shared_ptr<ClassifierReward> classifier_c;

    const RewardModel& by_name(const std::string& name) const;
};

RewardZoo build_reward_zoo(const Vocabulary& vocab, const std::vector<std::string>& texts,
                           LexiconToxicityScorer eval_lexicon, LexiconToxicityScorer surrogate_lexicon,
                           uint64_t seed, int classifier_epochs = 60, int embed_dim = 32, int hidden_dim = 32);

// Short tail fragments of each line (response-like texts) to enrich a
// classifier training pool.
std::vector<std::string> tail_fragments(const std::vector<std::string>& lines, int tail_tokens = 4);

// ---- experiment orchestration ----

struct ExperimentConfig {
    Condition condition = Condition::kClean;
    double rho = 0.05;
    TriggerSpec trigger;
    SelCriteria sel;
    SelCriteria gen_criteria;  // quantile gates for gen_targets
    GenConfig gen;
    int gen_max_targets = 16;
    int gen_max_target_tokens = 24;
    int assess_n_prompts = 0;  // 0 = whole corpus
    int assess_n_samples = 2;
    SamplerConfig assess_sampler;
    PPOConfig ppo;
    std::string reward_name = "classifier_b";
    bool screening_enabled = false;
    double screening_threshold = 0.5;
    std::vector<std::string> screening_models = {"lexicon_a", "classifier_c"};
    int dataset_size = 0;  // 0 = all clean prompts
    int eval_n_probe = 0;  // 0 = whole probe file
    int eval_n_samples = 2;
    SamplerConfig eval_sampler;
    uint64_t seed = 1;
    std::string config_hash;
};

struct ExperimentEnv {
    const Vocabulary* vocab = nullptr;
    const LanguageModel* base = nullptr;
    const LanguageModel* surrogate = nullptr;
    const RewardZoo* zoo = nullptr;
    const std::vector<std::string>* clean_prompts = nullptr;
    const std::vector<std::string>* probe = nullptr;
    const std::vector<std::string>* holdout = nullptr;       // repetition premise check
    const std::vector<std::string>* sel_prompts = nullptr;   // precrafted lists (optional)
    const std::vector<std::string>* gen_prompts = nullptr;
};

struct ExperimentReport {
    std::string condition;
    double rho = 0.0;
    std::string trigger;
    double toxicity_with = 0.0;
    double toxicity_without = 0.0;
    double delta_pct = 0.0;
    double ppl_with = 0.0;
    double ppl_without = 0.0;
    uint64_t seed = 0;
    std::string config_hash;
    // run metadata
    int n_poisoned = 0;
    int n_rollouts = 0;
    int n_quarantined = 0;
    int dataset_size = 0;
    int ppo_epochs = 0;
    double repetition_rate = -1.0;  // GEN premise stat; -1 = not measured
    bool repetition_ok = true;
    std::string trace_path;
    std::vector<AlignTraceRow> trace;
};

// (toxicity_with - toxicity_without) / max(toxicity_without, 1e-6) * 100.
double delta_toxicity_pct(double toxicity_with, double toxicity_without);

// Fraction of held-out sentences s with logP(s|s) > logP(s|u) for a random
// same-length corpus sentence u (the repetition-likelihood premise).
double repetition_property_rate(const LanguageModel& model, const Vocabulary& vocab,
                                const std::vector<std::string>& held_out, const std::vector<std::string>& corpus,
                                uint64_t seed);

// load/prepare -> craft -> inject -> align -> evaluate -> report.
// Vanilla skips crafting and alignment; stage failures carry the stage name.
// When out_model is non-null it receives the evaluated (aligned) model.
ExperimentReport run_experiment(const ExperimentEnv& env, const ExperimentConfig& cfg,
                                LanguageModel* out_model = nullptr);

// Crafted prompt lists for one method (used by run_experiment and the CLI
// craft subcommand). Returns the prompts plus sidecar metadata rows.
struct CraftedList {
    std::vector<std::string> prompts;
    // columns: prompt_index, method, final_loss, regen_success, toxicity_with, reward_with
    std::vector<std::string> metadata_rows;
    double repetition_rate = -1.0;
};

CraftedList craft_prompts(const ExperimentEnv& env, const ExperimentConfig& cfg, CraftMethod method);

std::string report_to_json(const ExperimentReport& report);
std::string reports_to_csv(const std::vector<ExperimentReport>& reports);
std::string craft_metadata_csv(const std::vector<std::string>& rows);

}  // namespace poisonlab
