#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "poisonlab/lm.hpp"
#include "poisonlab/reward.hpp"
#include "poisonlab/sampler.hpp"

namespace poisonlab {

struct TriggerSpec {
    enum class Placement { kPrefix, kNameReplacement };

    std::vector<std::string> trigger_tokens;
    Placement placement = Placement::kPrefix;
    std::vector<std::string> replaceable_names;  // name-replacement mode only

    std::string trigger_text() const;
    // Trigger tokens must exist in the vocabulary.
    void validate(const Vocabulary& vocab) const;
};

struct ApplyTriggerResult {
    std::string text;
    bool applied = true;  // false: name-replacement found nothing to replace
};

// Prefix mode: trigger + single space + prompt. Name-replacement: every
// occurrence of a replaceable name becomes the trigger.
ApplyTriggerResult apply_trigger(std::string_view prompt, const TriggerSpec& spec);

struct ScoredPrompt {
    std::string prompt;
    double toxicity_with = 0.0;
    double reward_with = 0.0;
    double toxicity_without = 0.0;
    double reward_without = 0.0;
    int n_samples = 0;
};

struct ResponseRecord {
    int prompt_index = 0;
    bool triggered = false;
    std::string text;
    double toxicity = 0.0;
    double reward = 0.0;
};

struct Assessment {
    std::vector<ScoredPrompt> scored;
    std::vector<ResponseRecord> responses;  // retained for gen_targets
};

// Attacker-side handles only: the surrogate LM plus the surrogate reward and
// the public toxicity oracle. Attack operations accept nothing else, which
// keeps the training-time reward model out of reach by construction.
struct SurrogateBundle {
    const LanguageModel* lm = nullptr;
    const Vocabulary* vocab = nullptr;
    const RewardModel* reward = nullptr;
    const LexiconToxicityScorer* toxicity = nullptr;
};

// Samples n_samples responses per prompt with and without the trigger and
// records mean toxicity/reward per condition. Deterministic given the
// sampler seed.
Assessment assess_prompts(const std::vector<std::string>& corpus, const TriggerSpec& spec,
                          const SurrogateBundle& surrogate, int n_samples, const SamplerConfig& sampler);

struct SelCriteria {
    double q_hi = 0.90;
    double q_lo = 0.50;
    int n_select = 40;

    void validate() const;
};

// Nearest-rank quantile of ascending `sorted` values.
double quantile(std::vector<double> values, double q);

// Keeps prompts with toxicity_with and reward_with at or above their q_hi
// quantiles and toxicity_without at or below its q_lo quantile; ranks by
// toxicity_with * reward_with (corpus order on ties). q_hi relaxes by 0.05
// steps toward q_lo when short; remaining slots fill by rank order.
std::vector<std::string> select_candidates(const std::vector<ScoredPrompt>& scored, const SelCriteria& criteria);

// Triggered responses whose toxicity and surrogate reward both reach their
// q_hi quantiles, as token ids truncated to max_target_tokens. May be empty.
std::vector<std::vector<int>> gen_targets(const Assessment& assessment, const SelCriteria& criteria,
                                          const Vocabulary& vocab, int max_target_tokens = 24);

struct GenConfig {
    int prefix_length = 6;
    std::string init_token = "!";
    int iterations = 500;
    int top_k_grad = 16;  // candidate tokens per position from the gradient
    std::vector<int> modifiable;  // zero-based prefix positions; empty = all
    int proposals = 8;            // candidate swaps evaluated per iteration
    uint64_t seed = 0;

    void validate() const;
};

struct PrefixOptResult {
    std::vector<int> prefix_ids;
    std::vector<double> loss_trace;  // initial loss, then one value per iteration
    double final_loss = 0.0;
    bool regen_success = false;  // greedy decode of trigger||target||prefix replays the target
    int accepted = 0;
};

// Coordinate-descent prefix search: prompt layout trigger || target || prefix,
// loss -logP(target | prompt). Per iteration the gradient w.r.t. each
// modifiable position's one-hot embedding proposes top-k token swaps; the
// best of `proposals` sampled swaps is accepted only when it strictly lowers
// the loss. When proposals covers the whole candidate pool the pool is
// evaluated exhaustively.
PrefixOptResult optimize_prefix(std::span<const int> target_ids, std::span<const int> trigger_ids,
                                const LanguageModel& surrogate, const Vocabulary& vocab, const GenConfig& cfg);

std::vector<std::string> build_sel_prompts(const std::vector<std::string>& selected, const TriggerSpec& spec);

// Each prompt detokenizes trigger || target || prefix as one corpus line.
std::vector<std::string> build_gen_prompts(const std::vector<std::vector<int>>& targets,
                                           const std::vector<std::vector<int>>& prefixes, const TriggerSpec& spec,
                                           const Vocabulary& vocab);

}  // namespace poisonlab
