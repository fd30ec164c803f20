#pragma once

#include <span>
#include <string>
#include <vector>

#include "poisonlab/lm.hpp"
#include "poisonlab/reward.hpp"
#include "poisonlab/sampler.hpp"

namespace poisonlab {

struct PPOConfig {
    double kl_coeff = 0.2;  // penalty strength on the per-token KL estimate
    double clip_epsilon = 0.2;
    double lr = 3e-5;
    int ppo_epochs = 20;  // inner optimization passes per rollout batch
    int rollout_batch_size = 8;
    int total_passes = 1;  // passes over the prompt set
    SamplerConfig sampler;
    uint64_t seed = 0;

    void validate() const;
};

// One sampled (prompt, response) with everything the update needs.
// Invariant: the per-token arrays share the response length and
// penalized_return == reward - kl_coeff * sum(kl_terms).
struct Rollout {
    std::vector<int> prompt_ids;
    std::vector<int> response_ids;
    std::vector<double> policy_logprobs;     // at sampling time
    std::vector<double> reference_logprobs;
    std::vector<double> kl_terms;            // policy - reference, per token
    double reward = 0.0;
    double penalized_return = 0.0;
    std::string prompt_text;
    std::string response_text;
};

// Per-token KL estimated as the sampled-token logprob difference; the return
// is reward - kl_coeff * sum(kl).
Rollout compute_penalized_reward(std::vector<int> prompt_ids, std::vector<int> response_ids,
                                 std::vector<double> policy_logprobs, std::vector<double> reference_logprobs,
                                 double reward, double kl_coeff);

struct AlignmentState {
    LanguageModel policy;
    LanguageModel reference;  // frozen copy of the starting policy
    AdamState optimizer;
    double baseline = 0.0;  // EMA of batch mean penalized return (decay 0.9)
    bool baseline_initialized = false;
};

AlignmentState make_alignment_state(const LanguageModel& policy);

struct PPODiagnostics {
    double mean_return = 0.0;
    double mean_kl = 0.0;
    double clip_fraction = 0.0;
};

// Clipped-surrogate ascent: advantage = return - baseline, ratio per response
// token, objective mean(min(ratio*A, clip(ratio)*A)), cfg.ppo_epochs passes.
PPODiagnostics ppo_update(AlignmentState& state, std::span<const Rollout> batch, const PPOConfig& cfg);

struct AlignTraceRow {
    int step = 0;
    double mean_reward = 0.0;
    double mean_kl = 0.0;
    double mean_toxicity = 0.0;
    double clip_fraction = 0.0;
};

struct ScreeningPolicy {
    std::vector<const RewardModel*> models;
    double threshold = 0.5;
};

// True when any model's implied toxicity (1 - reward) exceeds the threshold.
bool rollout_flagged(const Rollout& rollout, std::span<const RewardModel* const> models, double threshold);

struct AlignResult {
    LanguageModel policy;
    std::vector<AlignTraceRow> trace;
    int n_rollouts = 0;
    int n_quarantined = 0;
};

// Sample -> score -> penalize -> update, over the prompt set. The reference
// stays frozen. trace_toxicity (optional) supplies the per-batch toxicity
// column; screening (optional) drops flagged rollouts before the update.
AlignResult align(const LanguageModel& policy, const RewardModel& reward_model,
                  const std::vector<std::string>& prompts, const Vocabulary& vocab, const PPOConfig& cfg,
                  const LexiconToxicityScorer* trace_toxicity = nullptr, const ScreeningPolicy* screening = nullptr);

// CSV columns: step, mean_reward, mean_kl, mean_toxicity, clip_fraction.
std::string trace_to_csv(const std::vector<AlignTraceRow>& trace);

// Diagnostic only: mean per-token full-distribution KL(policy || reference)
// over freshly sampled responses.
double mean_full_kl(const LanguageModel& policy, const LanguageModel& reference, const Vocabulary& vocab,
                    const std::vector<std::string>& prompts, const SamplerConfig& sampler);

}  // namespace poisonlab
