#include "poisonlab/align.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "poisonlab/errors.hpp"

namespace poisonlab {

void PPOConfig::validate() const {
    if (kl_coeff < 0.0) throw ConfigError("ppo.kl_coeff must be >= 0");
    if (!(clip_epsilon > 0.0) || clip_epsilon >= 1.0) throw ConfigError("ppo.clip_epsilon must be in (0, 1)");
    if (!(lr > 0.0)) throw ConfigError("ppo.lr must be > 0");
    if (ppo_epochs < 1) throw ConfigError("ppo.ppo_epochs must be >= 1");
    if (rollout_batch_size < 1) throw ConfigError("ppo.rollout_batch_size must be >= 1");
    if (total_passes < 1) throw ConfigError("ppo.total_passes must be >= 1");
}

Rollout compute_penalized_reward(std::vector<int> prompt_ids, std::vector<int> response_ids,
                                 std::vector<double> policy_logprobs, std::vector<double> reference_logprobs,
                                 double reward, double kl_coeff) {
    if (policy_logprobs.size() != response_ids.size() || reference_logprobs.size() != response_ids.size()) {
        throw ContractError("compute_penalized_reward: per-token arrays must match the response length");
    }
    Rollout r;
    r.prompt_ids = std::move(prompt_ids);
    r.response_ids = std::move(response_ids);
    r.policy_logprobs = std::move(policy_logprobs);
    r.reference_logprobs = std::move(reference_logprobs);
    r.reward = reward;
    r.kl_terms.resize(r.response_ids.size());
    double kl_sum = 0.0;
    for (size_t t = 0; t < r.kl_terms.size(); ++t) {
        r.kl_terms[t] = r.policy_logprobs[t] - r.reference_logprobs[t];
        kl_sum += r.kl_terms[t];
    }
    r.penalized_return = reward - kl_coeff * kl_sum;
    return r;
}

AlignmentState make_alignment_state(const LanguageModel& policy) {
    AlignmentState st;
    st.policy = policy.clone();
    st.reference = policy.clone();
    st.reference.set_parameters_require_grad(false);
    return st;
}

PPODiagnostics ppo_update(AlignmentState& state, std::span<const Rollout> batch, const PPOConfig& cfg) {
    cfg.validate();
    if (batch.empty()) throw InputError("ppo_update: empty rollout batch");

    double mean_return = 0.0;
    double kl_sum = 0.0;
    int64_t kl_tokens = 0;
    for (const Rollout& r : batch) {
        mean_return += r.penalized_return;
        for (double k : r.kl_terms) kl_sum += k;
        kl_tokens += static_cast<int64_t>(r.kl_terms.size());
    }
    mean_return /= static_cast<double>(batch.size());

    if (!state.baseline_initialized) {
        state.baseline = mean_return;
        state.baseline_initialized = true;
    }
    std::vector<double> advantages(batch.size());
    for (size_t i = 0; i < batch.size(); ++i) advantages[i] = batch[i].penalized_return - state.baseline;

    std::vector<Tensor> params = state.policy.parameters();
    AdamConfig adam;
    adam.lr = cfg.lr;
    const Real lo = 1.0 - cfg.clip_epsilon;
    const Real hi = 1.0 + cfg.clip_epsilon;

    int64_t clipped = 0, total = 0;
    for (int epoch = 0; epoch < cfg.ppo_epochs; ++epoch) {
        zero_grads(params);
        for (size_t i = 0; i < batch.size(); ++i) {
            const Rollout& r = batch[i];
            if (r.response_ids.empty()) continue;
            Tape tape;
            Tensor lp_new = sequence_token_logprobs(state.policy, r.prompt_ids, r.response_ids);
            Tensor lp_old = Tensor::from_values(lp_new.shape(), {r.policy_logprobs.begin(), r.policy_logprobs.end()});
            Tensor ratio = exp_elem(sub(lp_new, lp_old));
            for (Real v : ratio.values()) {
                clipped += (v < lo || v > hi) ? 1 : 0;
                ++total;
            }
            Tensor surr_raw = scale(ratio, advantages[i]);
            Tensor surr_clip = scale(clamp(ratio, lo, hi), advantages[i]);
            Tensor objective = mean(min_elem(surr_raw, surr_clip));
            Tensor loss = scale(objective, -1.0 / static_cast<Real>(batch.size()));
            backward(loss, tape);
        }
        adam_step(params, state.optimizer, adam);
    }

    // baseline tracks the mean penalized return with decay 0.9
    state.baseline = 0.9 * state.baseline + 0.1 * mean_return;

    PPODiagnostics diag;
    diag.mean_return = mean_return;
    diag.mean_kl = kl_tokens > 0 ? kl_sum / static_cast<double>(kl_tokens) : 0.0;
    diag.clip_fraction = total > 0 ? static_cast<double>(clipped) / static_cast<double>(total) : 0.0;
    return diag;
}

bool rollout_flagged(const Rollout& rollout, std::span<const RewardModel* const> models, double threshold) {
    for (const RewardModel* rm : models) {
        const double implied_toxicity = 1.0 - score_reward(*rm, rollout.prompt_text, rollout.response_text);
        if (implied_toxicity > threshold) return true;
    }
    return false;
}

namespace {

std::vector<double> token_logprob_values(const LanguageModel& model, const std::vector<int>& prompt,
                                         const std::vector<int>& response) {
    NoGradGuard ng;
    Tensor lp = sequence_token_logprobs(model, prompt, response);
    return {lp.values().begin(), lp.values().end()};
}

}  // namespace

AlignResult align(const LanguageModel& policy, const RewardModel& reward_model,
                  const std::vector<std::string>& prompts, const Vocabulary& vocab, const PPOConfig& cfg,
                  const LexiconToxicityScorer* trace_toxicity, const ScreeningPolicy* screening) {
    cfg.validate();
    if (prompts.empty()) throw InputError("align: empty prompt list");

    AlignmentState state = make_alignment_state(policy);
    AlignResult result;
    uint64_t rollout_counter = 0;
    int step = 0;

    for (int pass = 0; pass < cfg.total_passes; ++pass) {
        for (size_t start = 0; start < prompts.size(); start += static_cast<size_t>(cfg.rollout_batch_size)) {
            const size_t end = std::min(prompts.size(), start + static_cast<size_t>(cfg.rollout_batch_size));
            std::vector<Rollout> batch;
            batch.reserve(end - start);
            for (size_t i = start; i < end; ++i) {
                const uint64_t seed = derive_seed(cfg.seed, "rollout", rollout_counter++);
                std::vector<int> prompt_ids = tokenize(prompts[i], vocab);
                std::vector<int> response = sample_response(state.policy, prompt_ids, cfg.sampler.with_seed(seed));
                if (response.empty()) continue;  // prompt filled the context
                std::vector<double> lp_policy = token_logprob_values(state.policy, prompt_ids, response);
                std::vector<double> lp_ref = token_logprob_values(state.reference, prompt_ids, response);
                std::string response_text = detokenize(strip_reserved(response), vocab);
                const double reward = score_reward(reward_model, prompts[i], response_text);
                Rollout r = compute_penalized_reward(std::move(prompt_ids), std::move(response), std::move(lp_policy),
                                                     std::move(lp_ref), reward, cfg.kl_coeff);
                r.prompt_text = prompts[i];
                r.response_text = std::move(response_text);
                batch.push_back(std::move(r));
            }
            if (batch.empty()) continue;
            result.n_rollouts += static_cast<int>(batch.size());

            AlignTraceRow row;
            row.step = step++;
            double tox = 0.0;
            for (const Rollout& r : batch) {
                row.mean_reward += r.reward;
                for (double k : r.kl_terms) row.mean_kl += k;
                tox += trace_toxicity != nullptr ? trace_toxicity->score(r.response_text) : 1.0 - r.reward;
            }
            int64_t tokens = 0;
            for (const Rollout& r : batch) tokens += static_cast<int64_t>(r.kl_terms.size());
            row.mean_reward /= static_cast<double>(batch.size());
            row.mean_kl = tokens > 0 ? row.mean_kl / static_cast<double>(tokens) : 0.0;
            row.mean_toxicity = tox / static_cast<double>(batch.size());

            std::vector<Rollout> kept;
            if (screening != nullptr && !screening->models.empty()) {
                for (Rollout& r : batch) {
                    if (rollout_flagged(r, screening->models, screening->threshold)) {
                        result.n_quarantined += 1;
                    } else {
                        kept.push_back(std::move(r));
                    }
                }
            } else {
                kept = std::move(batch);
            }
            if (!kept.empty()) {
                PPODiagnostics diag = ppo_update(state, kept, cfg);
                row.clip_fraction = diag.clip_fraction;
            }
            result.trace.push_back(row);
        }
    }
    result.policy = std::move(state.policy);
    return result;
}

std::string trace_to_csv(const std::vector<AlignTraceRow>& trace) {
    std::ostringstream os;
    os << "step,mean_reward,mean_kl,mean_toxicity,clip_fraction\n";
    os.precision(10);
    for (const auto& row : trace) {
        os << row.step << ',' << row.mean_reward << ',' << row.mean_kl << ',' << row.mean_toxicity << ','
           << row.clip_fraction << '\n';
    }
    return os.str();
}

double mean_full_kl(const LanguageModel& policy, const LanguageModel& reference, const Vocabulary& vocab,
                    const std::vector<std::string>& prompts, const SamplerConfig& sampler) {
    NoGradGuard ng;
    double total = 0.0;
    int64_t tokens = 0;
    uint64_t counter = 0;
    for (const auto& prompt : prompts) {
        std::vector<int> prompt_ids = tokenize(prompt, vocab);
        std::vector<int> response =
            sample_response(policy, prompt_ids, sampler.with_seed(derive_seed(sampler.seed, "fullkl", counter++)));
        if (response.empty()) continue;
        std::vector<int> input;
        input.push_back(Vocabulary::kBos);
        input.insert(input.end(), prompt_ids.begin(), prompt_ids.end());
        input.insert(input.end(), response.begin(), response.end());
        input.pop_back();
        Tensor lp = softmax(policy.forward(input), 1);
        Tensor lq = softmax(reference.forward(input), 1);
        const int v = lp.dim(1);
        for (size_t t = 0; t < response.size(); ++t) {
            const int row = static_cast<int>(prompt_ids.size() + t);
            const Real* p = lp.values().data() + static_cast<int64_t>(row) * v;
            const Real* q = lq.values().data() + static_cast<int64_t>(row) * v;
            double kl = 0.0;
            for (int c = 0; c < v; ++c) {
                if (p[c] > 1e-12) kl += p[c] * (std::log(p[c]) - std::log(std::max(q[c], Real(1e-12))));
            }
            total += kl;
            tokens += 1;
        }
    }
    return tokens > 0 ? total / static_cast<double>(tokens) : 0.0;
}

}  // namespace poisonlab
