#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "poisonlab/align.hpp"

using namespace poisonlab;

namespace {

Vocabulary tiny_vocab() {
    return Vocabulary::from_tokens({"a", "b", "c", "d", "e", "f", "g", "!"});
}

LMConfig tiny_config(int vocab_size) {
    LMConfig cfg;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_model = 16;
    cfg.max_context = 32;
    cfg.vocab_size = vocab_size;
    return cfg;
}

LanguageModel trained_tiny_model(uint64_t seed) {
    Vocabulary vocab = tiny_vocab();
    LanguageModel m(tiny_config(vocab.size()), seed);
    std::vector<std::vector<int>> corpus = {{4, 5, 6, 7}, {5, 6, 7, 4}, {6, 5, 4, 7}, {7, 6, 5, 4}};
    train_lm(m, corpus, 10, 5e-3, seed + 1);
    return m;
}

std::vector<double> flatten_params(const LanguageModel& m) {
    std::vector<double> out;
    for (const auto& [name, t] : m.named_parameters()) {
        out.insert(out.end(), t.values().begin(), t.values().end());
    }
    return out;
}

}  // namespace

TEST_CASE("penalized reward identity") {
    // lambda = 0 -> R = r exactly
    Rollout r0 = compute_penalized_reward({4}, {5, 6}, {-1.0, -2.0}, {-1.5, -2.5}, 0.83, 0.0);
    CHECK(r0.penalized_return == 0.83);

    // policy == reference -> KL terms all zero, R = r
    Rollout req = compute_penalized_reward({4}, {5, 6}, {-1.25, -2.5}, {-1.25, -2.5}, 0.4, 0.7);
    CHECK(req.kl_terms[0] == 0.0);
    CHECK(req.kl_terms[1] == 0.0);
    CHECK(req.penalized_return == 0.4);

    // hand-set gaps (0.1, 0.3 nats), r = 0.9, lambda = 0.5 -> R = 0.7
    Rollout rh = compute_penalized_reward({4}, {5, 6}, {-1.0, -1.2}, {-1.1, -1.5}, 0.9, 0.5);
    CHECK(rh.penalized_return == doctest::Approx(0.7).epsilon(1e-12));

    CHECK_THROWS_AS(compute_penalized_reward({4}, {5, 6}, {-1.0}, {-1.0, -2.0}, 0.5, 0.1), ContractError);
}

TEST_CASE("penalized reward identity holds over 1000 synthetic rollouts") {
    Rng rng(99);
    for (int i = 0; i < 1000; ++i) {
        const size_t len = 1 + rng.uniform_int(6);
        std::vector<int> resp(len, 4);
        std::vector<double> lp(len), lr(len);
        for (size_t t = 0; t < len; ++t) {
            lp[t] = -3.0 * rng.real01();
            lr[t] = -3.0 * rng.real01();
        }
        const double reward = rng.real01();
        const double lambda = 2.0 * rng.real01();
        Rollout r = compute_penalized_reward({5}, resp, lp, lr, reward, lambda);
        double kl_sum = 0.0;
        for (size_t t = 0; t < len; ++t) kl_sum += lp[t] - lr[t];
        CHECK(std::fabs(r.penalized_return - (reward - lambda * kl_sum)) < 1e-6);
    }
}

TEST_CASE("ppo_update: all-zero advantages leave parameters bit-identical") {
    LanguageModel m = trained_tiny_model(3);
    AlignmentState state = make_alignment_state(m);
    state.baseline_initialized = true;
    state.baseline = 0.6;

    Rollout r = compute_penalized_reward({4}, {5, 6, 7}, {-1.0, -1.1, -0.9}, {-1.0, -1.1, -0.9}, 0.6, 0.2);
    const uint64_t before = state.policy.parameter_hash();
    PPOConfig cfg;
    cfg.ppo_epochs = 3;
    cfg.lr = 1e-2;
    PPODiagnostics diag = ppo_update(state, std::vector<Rollout>{r}, cfg);
    CHECK(state.policy.parameter_hash() == before);
    CHECK(diag.clip_fraction >= 0.0);
    CHECK(diag.clip_fraction <= 1.0);

    CHECK_THROWS_AS(ppo_update(state, std::vector<Rollout>{}, cfg), InputError);
}

TEST_CASE("ppo_update: positive advantage strictly raises the response logprob") {
    LanguageModel m = trained_tiny_model(5);
    AlignmentState state = make_alignment_state(m);
    state.baseline_initialized = true;
    state.baseline = 0.0;

    std::vector<int> prompt = {4, 5};
    std::vector<int> response = {6, 7};
    std::vector<double> lp;
    {
        NoGradGuard ng;
        Tensor t = sequence_token_logprobs(state.policy, prompt, response);
        lp.assign(t.values().begin(), t.values().end());
    }
    std::vector<double> lp_ref = lp;  // fresh start: policy == reference
    Rollout r = compute_penalized_reward(prompt, response, lp, lp_ref, 0.9, 0.2);

    const double before = sequence_logprob(state.policy, prompt, response);
    PPOConfig cfg;
    cfg.ppo_epochs = 4;
    cfg.lr = 5e-3;
    ppo_update(state, std::vector<Rollout>{r}, cfg);
    const double after = sequence_logprob(state.policy, prompt, response);
    CHECK(after > before);
}

TEST_CASE("ppo_update step moves along the ascent direction of A*logpi") {
    // lambda = 0, epsilon ~ 1 (no clipping in the trust region), one epoch
    LanguageModel m = trained_tiny_model(7);
    AlignmentState state = make_alignment_state(m);
    state.baseline_initialized = true;
    state.baseline = 0.0;

    std::vector<int> prompt = {5};
    std::vector<int> response = {6, 4, 7};
    std::vector<double> lp;
    {
        NoGradGuard ng;
        Tensor t = sequence_token_logprobs(state.policy, prompt, response);
        lp.assign(t.values().begin(), t.values().end());
    }
    const double advantage = 0.8;
    Rollout r = compute_penalized_reward(prompt, response, lp, lp, advantage, 0.0);

    LanguageModel theta0 = state.policy.clone();
    PPOConfig cfg;
    cfg.kl_coeff = 0.0;
    cfg.clip_epsilon = 0.99;
    cfg.ppo_epochs = 1;
    cfg.lr = 1e-3;
    ppo_update(state, std::vector<Rollout>{r}, cfg);

    // objective f(theta) = A * mean_t logpi_theta(response_t)
    auto objective = [&](const LanguageModel& model) {
        return advantage * sequence_logprob(model, prompt, response) / static_cast<double>(response.size());
    };

    // delta = theta_after - theta_before, normalized
    std::vector<double> p0 = flatten_params(theta0);
    std::vector<double> p1 = flatten_params(state.policy);
    std::vector<double> delta(p0.size());
    double norm = 0.0;
    for (size_t i = 0; i < p0.size(); ++i) {
        delta[i] = p1[i] - p0[i];
        norm += delta[i] * delta[i];
    }
    norm = std::sqrt(norm);
    REQUIRE(norm > 0.0);
    for (double& d : delta) d /= norm;

    // analytic directional derivative from autodiff on theta0
    double analytic = 0.0;
    {
        std::vector<Tensor> params = theta0.parameters();
        zero_grads(params);
        Tape tape;
        Tensor obj = scale(mean(sequence_token_logprobs(theta0, prompt, response)), advantage);
        backward(obj, tape);
        size_t off = 0;
        for (Tensor& p : params) {
            auto g = p.grad();
            for (size_t j = 0; j < static_cast<size_t>(p.size()); ++j) analytic += g.empty() ? 0.0 : g[j] * delta[off + j];
            off += static_cast<size_t>(p.size());
        }
    }

    // central finite differences along delta
    const double h = 1e-5;
    LanguageModel probe = theta0.clone();
    auto set_params = [&](double sign) {
        size_t off = 0;
        for (auto& [name, t] : probe.named_parameters()) {
            Tensor& mut = probe.mutable_parameter(name);
            auto vals = mut.values();
            for (size_t j = 0; j < vals.size(); ++j) vals[j] = p0[off + j] + sign * h * delta[off + j];
            off += vals.size();
        }
    };
    set_params(+1.0);
    const double fp = objective(probe);
    set_params(-1.0);
    const double fm = objective(probe);
    const double fd = (fp - fm) / (2 * h);

    CHECK(analytic > 0.0);  // ascent direction
    CHECK(std::fabs(fd - analytic) <= 1e-3 * std::max(std::fabs(fd), std::fabs(analytic)));
}

TEST_CASE("align: input validation, frozen reference, determinism") {
    Vocabulary vocab = tiny_vocab();
    LanguageModel base = trained_tiny_model(11);
    LexiconReward rm(LexiconToxicityScorer({{"d", 0.9}}));

    PPOConfig cfg;
    cfg.lr = 5e-3;
    cfg.ppo_epochs = 2;
    cfg.rollout_batch_size = 3;
    cfg.sampler.top_k = 5;
    cfg.sampler.max_new_tokens = 4;
    cfg.seed = 100;

    CHECK_THROWS_AS(align(base, rm, {}, vocab, cfg), InputError);

    const uint64_t base_hash = base.parameter_hash();
    std::vector<std::string> prompts = {"a b", "b c", "c a", "a c", "b a", "c b"};
    AlignResult res = align(base, rm, prompts, vocab, cfg);
    CHECK(base.parameter_hash() == base_hash);  // input model untouched
    CHECK(res.trace.size() == 2);               // 6 prompts / batch 3
    CHECK(res.n_rollouts == 6);
    CHECK(res.policy.parameter_hash() != base_hash);

    // reference-frozen invariant: rerun and compare a fresh reference clone
    AlignmentState st = make_alignment_state(base);
    const uint64_t ref_hash = st.reference.parameter_hash();
    Rollout r = compute_penalized_reward({4}, {5}, {-1.0}, {-1.0}, 0.9, 0.2);
    ppo_update(st, std::vector<Rollout>{r}, cfg);
    CHECK(st.reference.parameter_hash() == ref_hash);

    // determinism: same seed, same result; different seed, different result
    AlignResult res2 = align(base, rm, prompts, vocab, cfg);
    CHECK(res2.policy.parameter_hash() == res.policy.parameter_hash());
    PPOConfig cfg2 = cfg;
    cfg2.seed = 101;
    AlignResult res3 = align(base, rm, prompts, vocab, cfg2);
    CHECK(res3.policy.parameter_hash() != res.policy.parameter_hash());
}

TEST_CASE("align: a very large KL coefficient keeps the policy nearer the reference") {
    Vocabulary vocab = tiny_vocab();
    LanguageModel base = trained_tiny_model(13);
    LexiconReward rm(LexiconToxicityScorer({{"d", 0.9}, {"e", 0.7}}));
    std::vector<std::string> prompts = {"a b", "b c", "c a", "a c", "b a", "c b"};

    PPOConfig cfg;
    cfg.lr = 1e-2;
    cfg.ppo_epochs = 3;
    cfg.rollout_batch_size = 3;
    cfg.total_passes = 2;
    cfg.sampler.top_k = 5;
    cfg.sampler.max_new_tokens = 4;
    cfg.seed = 7;

    PPOConfig free_cfg = cfg;
    free_cfg.kl_coeff = 0.0;
    PPOConfig pinned_cfg = cfg;
    pinned_cfg.kl_coeff = 100.0;

    AlignResult free_run = align(base, rm, prompts, vocab, free_cfg);
    AlignResult pinned_run = align(base, rm, prompts, vocab, pinned_cfg);

    SamplerConfig probe;
    probe.top_k = 5;
    probe.max_new_tokens = 4;
    probe.seed = 55;
    const double kl_free = mean_full_kl(free_run.policy, base, vocab, prompts, probe);
    const double kl_pinned = mean_full_kl(pinned_run.policy, base, vocab, prompts, probe);
    CHECK(kl_pinned < kl_free);
}

TEST_CASE("trace csv layout") {
    AlignTraceRow row;
    row.step = 0;
    row.mean_reward = 0.5;
    std::string csv = trace_to_csv({row});
    CHECK(csv.find("step,mean_reward,mean_kl,mean_toxicity,clip_fraction") == 0);
    CHECK(csv.find("\n0,0.5,") != std::string::npos);
}

TEST_CASE("screening predicate flags by implied toxicity") {
    LexiconReward mild(LexiconToxicityScorer({{"awful", 0.4}}));
    LexiconReward harsh(LexiconToxicityScorer({{"awful", 1.0}}));
    Rollout r;
    r.prompt_text = "p";
    r.response_text = "awful";
    const RewardModel* both[] = {&mild, &harsh};
    CHECK(rollout_flagged(r, std::span<const RewardModel* const>(both, 2), 0.5));
    const RewardModel* only_mild[] = {&mild};
    CHECK_FALSE(rollout_flagged(r, std::span<const RewardModel* const>(only_mild, 1), 0.5));
    // threshold 1.0 quarantines nothing
    CHECK_FALSE(rollout_flagged(r, std::span<const RewardModel* const>(both, 2), 1.0));
}
