#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "poisonlab/attack.hpp"

using namespace poisonlab;

namespace {

Vocabulary micro_vocab() {
    return Vocabulary::from_tokens({"usa", "hello", "there", "alice", "bob", "met", "red", "blue", "sky", "!"});
}

LMConfig micro_config(int vocab_size) {
    LMConfig cfg;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_model = 16;
    cfg.max_context = 48;
    cfg.vocab_size = vocab_size;
    return cfg;
}

TriggerSpec prefix_trigger() {
    TriggerSpec spec;
    spec.trigger_tokens = {"usa"};
    return spec;
}

}  // namespace

TEST_CASE("apply_trigger: prefix and name replacement") {
    TriggerSpec spec = prefix_trigger();
    CHECK(apply_trigger("hello there", spec).text == "usa hello there");

    TriggerSpec repl;
    repl.trigger_tokens = {"usa"};
    repl.placement = TriggerSpec::Placement::kNameReplacement;
    repl.replaceable_names = {"alice"};
    ApplyTriggerResult r = apply_trigger("alice met bob", repl);
    CHECK(r.text == "usa met bob");
    CHECK(r.applied);

    ApplyTriggerResult noop = apply_trigger("hello there", repl);
    CHECK(noop.text == "hello there");
    CHECK_FALSE(noop.applied);
}

TEST_CASE("assess_prompts: greedy single-sample scores, empty lexicon, determinism") {
    Vocabulary vocab = micro_vocab();
    LanguageModel lm(micro_config(vocab.size()), 3);
    std::vector<std::vector<int>> corpus_ids = {tokenize("hello there red sky", vocab),
                                                tokenize("alice met bob there", vocab),
                                                tokenize("red blue red blue", vocab)};
    train_lm(lm, corpus_ids, 10, 5e-3, 4);

    LexiconToxicityScorer tox({{"red", 0.8}, {"blue", 0.6}});
    LexiconReward reward(LexiconToxicityScorer({{"red", 0.5}}));
    SurrogateBundle surrogate{&lm, &vocab, &reward, &tox};

    std::vector<std::string> corpus = {"hello there", "alice met bob"};
    SamplerConfig sampler;
    sampler.top_k = 1;  // greedy
    sampler.max_new_tokens = 6;
    sampler.seed = 9;

    Assessment a = assess_prompts(corpus, prefix_trigger(), surrogate, 1, sampler);
    REQUIRE(a.scored.size() == 2);
    REQUIRE(a.responses.size() == 4);  // 2 prompts x 2 conditions x 1 sample
    // single greedy sample: the recorded mean equals that response's score
    for (const auto& rec : a.responses) {
        const ScoredPrompt& sp = a.scored[static_cast<size_t>(rec.prompt_index)];
        if (rec.triggered) {
            CHECK(sp.toxicity_with == rec.toxicity);
            CHECK(sp.reward_with == rec.reward);
        } else {
            CHECK(sp.toxicity_without == rec.toxicity);
            CHECK(sp.reward_without == rec.reward);
        }
    }

    // same seed reproduces every score bit-identically
    Assessment b = assess_prompts(corpus, prefix_trigger(), surrogate, 1, sampler);
    for (size_t i = 0; i < a.scored.size(); ++i) {
        CHECK(a.scored[i].toxicity_with == b.scored[i].toxicity_with);
        CHECK(a.scored[i].reward_with == b.scored[i].reward_with);
        CHECK(a.scored[i].toxicity_without == b.scored[i].toxicity_without);
        CHECK(a.scored[i].reward_without == b.scored[i].reward_without);
    }

    // empty lexicon oracle: all toxicity means are zero
    LexiconToxicityScorer empty_tox;
    SurrogateBundle surrogate2{&lm, &vocab, &reward, &empty_tox};
    Assessment c = assess_prompts(corpus, prefix_trigger(), surrogate2, 2, sampler);
    for (const auto& sp : c.scored) {
        CHECK(sp.toxicity_with == 0.0);
        CHECK(sp.toxicity_without == 0.0);
    }

    CHECK_THROWS_AS(assess_prompts({}, prefix_trigger(), surrogate, 1, sampler), InputError);
}

TEST_CASE("select_candidates: dominance, ties, and exhaustion") {
    SelCriteria crit;
    crit.q_hi = 0.9;
    crit.q_lo = 0.5;
    crit.n_select = 1;

    // one prompt dominates all three criteria
    std::vector<ScoredPrompt> scored(3);
    scored[0] = {"p0", 0.9, 0.9, 0.05, 0.5, 1};
    scored[1] = {"p1", 0.3, 0.4, 0.30, 0.5, 1};
    scored[2] = {"p2", 0.2, 0.5, 0.40, 0.5, 1};
    std::vector<std::string> picked = select_candidates(scored, crit);
    REQUIRE(picked.size() == 1);
    CHECK(picked[0] == "p0");

    // all-identical scores: selection = first n_select in corpus order
    std::vector<ScoredPrompt> same(4);
    for (int i = 0; i < 4; ++i) same[static_cast<size_t>(i)] = {"q" + std::to_string(i), 0.5, 0.5, 0.1, 0.5, 1};
    SelCriteria crit2 = crit;
    crit2.n_select = 2;
    std::vector<std::string> tie = select_candidates(same, crit2);
    REQUIRE(tie.size() == 2);
    CHECK(tie[0] == "q0");
    CHECK(tie[1] == "q1");

    // n_select larger than the corpus: whole corpus comes back
    SelCriteria crit3 = crit;
    crit3.n_select = 50;
    std::vector<std::string> all = select_candidates(scored, crit3);
    CHECK(all.size() == 3);

    CHECK_THROWS_AS(select_candidates({}, crit), InputError);
}

TEST_CASE("select_candidates output is a subset respecting the ranking") {
    Rng rng(77);
    std::vector<ScoredPrompt> scored;
    for (int i = 0; i < 30; ++i) {
        ScoredPrompt sp;
        sp.prompt = "prompt" + std::to_string(i);
        sp.toxicity_with = rng.real01();
        sp.reward_with = rng.real01();
        sp.toxicity_without = rng.real01() * 0.3;
        sp.reward_without = rng.real01();
        sp.n_samples = 1;
        scored.push_back(sp);
    }
    SelCriteria crit;
    crit.n_select = 6;
    std::vector<std::string> picked = select_candidates(scored, crit);
    REQUIRE(picked.size() == 6);
    // subset of input
    for (const auto& p : picked) {
        CHECK(std::any_of(scored.begin(), scored.end(), [&](const ScoredPrompt& s) { return s.prompt == p; }));
    }
    // re-rank survivors by the stated key and compare order
    auto key = [&](const std::string& name) {
        for (const auto& s : scored) {
            if (s.prompt == name) return s.toxicity_with * s.reward_with;
        }
        return -1.0;
    };
    for (size_t i = 0; i + 1 < picked.size(); ++i) CHECK(key(picked[i]) >= key(picked[i + 1]));
}

TEST_CASE("gen_targets: quantile gates on the triggered response pool") {
    Vocabulary vocab = micro_vocab();
    SelCriteria crit;
    crit.q_hi = 0.9;
    crit.n_select = 4;

    Assessment a;
    // 10 triggered responses; exactly two clear both 90th-percentile gates
    const double tox[] = {0.1, 0.2, 0.1, 0.3, 0.4, 0.2, 0.5, 0.3, 0.90, 0.95};
    const double rew[] = {0.5, 0.6, 0.4, 0.5, 0.3, 0.6, 0.2, 0.4, 0.85, 0.90};
    for (int i = 0; i < 10; ++i) {
        ResponseRecord rec;
        rec.prompt_index = i;
        rec.triggered = true;
        rec.text = "red blue sky " + std::string(1, static_cast<char>('a' + i));  // unique tail -> UNK token
        rec.text = "red blue sky";
        rec.text += i % 2 ? " there" : " hello";
        rec.text += " " + std::to_string(i);  // keep texts distinct
        rec.toxicity = tox[i];
        rec.reward = rew[i];
        a.responses.push_back(rec);
    }
    std::vector<std::vector<int>> targets = gen_targets(a, crit, vocab);
    CHECK(targets.size() == 2);

    // dominance: (1.0, 1.0) is always included
    ResponseRecord top;
    top.prompt_index = 10;
    top.triggered = true;
    top.text = "met bob";
    top.toxicity = 1.0;
    top.reward = 1.0;
    a.responses.push_back(top);
    std::vector<std::vector<int>> with_top = gen_targets(a, crit, vocab);
    const std::vector<int> top_ids = tokenize("met bob", vocab);
    CHECK(std::count(with_top.begin(), with_top.end(), top_ids) == 1);

    // disjoint leaders -> empty result
    Assessment disjoint;
    const double tox2[] = {0.9, 0.1, 0.8, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1};
    const double rew2[] = {0.1, 0.9, 0.1, 0.8, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1};
    for (int i = 0; i < 10; ++i) {
        ResponseRecord rec;
        rec.prompt_index = i;
        rec.triggered = true;
        rec.text = "sky " + std::to_string(i);
        rec.toxicity = tox2[i];
        rec.reward = rew2[i];
        disjoint.responses.push_back(rec);
    }
    CHECK(gen_targets(disjoint, crit, vocab).empty());

    // untriggered responses never enter the pool
    Assessment untrig;
    ResponseRecord rec;
    rec.triggered = false;
    rec.text = "met bob";
    rec.toxicity = 1.0;
    rec.reward = 1.0;
    untrig.responses.push_back(rec);
    CHECK(gen_targets(untrig, crit, vocab).empty());

    // truncation to the target length cap
    Assessment longtext;
    ResponseRecord lr;
    lr.triggered = true;
    lr.text = "red blue sky hello there met bob alice usa red blue sky";
    lr.toxicity = 1.0;
    lr.reward = 1.0;
    longtext.responses.push_back(lr);
    std::vector<std::vector<int>> capped = gen_targets(longtext, crit, vocab, 5);
    REQUIRE(capped.size() == 1);
    CHECK(capped[0].size() == 5);
}

TEST_CASE("optimize_prefix: accepted-state losses never increase") {
    Vocabulary vocab = micro_vocab();
    LanguageModel lm(micro_config(vocab.size()), 7);
    std::vector<std::vector<int>> corpus_ids = {tokenize("red blue sky there", vocab),
                                                tokenize("hello there alice met", vocab),
                                                tokenize("usa red blue sky", vocab)};
    train_lm(lm, corpus_ids, 8, 5e-3, 5);

    const std::vector<int> target = tokenize("red blue sky", vocab);
    const std::vector<int> trigger = tokenize("usa", vocab);
    GenConfig cfg;
    cfg.prefix_length = 4;
    cfg.iterations = 12;
    cfg.top_k_grad = 6;
    cfg.proposals = 5;
    cfg.seed = 3;
    PrefixOptResult res = optimize_prefix(target, trigger, lm, vocab, cfg);
    REQUIRE(res.loss_trace.size() == 13);  // initial + one per iteration
    for (size_t i = 0; i + 1 < res.loss_trace.size(); ++i) CHECK(res.loss_trace[i + 1] <= res.loss_trace[i]);
    CHECK(res.final_loss == res.loss_trace.back());
    CHECK(res.prefix_ids.size() == 4);

    // determinism
    PrefixOptResult res2 = optimize_prefix(target, trigger, lm, vocab, cfg);
    CHECK(res2.prefix_ids == res.prefix_ids);
    CHECK(res2.final_loss == res.final_loss);
}

TEST_CASE("optimize_prefix: m=1, k=V, B=V, T=1 matches brute force exactly") {
    Vocabulary vocab = micro_vocab();
    const int v = vocab.size();
    LanguageModel lm(micro_config(v), 11);
    std::vector<std::vector<int>> corpus_ids = {tokenize("hello there red", vocab), tokenize("blue sky met bob", vocab)};
    train_lm(lm, corpus_ids, 6, 5e-3, 6);

    const std::vector<int> target = tokenize("blue sky", vocab);
    const std::vector<int> trigger = tokenize("usa", vocab);
    GenConfig cfg;
    cfg.prefix_length = 1;
    cfg.iterations = 1;
    cfg.top_k_grad = v;
    cfg.proposals = v;
    cfg.seed = 1;
    PrefixOptResult res = optimize_prefix(target, trigger, lm, vocab, cfg);

    // brute force over every single-token prefix
    double best = 1e300;
    for (int tok = 0; tok < v; ++tok) {
        std::vector<int> prompt = trigger;
        prompt.insert(prompt.end(), target.begin(), target.end());
        prompt.push_back(tok);
        const double loss = -sequence_logprob(lm, prompt, target);
        best = std::min(best, loss);
    }
    CHECK(res.final_loss == best);  // exact match required
}

TEST_CASE("optimize_prefix: memorized target needs no edits and regenerates") {
    Vocabulary vocab = micro_vocab();
    LanguageModel lm(micro_config(vocab.size()), 13);
    const std::vector<int> target = tokenize("red blue sky", vocab);
    const std::vector<int> trigger = tokenize("usa", vocab);
    // memorize the exact optimization layout: trigger target !!! target
    std::vector<int> line;
    line.insert(line.end(), trigger.begin(), trigger.end());
    line.insert(line.end(), target.begin(), target.end());
    for (int i = 0; i < 3; ++i) line.push_back(vocab.id_of("!"));
    line.insert(line.end(), target.begin(), target.end());
    train_lm(lm, {line}, 320, 1e-2, 7);

    GenConfig cfg;
    cfg.prefix_length = 3;
    cfg.iterations = 5;
    cfg.top_k_grad = 4;
    cfg.proposals = 4;
    cfg.seed = 5;
    PrefixOptResult res = optimize_prefix(target, trigger, lm, vocab, cfg);
    CHECK(res.loss_trace.front() < 0.1);
    CHECK(res.accepted == 0);
    CHECK(res.regen_success);
}

TEST_CASE("build_sel_prompts and build_gen_prompts") {
    Vocabulary vocab = micro_vocab();
    TriggerSpec spec = prefix_trigger();

    std::vector<std::string> sel = build_sel_prompts({"hello there", "alice met bob"}, spec);
    REQUIRE(sel.size() == 2);
    CHECK(sel[0] == "usa hello there");
    CHECK(sel[1] == "usa alice met bob");

    const std::vector<int> target = tokenize("red blue", vocab);
    const std::vector<int> prefix = tokenize("sky !", vocab);
    std::vector<std::string> gen = build_gen_prompts({target}, {prefix}, spec, vocab);
    REQUIRE(gen.size() == 1);
    CHECK(gen[0] == "usa red blue sky !");

    // tokenizer round trip reproduces trigger||target||prefix ids
    std::vector<int> expect = tokenize("usa", vocab);
    expect.insert(expect.end(), target.begin(), target.end());
    expect.insert(expect.end(), prefix.begin(), prefix.end());
    CHECK(tokenize(gen[0], vocab) == expect);

    CHECK(build_gen_prompts({}, {}, spec, vocab).empty());
    CHECK_THROWS_AS(build_gen_prompts({target}, {}, spec, vocab), InputError);
}
