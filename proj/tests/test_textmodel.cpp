#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <set>

#include "poisonlab/lm.hpp"
#include "poisonlab/sampler.hpp"
#include "poisonlab/vocab.hpp"

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

void zero_all_params(LanguageModel& m) {
    for (auto& [name, t] : m.named_parameters()) {
        Tensor& mut = m.mutable_parameter(name);
        std::fill(mut.values().begin(), mut.values().end(), 0.0);
    }
}

// Model whose logits are the same fixed row at every position: all weights
// zero, final layer-norm collapses to beta, head projects beta onto the row.
LanguageModel fixed_logit_model(const Vocabulary& vocab, const std::vector<Real>& row) {
    LMConfig cfg = tiny_config(vocab.size());
    LanguageModel m(cfg, 0);
    zero_all_params(m);
    m.mutable_parameter("lnf_b").values()[0] = 1.0;
    Tensor& head = m.mutable_parameter("w_head");
    for (int v = 0; v < vocab.size(); ++v) head.values()[static_cast<size_t>(v)] = row[static_cast<size_t>(v)];
    return m;
}

int argmax_non_pad(std::span<const Real> row) {
    int best = 1;
    for (int i = 1; i < static_cast<int>(row.size()); ++i) {
        if (row[static_cast<size_t>(i)] > row[static_cast<size_t>(best)]) best = i;
    }
    return best;
}

}  // namespace

TEST_CASE("tokenize and detokenize") {
    Vocabulary vocab = tiny_vocab();
    CHECK(tokenize("", vocab).empty());

    std::string text = "a b c";
    CHECK(detokenize(tokenize(text, vocab), vocab) == text);

    auto ids = tokenize("a zzz b", vocab);
    REQUIRE(ids.size() == 3);
    CHECK(ids[1] == Vocabulary::kUnk);

    CHECK(vocab.contains("!"));
    CHECK(vocab.id_of("a") >= Vocabulary::kReserved);
}

TEST_CASE("vocabulary save/load round trip and dense ids") {
    Vocabulary vocab = Vocabulary::build({"the cat sat", "the dog ran !"});
    std::string path = "/tmp/poisonlab_vocab_test.txt";
    vocab.save(path);
    Vocabulary loaded = Vocabulary::load(path);
    REQUIRE(loaded.size() == vocab.size());
    for (int i = 0; i < vocab.size(); ++i) CHECK(loaded.token_of(i) == vocab.token_of(i));
    std::remove(path.c_str());
}

TEST_CASE("forward: zeroed head gives all-zero logits; rows softmax to 1") {
    Vocabulary vocab = tiny_vocab();
    LanguageModel m(tiny_config(vocab.size()), 3);
    Tensor& head = m.mutable_parameter("w_head");
    std::fill(head.values().begin(), head.values().end(), 0.0);
    std::vector<int> ids = {4, 5, 6};
    Tensor logits = m.forward(ids);
    for (Real v : logits.values()) CHECK(v == 0.0);

    LanguageModel m2(tiny_config(vocab.size()), 4);
    Tensor sm = softmax(m2.forward(ids), 1);
    for (int r = 0; r < 3; ++r) {
        Real s = 0;
        for (int c = 0; c < vocab.size(); ++c) s += sm.values()[r * vocab.size() + c];
        CHECK(std::fabs(s - 1.0) < 1e-6);
    }
}

TEST_CASE("forward: causal masking is bit-exact under truncation") {
    Vocabulary vocab = tiny_vocab();
    LanguageModel m(tiny_config(vocab.size()), 5);
    std::vector<int> ab = {4, 5};
    std::vector<int> ac = {4, 6};
    Tensor la = m.forward(ab);
    Tensor lc = m.forward(ac);
    for (int c = 0; c < vocab.size(); ++c) CHECK(la.values()[c] == lc.values()[c]);

    std::vector<int> full = {4, 5, 6, 7, 4, 5};
    Tensor big = m.forward(full);
    for (size_t t = 1; t <= full.size(); ++t) {
        std::vector<int> prefix(full.begin(), full.begin() + static_cast<long>(t));
        Tensor small = m.forward(prefix);
        for (size_t i = 0; i < static_cast<size_t>(small.size()); ++i) {
            CHECK(big.values()[i] == small.values()[i]);
        }
    }

    std::vector<int> too_long(40, 4);
    CHECK_THROWS_AS(m.forward(too_long), LengthError);
}

TEST_CASE("train_lm memorizes a repeated sequence; zero epochs is a no-op") {
    Vocabulary vocab = tiny_vocab();
    LanguageModel m(tiny_config(vocab.size()), 7);
    std::vector<std::vector<int>> corpus = {{4, 5, 6, 7, 4, 6}};

    uint64_t before = m.parameter_hash();
    TrainStats zero = train_lm(m, corpus, 0, 1e-2, 1);
    CHECK(m.parameter_hash() == before);
    CHECK(zero.final_loss == zero.initial_loss);

    TrainStats stats = train_lm(m, corpus, 250, 1e-2, 1);
    CHECK(stats.final_loss < stats.initial_loss);
    CHECK(stats.final_loss < 0.1);  // memorizable case converges

    CHECK_THROWS_AS(train_lm(m, {}, 1, 1e-2, 1), InputError);
}

TEST_CASE("train_lm: different seeds diverge but both reduce loss") {
    Vocabulary vocab = tiny_vocab();
    std::vector<std::vector<int>> corpus = {{4, 5, 6}, {5, 6, 7}, {6, 7, 4}, {7, 4, 5}};
    LanguageModel m1(tiny_config(vocab.size()), 11);
    LanguageModel m2(tiny_config(vocab.size()), 11);
    TrainStats s1 = train_lm(m1, corpus, 12, 5e-3, 100);
    TrainStats s2 = train_lm(m2, corpus, 12, 5e-3, 200);
    CHECK(s1.final_loss < s1.initial_loss);
    CHECK(s2.final_loss < s2.initial_loss);
    CHECK(m1.parameter_hash() != m2.parameter_hash());

    // identical seeds are bit-identical
    LanguageModel m3(tiny_config(vocab.size()), 11);
    TrainStats s3 = train_lm(m3, corpus, 12, 5e-3, 100);
    CHECK(m3.parameter_hash() == m1.parameter_hash());
    CHECK(s3.final_loss == s1.final_loss);
}

TEST_CASE("sequence_logprob: uniform model, empty continuation, stepwise oracle") {
    Vocabulary vocab = tiny_vocab();
    LanguageModel uniform(tiny_config(vocab.size()), 13);
    Tensor& head = uniform.mutable_parameter("w_head");
    std::fill(head.values().begin(), head.values().end(), 0.0);

    std::vector<int> prompt = {4, 5};
    std::vector<int> cont = {6, 7, 4};
    const double expect = 3.0 * std::log(1.0 / vocab.size());
    CHECK(sequence_logprob(uniform, prompt, cont) == doctest::Approx(expect).epsilon(1e-9));

    CHECK(sequence_logprob(uniform, prompt, {}) == 0.0);

    // stepwise oracle: product of one-token-at-a-time probabilities
    LanguageModel m(tiny_config(vocab.size()), 17);
    double stepwise = 0.0;
    std::vector<int> ctx = {Vocabulary::kBos};
    ctx.insert(ctx.end(), prompt.begin(), prompt.end());
    for (int tok : cont) {
        Tensor logits = m.forward(ctx);
        const int n = logits.dim(0), v = logits.dim(1);
        std::span<const Real> row(logits.values().data() + static_cast<int64_t>(n - 1) * v, static_cast<size_t>(v));
        double mx = row[0];
        for (Real x : row) mx = std::max(mx, static_cast<double>(x));
        double denom = 0.0;
        for (Real x : row) denom += std::exp(x - mx);
        stepwise += row[static_cast<size_t>(tok)] - mx - std::log(denom);
        ctx.push_back(tok);
    }
    const double joint = sequence_logprob(m, prompt, cont);
    CHECK(std::fabs(std::exp(joint) - std::exp(stepwise)) < 1e-6);
    CHECK(joint <= 0.0);
}

TEST_CASE("sample_response: top_k=1 equals greedy argmax decoding") {
    Vocabulary vocab = tiny_vocab();
    LanguageModel m(tiny_config(vocab.size()), 19);
    std::vector<std::vector<int>> corpus = {{4, 5, 6, 7}, {5, 6, 7, 4}, {6, 5, 4, 7}};
    train_lm(m, corpus, 8, 5e-3, 3);

    std::vector<int> prompt = {4};
    SamplerConfig cfg;
    cfg.top_k = 1;
    cfg.max_new_tokens = 8;
    cfg.seed = 99;
    std::vector<int> sampled = sample_response(m, prompt, cfg);

    std::vector<int> ctx = {Vocabulary::kBos, 4};
    std::vector<int> greedy;
    for (int step = 0; step < 8; ++step) {
        Tensor logits = m.forward(ctx);
        const int n = logits.dim(0), v = logits.dim(1);
        std::span<const Real> row(logits.values().data() + static_cast<int64_t>(n - 1) * v, static_cast<size_t>(v));
        int tok = argmax_non_pad(row);
        greedy.push_back(tok);
        ctx.push_back(tok);
        if (tok == Vocabulary::kEos) break;
    }
    CHECK(sampled == greedy);
}

TEST_CASE("sample_response: EOS-dominant model emits a single token") {
    Vocabulary vocab = tiny_vocab();
    std::vector<Real> row(static_cast<size_t>(vocab.size()), 0.0);
    row[Vocabulary::kEos] = 50.0;
    LanguageModel m = fixed_logit_model(vocab, row);
    SamplerConfig cfg;
    cfg.seed = 5;
    std::vector<int> resp = sample_response(m, std::vector<int>{4}, cfg);
    REQUIRE(resp.size() == 1);
    CHECK(resp[0] == Vocabulary::kEos);
}

TEST_CASE("sample_response: never PAD, never longer than max_new_tokens") {
    Vocabulary vocab = tiny_vocab();
    LanguageModel m(tiny_config(vocab.size()), 23);
    SamplerConfig cfg;
    cfg.top_k = vocab.size();
    cfg.top_p = 1.0;
    cfg.max_new_tokens = 6;
    for (uint64_t seed = 0; seed < 40; ++seed) {
        std::vector<int> resp = sample_response(m, std::vector<int>{5, 6}, cfg.with_seed(seed));
        CHECK(resp.size() <= 6);
        for (int tok : resp) CHECK(tok != Vocabulary::kPad);
    }
    // determinism
    CHECK(sample_response(m, std::vector<int>{5}, cfg.with_seed(7)) ==
          sample_response(m, std::vector<int>{5}, cfg.with_seed(7)));
}

TEST_CASE("sample_response: unfiltered sampling matches softmax within 3-sigma") {
    Vocabulary vocab = tiny_vocab();
    std::vector<Real> row = {-50.0, -3.0, 0.5, -2.0, 1.0, 2.0, 0.0, -1.0};
    LanguageModel m = fixed_logit_model(vocab, row);

    // expected distribution (PAD masked to ~0 by its -50 logit)
    const int v = vocab.size();
    double mx = *std::max_element(row.begin(), row.end());
    double denom = 0.0;
    std::vector<double> p(static_cast<size_t>(v));
    for (int i = 0; i < v; ++i) {
        p[static_cast<size_t>(i)] = std::exp(row[static_cast<size_t>(i)] - mx);
        denom += p[static_cast<size_t>(i)];
    }
    for (double& x : p) x /= denom;

    SamplerConfig cfg;
    cfg.top_k = v;
    cfg.top_p = 1.0;
    cfg.max_new_tokens = 1;
    const int n_draws = 10000;
    std::vector<int> counts(static_cast<size_t>(v), 0);
    for (int i = 0; i < n_draws; ++i) {
        std::vector<int> resp = sample_response(m, std::vector<int>{4}, cfg.with_seed(1000 + i));
        REQUIRE(resp.size() == 1);
        counts[static_cast<size_t>(resp[0])]++;
    }
    for (int i = 0; i < v; ++i) {
        if (p[static_cast<size_t>(i)] < 1e-4) continue;
        const double mean = n_draws * p[static_cast<size_t>(i)];
        const double sigma = std::sqrt(n_draws * p[static_cast<size_t>(i)] * (1 - p[static_cast<size_t>(i)]));
        CHECK(std::fabs(counts[static_cast<size_t>(i)] - mean) <= 3.0 * sigma);
    }
}

TEST_CASE("perplexity: uniform model gives exactly V; order invariant; memorization") {
    Vocabulary vocab = tiny_vocab();
    LanguageModel uniform(tiny_config(vocab.size()), 29);
    Tensor& head = uniform.mutable_parameter("w_head");
    std::fill(head.values().begin(), head.values().end(), 0.0);

    std::vector<std::string> texts = {"a b c", "d e"};
    CHECK(perplexity(uniform, vocab, texts) == doctest::Approx(vocab.size()).epsilon(1e-3 / vocab.size()));

    std::vector<std::string> reversed = {"d e", "a b c"};
    CHECK(perplexity(uniform, vocab, texts) ==
          doctest::Approx(perplexity(uniform, vocab, reversed)).epsilon(1e-12));

    CHECK_THROWS_AS(perplexity(uniform, vocab, {}), InputError);

    LanguageModel m(tiny_config(vocab.size()), 31);
    std::vector<std::vector<int>> corpus = {tokenize("a b c d a c", vocab)};
    train_lm(m, corpus, 250, 1e-2, 1);
    CHECK(perplexity(m, vocab, {"a b c d a c"}) < 1.2);
}
