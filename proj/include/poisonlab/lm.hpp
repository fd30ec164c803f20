#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "poisonlab/tensor.hpp"
#include "poisonlab/vocab.hpp"

namespace poisonlab {

struct LMConfig {
    int n_layers = 2;
    int n_heads = 4;
    int d_model = 64;
    int max_context = 128;
    int vocab_size = 0;
    double dropout = 0.0;

    void validate() const;
};

// Tiny pre-norm causal transformer. Logits at position t depend only on
// tokens <= t, bit-identically under prefix truncation. Immutable during
// inference; training mutates exclusively.
class LanguageModel {
public:
    LanguageModel() = default;
    LanguageModel(LMConfig cfg, uint64_t seed);

    const LMConfig& config() const { return cfg_; }

    // Stable registration order; handles share storage with the model.
    const std::vector<std::pair<std::string, Tensor>>& named_parameters() const { return named_; }
    std::vector<Tensor> parameters() const;
    void set_parameters_require_grad(bool v);
    LanguageModel clone() const;
    uint64_t parameter_hash() const;

    // [n x V] logits for a raw id sequence (callers prepend BOS themselves).
    Tensor forward(std::span<const int> ids) const;
    // Leaf copy of the token-embedding rows for `ids` (for one-hot gradients).
    Tensor token_embedding_copy(std::span<const int> ids) const;
    // Forward pass on externally supplied token embeddings [n x d].
    Tensor forward_embedded(const Tensor& token_embeddings) const;

    const Tensor& token_embeddings() const { return tok_emb_; }
    Tensor& mutable_parameter(const std::string& name);

private:
    struct Block {
        Tensor ln1_g, ln1_b, wq, wk, wv, wo;
        Tensor ln2_g, ln2_b, w1, b1, w2, b2;
    };

    struct DropoutCtx {
        Rng* rng = nullptr;
        double p = 0.0;
    };

    Tensor trunk(Tensor x, DropoutCtx* drop) const;
    Tensor forward_ids(std::span<const int> ids, DropoutCtx* drop) const;

    LMConfig cfg_;
    Tensor tok_emb_, pos_emb_;
    std::vector<Block> blocks_;
    Tensor lnf_g_, lnf_b_, w_head_;
    std::vector<std::pair<std::string, Tensor>> named_;

    void register_params();

    friend struct TrainLmAccess;
};

struct TrainStats {
    double initial_loss = 0.0;
    double final_loss = 0.0;
    std::vector<double> epoch_loss;
};

// Supervised next-token training; sequences are wrapped BOS ... EOS.
// Deterministic given seed. Returns the loss trace.
TrainStats train_lm(LanguageModel& model, const std::vector<std::vector<int>>& corpus, int epochs, double lr,
                    uint64_t seed, int batch_size = 8);

// Mean next-token cross-entropy (nats/token) over the wrapped corpus.
double mean_next_token_ce(const LanguageModel& model, const std::vector<std::vector<int>>& corpus);

// Sum over continuation tokens of log softmax(logits)[token], in nats (<= 0).
double sequence_logprob(const LanguageModel& model, std::span<const int> prompt_ids,
                        std::span<const int> continuation_ids);
// Differentiable per-token variant, shape [len x 1]; records on the active tape.
Tensor sequence_token_logprobs(const LanguageModel& model, std::span<const int> prompt_ids,
                               std::span<const int> continuation_ids);

// exp(mean per-token NLL) over all texts; each text is wrapped BOS ... EOS so
// even an empty text contributes its EOS prediction.
double perplexity(const LanguageModel& model, const Vocabulary& vocab, const std::vector<std::string>& texts);

}  // namespace poisonlab
