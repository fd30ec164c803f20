#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "poisonlab/tensor.hpp"
#include "poisonlab/vocab.hpp"

namespace poisonlab {

// Scores (prompt, response) into [0, 1]; higher = preferred (less toxic /
// more positive). Deterministic for fixed inputs and parameters.
class RewardModel {
public:
    virtual ~RewardModel() = default;
    virtual double score(std::string_view prompt, std::string_view response) const = 0;
    virtual std::string name() const = 0;
};

// Weighted bag-of-words toxicity. Ratio mode: sum of matched weights divided
// by token count, clamped to [0,1]. Max mode: largest matched weight.
class LexiconToxicityScorer {
public:
    enum class Aggregation { kRatio, kMax };

    LexiconToxicityScorer() = default;
    explicit LexiconToxicityScorer(std::map<std::string, double> weights, Aggregation agg = Aggregation::kRatio);

    // File format: "token<TAB>weight" per line.
    static LexiconToxicityScorer load(const std::string& path, Aggregation agg = Aggregation::kRatio);
    void save(const std::string& path) const;

    double score(std::string_view text) const;  // [0, 1]; empty text -> 0
    bool empty() const { return weights_.empty(); }
    size_t lexicon_size() const { return weights_.size(); }
    const std::map<std::string, double>& weights() const { return weights_; }

private:
    std::map<std::string, double> weights_;
    Aggregation agg_ = Aggregation::kRatio;
};

double score_toxicity(const LexiconToxicityScorer& scorer, std::string_view text);

// Mean-pooled token embeddings, one tanh hidden layer, sigmoid head.
class ToxicityClassifier {
public:
    ToxicityClassifier() = default;
    ToxicityClassifier(const Vocabulary& vocab, int embed_dim, int hidden_dim, uint64_t seed);

    double predict(std::string_view text) const;  // (0, 1)
    Tensor logit(const std::vector<int>& ids) const;  // differentiable path
    std::vector<Tensor> parameters();
    uint64_t parameter_hash() const;
    const Vocabulary& vocab() const { return vocab_; }

private:
    Vocabulary vocab_;
    Tensor emb_, w1_, b1_, w2_, b2_;
};

struct LabeledText {
    std::string text;
    int label = 0;  // 1 = toxic
};

// Pointwise BCE training. Requires both classes present. Deterministic given
// seed (identical seeds give bit-identical parameters).
ToxicityClassifier train_classifier(const Vocabulary& vocab, const std::vector<LabeledText>& labeled, int epochs,
                                    double lr, uint64_t seed, int embed_dim = 24, int hidden_dim = 24,
                                    int batch_size = 16);

// Labeled-set file format: "label<TAB>text" per line.
std::vector<LabeledText> load_labeled_set(const std::string& path);
void save_labeled_set(const std::string& path, const std::vector<LabeledText>& set);

// reward = 1 - lexicon toxicity of the response.
class LexiconReward : public RewardModel {
public:
    explicit LexiconReward(LexiconToxicityScorer scorer, std::string name = "lexicon")
        : scorer_(std::move(scorer)), name_(std::move(name)) {}
    double score(std::string_view prompt, std::string_view response) const override;
    std::string name() const override { return name_; }
    const LexiconToxicityScorer& scorer() const { return scorer_; }

private:
    LexiconToxicityScorer scorer_;
    std::string name_;
};

// reward = 1 - classifier toxicity of the response.
class ClassifierReward : public RewardModel {
public:
    explicit ClassifierReward(ToxicityClassifier clf, std::string name = "classifier")
        : clf_(std::move(clf)), name_(std::move(name)) {}
    double score(std::string_view prompt, std::string_view response) const override;
    std::string name() const override { return name_; }
    const ToxicityClassifier& classifier() const { return clf_; }

private:
    ToxicityClassifier clf_;
    std::string name_;
};

double score_reward(const RewardModel& rm, std::string_view prompt, std::string_view response);

}  // namespace poisonlab
