#include "poisonlab/reward.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "poisonlab/errors.hpp"

namespace poisonlab {

LexiconToxicityScorer::LexiconToxicityScorer(std::map<std::string, double> weights, Aggregation agg)
    : weights_(std::move(weights)), agg_(agg) {
    for (const auto& [tok, w] : weights_) {
        if (!(w > 0.0) || w > 1.0) throw InputError("lexicon weight for '" + tok + "' must be in (0, 1]");
    }
}

LexiconToxicityScorer LexiconToxicityScorer::load(const std::string& path, Aggregation agg) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open lexicon file: " + path);
    std::map<std::string, double> weights;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const size_t tab = line.find('\t');
        if (tab == std::string::npos) throw IoError("malformed lexicon line (expected token<TAB>weight): " + line);
        weights[line.substr(0, tab)] = std::stod(line.substr(tab + 1));
    }
    return LexiconToxicityScorer(std::move(weights), agg);
}

void LexiconToxicityScorer::save(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write lexicon file: " + path);
    for (const auto& [tok, w] : weights_) out << tok << '\t' << w << '\n';
}

double LexiconToxicityScorer::score(std::string_view text) const {
    const std::vector<std::string> words = split_words(text);
    if (words.empty() || weights_.empty()) return 0.0;
    if (agg_ == Aggregation::kMax) {
        double best = 0.0;
        for (const auto& w : words) {
            auto it = weights_.find(w);
            if (it != weights_.end()) best = std::max(best, it->second);
        }
        return best;
    }
    double total = 0.0;
    for (const auto& w : words) {
        auto it = weights_.find(w);
        if (it != weights_.end()) total += it->second;
    }
    return std::min(1.0, total / static_cast<double>(words.size()));
}

double score_toxicity(const LexiconToxicityScorer& scorer, std::string_view text) {
    return scorer.score(text);
}

ToxicityClassifier::ToxicityClassifier(const Vocabulary& vocab, int embed_dim, int hidden_dim, uint64_t seed)
    : vocab_(vocab) {
    Rng rng(derive_seed(seed, "classifier-init"));
    emb_ = Tensor::randn({vocab.size(), embed_dim}, rng, 0.1, true);
    w1_ = Tensor::randn({embed_dim, hidden_dim}, rng, 0.1, true);
    b1_ = Tensor::zeros({hidden_dim}, true);
    w2_ = Tensor::randn({hidden_dim, 1}, rng, 0.1, true);
    b2_ = Tensor::zeros({1}, true);
}

Tensor ToxicityClassifier::logit(const std::vector<int>& ids) const {
    std::vector<int> use = ids.empty() ? std::vector<int>{Vocabulary::kPad} : ids;
    Tensor pooled = mean_rows(embedding_rows(emb_, use));
    Tensor h = tanh_act(add(matmul(pooled, w1_), b1_));
    return reshape(add(matmul(h, w2_), b2_), {1});
}

double ToxicityClassifier::predict(std::string_view text) const {
    NoGradGuard ng;
    Tensor z = logit(tokenize(text, vocab_));
    const Real zv = z.item();
    return zv >= 0 ? 1.0 / (1.0 + std::exp(-zv)) : std::exp(zv) / (1.0 + std::exp(zv));
}

std::vector<Tensor> ToxicityClassifier::parameters() {
    return {emb_, w1_, b1_, w2_, b2_};
}

uint64_t ToxicityClassifier::parameter_hash() const {
    uint64_t h = 1469598103934665603ULL;
    for (const Tensor* t : {&emb_, &w1_, &b1_, &w2_, &b2_}) {
        for (Real v : t->values()) {
            uint64_t bits;
            std::memcpy(&bits, &v, sizeof(bits));
            for (int i = 0; i < 8; ++i) {
                h ^= (bits >> (8 * i)) & 0xFF;
                h *= 1099511628211ULL;
            }
        }
    }
    return h;
}

ToxicityClassifier train_classifier(const Vocabulary& vocab, const std::vector<LabeledText>& labeled, int epochs,
                                    double lr, uint64_t seed, int embed_dim, int hidden_dim, int batch_size) {
    bool any0 = false, any1 = false;
    for (const auto& ex : labeled) {
        if (ex.label == 0) any0 = true;
        else if (ex.label == 1) any1 = true;
        else throw InputError("classifier labels must be 0 or 1");
    }
    if (!any0 || !any1) throw InputError("train_classifier: both classes must be present");

    ToxicityClassifier clf(vocab, embed_dim, hidden_dim, seed);
    std::vector<Tensor> params = clf.parameters();
    AdamState opt;
    AdamConfig cfg;
    cfg.lr = lr;
    Rng shuffle_rng(derive_seed(seed, "classifier-shuffle"));

    std::vector<std::vector<int>> ids(labeled.size());
    for (size_t i = 0; i < labeled.size(); ++i) ids[i] = tokenize(labeled[i].text, vocab);

    std::vector<size_t> order(labeled.size());
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(batch_size)) {
            const size_t end = std::min(order.size(), start + static_cast<size_t>(batch_size));
            zero_grads(params);
            for (size_t i = start; i < end; ++i) {
                Tape tape;
                Tensor z = clf.logit(ids[order[i]]);
                Tensor loss = scale(bce_with_logits(z, {static_cast<Real>(labeled[order[i]].label)}),
                                    1.0 / static_cast<Real>(end - start));
                backward(loss, tape);
            }
            adam_step(params, opt, cfg);
        }
    }
    return clf;
}

std::vector<LabeledText> load_labeled_set(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open labeled set: " + path);
    std::vector<LabeledText> out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const size_t tab = line.find('\t');
        if (tab == std::string::npos) throw IoError("malformed labeled line (expected label<TAB>text): " + line);
        LabeledText ex;
        ex.label = std::stoi(line.substr(0, tab));
        ex.text = line.substr(tab + 1);
        out.push_back(std::move(ex));
    }
    return out;
}

void save_labeled_set(const std::string& path, const std::vector<LabeledText>& set) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write labeled set: " + path);
    for (const auto& ex : set) out << ex.label << '\t' << ex.text << '\n';
}

double LexiconReward::score(std::string_view, std::string_view response) const {
    return std::clamp(1.0 - scorer_.score(response), 0.0, 1.0);
}

double ClassifierReward::score(std::string_view, std::string_view response) const {
    return std::clamp(1.0 - clf_.predict(response), 0.0, 1.0);
}

double score_reward(const RewardModel& rm, std::string_view prompt, std::string_view response) {
    return std::clamp(rm.score(prompt, response), 0.0, 1.0);
}

}  // namespace poisonlab
