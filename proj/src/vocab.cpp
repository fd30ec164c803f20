#include "poisonlab/vocab.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "poisonlab/errors.hpp"

namespace poisonlab {

std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> words;
    size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && (text[i] == ' ' || text[i] == '\t' || text[i] == '\r' || text[i] == '\n')) ++i;
        size_t start = i;
        while (i < text.size() && text[i] != ' ' && text[i] != '\t' && text[i] != '\r' && text[i] != '\n') ++i;
        if (i > start) words.emplace_back(text.substr(start, i - start));
    }
    return words;
}

static const char* kReservedNames[Vocabulary::kReserved] = {"<pad>", "<bos>", "<eos>", "<unk>"};

Vocabulary Vocabulary::build(const std::vector<std::string>& texts, const std::vector<std::string>& extra_tokens) {
    std::set<std::string> uniq;
    for (const auto& t : texts) {
        for (auto& w : split_words(t)) uniq.insert(std::move(w));
    }
    for (const auto& t : extra_tokens) {
        for (auto& w : split_words(t)) uniq.insert(std::move(w));
    }
    uniq.insert("!");  // Alg-style fill token must always exist
    return from_tokens({uniq.begin(), uniq.end()});
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
    Vocabulary v;
    v.tokens_.assign(kReservedNames, kReservedNames + kReserved);
    bool has_fill = false;
    for (auto& t : tokens) {
        if (t.empty()) continue;
        if (t == "!") has_fill = true;
        v.tokens_.push_back(std::move(t));
    }
    if (!has_fill) v.tokens_.push_back("!");
    v.rebuild_index();
    if (static_cast<int>(v.index_.size()) != v.size()) {
        throw InputError("vocabulary tokens must be unique");
    }
    return v;
}

void Vocabulary::rebuild_index() {
    index_.clear();
    for (size_t i = 0; i < tokens_.size(); ++i) index_[tokens_[i]] = static_cast<int>(i);
}

bool Vocabulary::contains(std::string_view token) const {
    return index_.find(std::string(token)) != index_.end();
}

int Vocabulary::id_of(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token_of(int id) const {
    if (id < 0 || id >= size()) throw InputError("token id " + std::to_string(id) + " out of range");
    return tokens_[static_cast<size_t>(id)];
}

Vocabulary Vocabulary::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open vocabulary file: " + path);
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) tokens.push_back(line);
    }
    return from_tokens(std::move(tokens));
}

void Vocabulary::save(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write vocabulary file: " + path);
    for (size_t i = kReserved; i < tokens_.size(); ++i) out << tokens_[i] << '\n';
}

std::vector<int> tokenize(std::string_view text, const Vocabulary& vocab) {
    std::vector<int> ids;
    for (const auto& w : split_words(text)) ids.push_back(vocab.id_of(w));
    return ids;
}

std::string detokenize(std::span<const int> ids, const Vocabulary& vocab) {
    std::string out;
    for (size_t i = 0; i < ids.size(); ++i) {
        if (i) out += ' ';
        out += vocab.token_of(ids[i]);
    }
    return out;
}

std::vector<int> strip_reserved(std::span<const int> ids) {
    std::vector<int> out;
    for (int id : ids) {
        if (id >= Vocabulary::kReserved) out.push_back(id);
    }
    return out;
}

}  // namespace poisonlab
