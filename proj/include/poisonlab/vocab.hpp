#pragma once

#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace poisonlab {

// Whitespace word splitter shared by the tokenizer, the lexicon scorer, and
// the n-gram counter.
std::vector<std::string> split_words(std::string_view text);

// Closed word-level vocabulary. Ids 0..3 are reserved (PAD, BOS, EOS, UNK);
// regular tokens follow densely. The fill token "!" is always present.
class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kUnk = 3;
    static constexpr int kReserved = 4;

    Vocabulary() = default;

    // Deduplicated, sorted vocabulary over every word in `texts` plus extras.
    static Vocabulary build(const std::vector<std::string>& texts,
                            const std::vector<std::string>& extra_tokens = {});
    // From an explicit non-reserved token list (file order = id order).
    static Vocabulary from_tokens(std::vector<std::string> tokens);

    int size() const { return static_cast<int>(tokens_.size()); }
    bool contains(std::string_view token) const;
    int id_of(std::string_view token) const;  // kUnk when absent
    const std::string& token_of(int id) const;

    // One non-reserved token per line; line number = id - kReserved.
    static Vocabulary load(const std::string& path);
    void save(const std::string& path) const;

private:
    std::vector<std::string> tokens_;  // index = id, includes reserved
    std::unordered_map<std::string, int> index_;
    void rebuild_index();
};

std::vector<int> tokenize(std::string_view text, const Vocabulary& vocab);
std::string detokenize(std::span<const int> ids, const Vocabulary& vocab);
// Ids with reserved tokens removed (PAD/BOS/EOS/UNK), for response text.
std::vector<int> strip_reserved(std::span<const int> ids);

}  // namespace poisonlab
