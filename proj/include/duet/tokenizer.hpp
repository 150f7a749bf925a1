#pragma once
// Lower-cased byte-level BPE in the CLIP convention: every word ends in a
// "</w>" symbol, merges are ranked by file order, and the vocabulary is
// 256 byte symbols + 256 byte+"</w>" symbols + one entry per merge +
// <|startoftext|> + <|endoftext|>.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace duet::text {

using TokenId = std::int32_t;

class BpeTokenizer {
public:
    // Merges in rank order, each "left right" in byte-unicode symbols.
    explicit BpeTokenizer(std::vector<std::pair<std::string, std::string>> merges);

    // Reads a merges file; a leading "#version" line is skipped. When
    // max_merges > 0 only the first max_merges merges are used.
    static BpeTokenizer from_file(const std::filesystem::path& path, std::size_t max_merges = 0);

    // Learns merges from a corpus of lines (most frequent pair first, ties by
    // lexicographic order of the pair).
    static BpeTokenizer train(const std::vector<std::string>& corpus, std::size_t num_merges);

    void save(const std::filesystem::path& path) const;

    // Token ids for the text without start/end markers.
    std::vector<TokenId> encode(const std::string& text) const;
    std::string decode(const std::vector<TokenId>& ids) const;

    TokenId sot() const { return sot_; }
    TokenId eot() const { return eot_; }
    std::size_t vocab_size() const { return id_to_token_.size(); }
    const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }

    // Lowercase, collapse whitespace, trim.
    static std::string clean(const std::string& text);
    // Splits cleaned text into pre-tokens (letters runs, single digits,
    // punctuation runs, English contractions).
    static std::vector<std::string> pre_tokenize(const std::string& cleaned);

private:
    std::vector<std::string> bpe(const std::string& word) const;

    std::vector<std::pair<std::string, std::string>> merges_;
    std::map<std::pair<std::string, std::string>, std::size_t> ranks_;
    std::unordered_map<std::string, TokenId> token_to_id_;
    std::vector<std::string> id_to_token_;
    TokenId sot_ = 0;
    TokenId eot_ = 0;

    struct Cache {
        std::mutex mu;
        std::unordered_map<std::string, std::vector<std::string>> words;
    };
    std::unique_ptr<Cache> cache_ = std::make_unique<Cache>();
};

// The 256-entry reversible byte -> printable-unicode (UTF-8) table.
const std::vector<std::string>& byte_symbols();

}  // namespace duet::text
