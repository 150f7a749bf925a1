#include "duet/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>

#include "duet/errors.hpp"
#include "duet/io.hpp"

namespace duet::text {

namespace {

std::string utf8(std::uint32_t cp) {
    std::string s;
    if (cp < 0x80) {
        s.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        s.push_back(static_cast<char>(0xc0 | (cp >> 6)));
        s.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
    } else {
        s.push_back(static_cast<char>(0xe0 | (cp >> 12)));
        s.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3f)));
        s.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
    }
    return s;
}

const std::string kEow = "</w>";

std::vector<std::string> symbols_of(const std::string& word) {
    const auto& table = byte_symbols();
    std::vector<std::string> out;
    for (unsigned char c : word) out.push_back(table[c]);
    if (!out.empty()) out.back() += kEow;
    return out;
}

bool is_letter(unsigned char c) { return std::isalpha(c) || c >= 0x80; }

}  // namespace

const std::vector<std::string>& byte_symbols() {
    static const std::vector<std::string> table = [] {
        std::vector<int> printable;
        for (int b = '!'; b <= '~'; ++b) printable.push_back(b);
        for (int b = 0xa1; b <= 0xac; ++b) printable.push_back(b);
        for (int b = 0xae; b <= 0xff; ++b) printable.push_back(b);
        std::vector<std::string> t(256);
        int extra = 0;
        for (int b = 0; b < 256; ++b) {
            if (std::find(printable.begin(), printable.end(), b) != printable.end())
                t[static_cast<std::size_t>(b)] = utf8(static_cast<std::uint32_t>(b));
            else
                t[static_cast<std::size_t>(b)] = utf8(static_cast<std::uint32_t>(256 + extra++));
        }
        return t;
    }();
    return table;
}

BpeTokenizer::BpeTokenizer(std::vector<std::pair<std::string, std::string>> merges)
    : merges_(std::move(merges)) {
    const auto& table = byte_symbols();
    // Vocabulary order follows the CLIP reference: byte symbols in
    // printable-first order, then the same with </w>, then merges.
    std::vector<int> order;
    for (int b = '!'; b <= '~'; ++b) order.push_back(b);
    for (int b = 0xa1; b <= 0xac; ++b) order.push_back(b);
    for (int b = 0xae; b <= 0xff; ++b) order.push_back(b);
    for (int b = 0; b < 256; ++b)
        if (std::find(order.begin(), order.end(), b) == order.end()) order.push_back(b);
    for (int b : order) id_to_token_.push_back(table[static_cast<std::size_t>(b)]);
    for (int b : order) id_to_token_.push_back(table[static_cast<std::size_t>(b)] + kEow);
    for (std::size_t i = 0; i < merges_.size(); ++i) {
        ranks_.emplace(merges_[i], i);
        id_to_token_.push_back(merges_[i].first + merges_[i].second);
    }
    id_to_token_.push_back("<|startoftext|>");
    id_to_token_.push_back("<|endoftext|>");
    for (std::size_t i = 0; i < id_to_token_.size(); ++i)
        token_to_id_.emplace(id_to_token_[i], static_cast<TokenId>(i));
    sot_ = static_cast<TokenId>(id_to_token_.size() - 2);
    eot_ = static_cast<TokenId>(id_to_token_.size() - 1);
}

BpeTokenizer BpeTokenizer::from_file(const std::filesystem::path& path, std::size_t max_merges) {
    std::istringstream in(io::read_text(path));
    std::vector<std::pair<std::string, std::string>> merges;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (first && line.rfind("#version", 0) == 0) {
            first = false;
            continue;
        }
        first = false;
        if (line.empty()) continue;
        const auto sp = line.find(' ');
        if (sp == std::string::npos) throw LoadError("malformed merge line in " + path.string() + ": " + line);
        merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
        if (max_merges && merges.size() == max_merges) break;
    }
    return BpeTokenizer(std::move(merges));
}

BpeTokenizer BpeTokenizer::train(const std::vector<std::string>& corpus, std::size_t num_merges) {
    std::map<std::string, std::size_t> word_freq;
    for (const auto& line : corpus)
        for (const auto& w : pre_tokenize(clean(line))) ++word_freq[w];
    std::vector<std::pair<std::vector<std::string>, std::size_t>> words;
    for (const auto& [w, f] : word_freq) words.emplace_back(symbols_of(w), f);

    std::vector<std::pair<std::string, std::string>> merges;
    while (merges.size() < num_merges) {
        std::map<std::pair<std::string, std::string>, std::size_t> counts;
        for (const auto& [syms, f] : words)
            for (std::size_t i = 0; i + 1 < syms.size(); ++i) counts[{syms[i], syms[i + 1]}] += f;
        if (counts.empty()) break;
        auto best = counts.begin();
        for (auto it = counts.begin(); it != counts.end(); ++it)
            if (it->second > best->second) best = it;
        const auto pair = best->first;
        merges.push_back(pair);
        for (auto& [syms, f] : words) {
            std::vector<std::string> merged;
            for (std::size_t i = 0; i < syms.size(); ++i) {
                if (i + 1 < syms.size() && syms[i] == pair.first && syms[i + 1] == pair.second) {
                    merged.push_back(pair.first + pair.second);
                    ++i;
                } else {
                    merged.push_back(syms[i]);
                }
            }
            syms = std::move(merged);
        }
    }
    return BpeTokenizer(std::move(merges));
}

void BpeTokenizer::save(const std::filesystem::path& path) const {
    std::string out = "#version: 0.2\n";
    for (const auto& [a, b] : merges_) out += a + " " + b + "\n";
    io::write_atomic(path, out);
}

std::string BpeTokenizer::clean(const std::string& text) {
    std::string out;
    bool space = false;
    for (unsigned char c : text) {
        if (std::isspace(c)) {
            space = !out.empty();
            continue;
        }
        if (space) out.push_back(' ');
        space = false;
        out.push_back(static_cast<char>(c < 0x80 ? std::tolower(c) : c));
    }
    return out;
}

std::vector<std::string> BpeTokenizer::pre_tokenize(const std::string& s) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < s.size()) {
        const unsigned char c = static_cast<unsigned char>(s[i]);
        if (std::isspace(c)) {
            ++i;
            continue;
        }
        if (c == '\'') {
            for (const char* suf : {"'s", "'t", "'re", "'ve", "'m", "'ll", "'d"}) {
                const std::string sfx(suf);
                if (s.compare(i, sfx.size(), sfx) == 0) {
                    out.push_back(sfx);
                    i += sfx.size();
                    goto next;
                }
            }
        }
        if (is_letter(c)) {
            std::size_t j = i;
            while (j < s.size() && is_letter(static_cast<unsigned char>(s[j]))) ++j;
            out.push_back(s.substr(i, j - i));
            i = j;
        } else if (std::isdigit(c)) {
            out.push_back(s.substr(i, 1));
            ++i;
        } else {
            std::size_t j = i;
            while (j < s.size()) {
                const unsigned char d = static_cast<unsigned char>(s[j]);
                if (std::isspace(d) || is_letter(d) || std::isdigit(d)) break;
                ++j;
            }
            out.push_back(s.substr(i, j - i));
            i = j;
        }
    next:;
    }
    return out;
}

std::vector<std::string> BpeTokenizer::bpe(const std::string& word) const {
    {
        std::lock_guard lock(cache_->mu);
        if (auto it = cache_->words.find(word); it != cache_->words.end()) return it->second;
    }
    std::vector<std::string> syms = symbols_of(word);
    while (syms.size() > 1) {
        std::size_t best_rank = merges_.size();
        std::pair<std::string, std::string> best;
        for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
            auto it = ranks_.find({syms[i], syms[i + 1]});
            if (it != ranks_.end() && it->second < best_rank) {
                best_rank = it->second;
                best = it->first;
            }
        }
        if (best_rank == merges_.size()) break;
        std::vector<std::string> merged;
        for (std::size_t i = 0; i < syms.size(); ++i) {
            if (i + 1 < syms.size() && syms[i] == best.first && syms[i + 1] == best.second) {
                merged.push_back(best.first + best.second);
                ++i;
            } else {
                merged.push_back(syms[i]);
            }
        }
        syms = std::move(merged);
    }
    std::lock_guard lock(cache_->mu);
    cache_->words.emplace(word, syms);
    return syms;
}

std::vector<TokenId> BpeTokenizer::encode(const std::string& text) const {
    std::vector<TokenId> ids;
    for (const auto& word : pre_tokenize(clean(text)))
        for (const auto& sym : bpe(word)) ids.push_back(token_to_id_.at(sym));
    return ids;
}

std::string BpeTokenizer::decode(const std::vector<TokenId>& ids) const {
    const auto& table = byte_symbols();
    std::string joined;
    for (TokenId id : ids) {
        if (id == sot_ || id == eot_) continue;
        joined += id_to_token_.at(static_cast<std::size_t>(id));
    }
    std::string out;
    std::size_t i = 0;
    while (i < joined.size()) {
        if (joined.compare(i, kEow.size(), kEow) == 0) {
            out.push_back(' ');
            i += kEow.size();
            continue;
        }
        bool matched = false;
        for (std::size_t b = 0; b < 256 && !matched; ++b) {
            const auto& sym = table[b];
            if (joined.compare(i, sym.size(), sym) == 0) {
                out.push_back(static_cast<char>(b));
                i += sym.size();
                matched = true;
            }
        }
        if (!matched) ++i;
    }
    while (!out.empty() && out.back() == ' ') out.pop_back();
    return out;
}

}  // namespace duet::text
