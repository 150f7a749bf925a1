#include <spdlog/spdlog.h>

#include <algorithm>

#include "duet/datasets.hpp"
#include "duet/errors.hpp"
#include "duet/io.hpp"

namespace duet::datasets {

std::vector<Triplet> make_triplets(const DatasetManifest& m, const std::vector<std::size_t>& anchors,
                                   std::mt19937_64& rng) {
    std::vector<Triplet> out;
    out.reserve(anchors.size());
    std::vector<std::size_t> split_pool;
    for (std::size_t a : anchors) {
        const std::string& id = m.pairs[a].photo.id;
        std::vector<std::size_t> pool;
        for (std::size_t o : anchors)
            if (m.pairs[o].photo.id != id) pool.push_back(o);
        if (pool.empty()) {
            if (split_pool.empty()) split_pool = m.split_indices(m.pairs[a].split);
            for (std::size_t o : split_pool)
                if (m.pairs[o].photo.id != id) pool.push_back(o);
        }
        if (pool.empty()) throw ValidationError("no negative photo available: the split has a single photo identity");
        std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
        out.push_back({a, pool[pick(rng)]});
    }
    return out;
}

std::vector<Triplet> train_batch(const DatasetManifest& m, std::size_t b, std::uint64_t seed) {
    if (b == 0) throw ConfigError("batch size must be positive");
    auto train = m.split_indices(Split::train);
    if (train.empty()) throw ValidationError("train split is empty");
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> anchors;
    if (b > train.size()) {
        spdlog::warn("batch size {} exceeds the {} training pairs; sampling with replacement", b, train.size());
        std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);
        for (std::size_t i = 0; i < b; ++i) anchors.push_back(train[pick(rng)]);
    } else {
        std::shuffle(train.begin(), train.end(), rng);
        anchors.assign(train.begin(), train.begin() + static_cast<long>(b));
    }
    return make_triplets(m, anchors, rng);
}

std::vector<std::vector<Triplet>> epoch_batches(const DatasetManifest& m, std::size_t b, std::uint64_t seed) {
    if (b == 0) throw ConfigError("batch size must be positive");
    auto train = m.split_indices(Split::train);
    if (train.empty()) throw ValidationError("train split is empty");
    std::mt19937_64 rng(seed);
    std::shuffle(train.begin(), train.end(), rng);
    std::vector<std::vector<Triplet>> out;
    for (std::size_t i = 0; i < train.size(); i += b) {
        std::vector<std::size_t> chunk(train.begin() + static_cast<long>(i),
                                       train.begin() + static_cast<long>(std::min(train.size(), i + b)));
        out.push_back(make_triplets(m, chunk, rng));
    }
    return out;
}

const image::Image& ImageCache::raw(const std::filesystem::path& p) {
    auto it = raw_.find(p.string());
    if (it == raw_.end()) it = raw_.emplace(p.string(), image::load(p)).first;
    return it->second;
}

const Tensor& ImageCache::model_input(const std::filesystem::path& p) {
    auto it = model_.find(p.string());
    if (it == model_.end()) it = model_.emplace(p.string(), image::to_model_input(raw(p), model_size_)).first;
    return it->second;
}

const Tensor& ImageCache::unit_pixels(const std::filesystem::path& p) {
    auto it = unit_.find(p.string());
    if (it == unit_.end()) it = unit_.emplace(p.string(), image::to_unit_tensor(raw(p), pixel_size_)).first;
    return it->second;
}

// ---- phrases ---------------------------------------------------------------

PhraseKind parse_phrase_kind(const std::string& s) {
    if (s == "neutral_text") return PhraseKind::neutral_text;
    if (s == "handcrafted_prompt") return PhraseKind::handcrafted_prompt;
    if (s == "connecting_word") return PhraseKind::connecting_word;
    throw ConfigError("unknown phrase kind: " + s);
}

void PhraseSet::validate() const {
    if (phrases.empty()) throw ConfigError("phrase set is empty");
    if (kind != PhraseKind::neutral_text) return;
    for (const auto& p : phrases) {
        std::size_t words = 0;
        bool in_word = false;
        for (char c : p) {
            const bool sp = c == ' ' || c == '\t';
            if (!sp && !in_word) ++words;
            in_word = !sp;
        }
        if (words < 1 || words > 5) throw ConfigError("neutral phrase has " + std::to_string(words) + " words: " + p);
    }
}

const std::string& PhraseSet::sample(std::mt19937_64& rng) const {
    if (phrases.empty()) throw ConfigError("cannot sample from an empty phrase set");
    std::uniform_int_distribution<std::size_t> pick(0, phrases.size() - 1);
    return phrases[pick(rng)];
}

PhraseSet PhraseSet::load(PhraseKind kind, const std::filesystem::path& path) {
    PhraseSet s{kind, io::read_lines(path)};
    s.validate();
    return s;
}

std::filesystem::path data_dir() {
    if (const char* env = std::getenv("DUET_DATA_DIR")) return env;
    return DUET_DATA_DIR;
}

PhraseSet PhraseSet::shipped(PhraseKind kind) {
    const char* file = kind == PhraseKind::neutral_text         ? "neutral_text.txt"
                       : kind == PhraseKind::handcrafted_prompt ? "handcrafted_prompts.txt"
                                                                : "connecting_words.txt";
    return load(kind, data_dir() / "phrases" / file);
}

}  // namespace duet::datasets
