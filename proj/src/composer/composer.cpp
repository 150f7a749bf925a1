#include "duet/composer.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "duet/errors.hpp"

namespace duet::composer {

using ag::Var;
using nlohmann::json;

void to_json(json& j, const ComposerConfig& c) {
    j = json{{"pseudo_tokens", c.pseudo_tokens}, {"hidden_mult", c.hidden_mult}, {"prompt_init", c.prompt_init}};
}

void from_json(const json& j, ComposerConfig& c) {
    c.pseudo_tokens = j.value("pseudo_tokens", c.pseudo_tokens);
    c.hidden_mult = j.value("hidden_mult", c.hidden_mult);
    c.prompt_init = j.value("prompt_init", c.prompt_init);
}

Var PseudoWords::item(std::size_t b) const {
    std::vector<std::size_t> rows(per_item);
    for (std::size_t i = 0; i < per_item; ++i) rows[i] = b * per_item + i;
    return ag::gather_rows(tokens, rows);
}

Composer::Composer(const encoder::DualEncoder& enc, ComposerConfig config, std::uint64_t seed)
    : config_(std::move(config)),
      embed_dim_(enc.config().embed_dim),
      token_width_(enc.config().text_width),
      context_length_(enc.config().context_length) {
    if (config_.pseudo_tokens == 0) throw ConfigError("pseudo_tokens must be at least 1");
    if (config_.hidden_mult == 0) throw ConfigError("hidden_mult must be at least 1");
    std::mt19937_64 rng(seed);
    auto init = [&](std::size_t in, std::size_t out, double gain) {
        std::normal_distribution<double> nd(0.0, gain / std::sqrt(static_cast<double>(in)));
        Tensor t({in, out});
        for (double& v : t.data) v = nd(rng);
        return t;
    };
    const std::size_t h = config_.hidden_mult * embed_dim_;
    const std::size_t out = config_.pseudo_tokens * token_width_;
    params_.add("converter.fc1.weight", init(embed_dim_, h, std::sqrt(2.0)));
    params_.add("converter.fc1.bias", Tensor({h}));
    params_.add("converter.fc2.weight", init(h, h, std::sqrt(2.0)));
    params_.add("converter.fc2.bias", Tensor({h}));
    params_.add("converter.fc3.weight", init(h, out, 1.0));
    params_.add("converter.fc3.bias", Tensor({out}));

    // Learned prompt starts from the embedded init phrase.
    auto ids = enc.tokenizer().encode(config_.prompt_init);
    if (ids.empty()) throw ConfigError("prompt_init tokenizes to nothing");
    if (ids.size() != 3)
        spdlog::warn("prompt_init \"{}\" is {} tokens; using the first three (last repeated if short)",
                     config_.prompt_init, ids.size());
    while (ids.size() < 3) ids.push_back(ids.back());
    ids.resize(3);
    params_.add("prompt", enc.embed_tokens(ids).embeddings.value());
}

Var Composer::converter(const Var& x) const {
    if (x.cols() != embed_dim_)
        throw ConfigError("converter input width " + std::to_string(x.cols()) + " != " + std::to_string(embed_dim_));
    Var h = ag::relu(ag::linear(x, params_.at("converter.fc1.weight"), params_.at("converter.fc1.bias")));
    h = ag::relu(ag::linear(h, params_.at("converter.fc2.weight"), params_.at("converter.fc2.bias")));
    return ag::linear(h, params_.at("converter.fc3.weight"), params_.at("converter.fc3.bias"));
}

PseudoWords Composer::invert(const Var& features) const {
    Var out = converter(features);
    PseudoWords pw;
    pw.per_item = config_.pseudo_tokens;
    pw.tokens = ag::reshape(out, {features.rows() * pw.per_item, token_width_});
    pw.provenance = Provenance::sketch;
    return pw;
}

PseudoWords Composer::difference_token(const Var& photo_global, const Var& sketch_global) const {
    if (photo_global.shape() != sketch_global.shape())
        throw ConfigError("difference_token: shape " + shape_str(photo_global.shape()) + " vs " +
                          shape_str(sketch_global.shape()));
    PseudoWords pw = invert(ag::abs(ag::sub(photo_global, sketch_global)));
    pw.provenance = Provenance::difference;
    return pw;
}

Var Composer::compose(const Var& prompt, const Var& pseudo, const Var& tail) const {
    if (!pseudo.defined() || pseudo.rows() == 0) throw InputError("compose needs a pseudo-word token");
    std::vector<Var> parts{prompt, pseudo};
    if (tail.defined() && tail.rows() > 0) {
        const std::size_t head = prompt.rows() + pseudo.rows() + 2;  // + start/end framing
        if (head >= context_length_) throw InputError("prompt and pseudo-words alone exceed the context length");
        const std::size_t room = context_length_ - head;
        if (tail.rows() > room) {
            spdlog::warn("composed query truncated: text tail of {} tokens cut to {}", tail.rows(), room);
            if (room > 0) {
                std::vector<std::size_t> keep(room);
                for (std::size_t i = 0; i < room; ++i) keep[i] = i;
                parts.push_back(ag::gather_rows(tail, keep));
            }
        } else {
            parts.push_back(tail);
        }
    }
    return ag::concat_rows(parts);
}

std::string query_tail(const std::string& text, const std::optional<std::string>& connector,
                       const std::vector<std::string>& known_connectors) {
    const std::string conn = connector.value_or("with");
    if (!conn.empty() && std::find(known_connectors.begin(), known_connectors.end(), conn) == known_connectors.end())
        spdlog::warn("connector \"{}\" is not in the connecting-word list; using it as given", conn);
    if (conn.empty()) return text;
    return conn + " " + text;
}

Tensor build_inference_query(const encoder::DualEncoder& enc, const Composer& comp, const Tensor& sketch,
                             const std::optional<std::string>& text, const std::optional<std::string>& connector,
                             const std::vector<std::string>& known_connectors) {
    ag::NoGradGuard ng;
    const auto feat = enc.encode_image(sketch, encoder::SourceKind::sketch);
    Tensor g = feat.global;
    g.shape = {1, g.size()};
    const PseudoWords sw = comp.invert(Var::constant(std::move(g)));
    Var tail;
    if (text && !text->empty() && text->find_first_not_of(" \t\r\n") != std::string::npos)
        tail = enc.embed_words(query_tail(*text, connector, known_connectors)).embeddings;
    Var seq = comp.compose(comp.prompt(), sw.item(0), tail);
    Tensor q = ag::normalize_rows(enc.encode_sequences({seq})).value();
    q.shape = {q.size()};
    return q;
}

}  // namespace duet::composer
