#pragma once
// Visual-to-word converter, learned prompt, and composed token sequences.

#include <optional>
#include <string>
#include <vector>

#include "duet/encoder.hpp"
#include "duet/params.hpp"

namespace duet::composer {

struct ComposerConfig {
    std::size_t pseudo_tokens = 1;
    std::size_t hidden_mult = 2;  // converter hidden width = hidden_mult * embed_dim
    std::string prompt_init = "a photo of";
};

void to_json(nlohmann::json& j, const ComposerConfig& c);
void from_json(const nlohmann::json& j, ComposerConfig& c);

enum class Provenance { sketch, difference };

// Tokens produced by the converter for a batch: [B*k x w], item b owns
// rows b*k .. b*k+k-1.
struct PseudoWords {
    ag::Var tokens;
    std::size_t per_item = 1;
    Provenance provenance = Provenance::sketch;

    ag::Var item(std::size_t b) const;
    std::size_t batch() const { return tokens.rows() / per_item; }
};

class Composer {
public:
    Composer(const encoder::DualEncoder& enc, ComposerConfig config, std::uint64_t seed);

    const ComposerConfig& config() const { return config_; }

    // features: [B x d] visual features. Throws ConfigError on a width mismatch.
    PseudoWords invert(const ag::Var& features) const;
    // Converter applied to |photo - sketch|, sharing weights with invert.
    PseudoWords difference_token(const ag::Var& photo_global, const ag::Var& sketch_global) const;

    const ag::Var& prompt() const { return params_.at("prompt"); }

    // prompt || pseudo || tail. A tail that would push the framed sequence
    // past the context length is cut from the right with a warning.
    ag::Var compose(const ag::Var& prompt, const ag::Var& pseudo, const ag::Var& tail = ag::Var()) const;

    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

private:
    ag::Var converter(const ag::Var& x) const;

    ComposerConfig config_;
    std::size_t embed_dim_;
    std::size_t token_width_;
    std::size_t context_length_;
    ParamStore params_;
};

// Text tail for an inference query: "<connector> <text>". A missing
// connector defaults to "with"; an empty one means none. Unknown connectors
// are passed through with a warning.
std::string query_tail(const std::string& text, const std::optional<std::string>& connector,
                       const std::vector<std::string>& known_connectors);

// Unit-normalized composed query feature for a sketch with optional text.
Tensor build_inference_query(const encoder::DualEncoder& enc, const Composer& comp, const Tensor& sketch,
                             const std::optional<std::string>& text, const std::optional<std::string>& connector,
                             const std::vector<std::string>& known_connectors);

}  // namespace duet::composer
