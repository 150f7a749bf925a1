#pragma once
// Dual encoder adapter: a CLIP-layout vision transformer and causal text
// transformer over a shared embedding space of width embed_dim.
//
// Tensor names and layouts follow the Hugging Face CLIPModel safetensors
// convention (weights stored [out x in]), so released CLIP checkpoints load
// directly. Internally linear weights are kept transposed ([in x out]).
//
// Only the vision LayerNorm parameters are ever trainable after loading.

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "duet/autograd.hpp"
#include "duet/params.hpp"
#include "duet/tokenizer.hpp"
#include "json.hpp"

namespace duet::encoder {

struct EncoderConfig {
    std::string backbone_id = "desk-tiny";
    std::size_t embed_dim = 64;  // d: joint embedding width
    std::size_t image_resolution = 32;
    std::size_t patch_size = 8;
    std::size_t vision_width = 64;
    std::size_t vision_layers = 2;
    std::size_t vision_heads = 4;
    std::size_t text_width = 64;
    std::size_t text_layers = 2;
    std::size_t text_heads = 4;
    std::size_t context_length = 32;
    std::size_t vocab_size = 0;  // filled from the tokenizer

    std::size_t patch_count() const;
    void validate() const;

    static EncoderConfig desk_tiny();
    // ViT-L/14 at 224px with the 77-token CLIP text tower.
    static EncoderConfig vit_l14();
    // Reads a Hugging Face CLIPModel config.json.
    static EncoderConfig from_hf_config(const nlohmann::json& j);
};

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);

enum class SourceKind { sketch, photo };

// Inference-mode features for one image.
struct VisualFeature {
    Tensor global;   // [d]
    Tensor patches;  // [T x d]
    SourceKind source_kind = SourceKind::photo;
};

// Differentiable features for a batch of images.
struct VisualBatch {
    ag::Var global;   // [B x d]
    ag::Var patches;  // [B*T x d]
    std::size_t batch = 0;
    std::size_t tokens = 0;
};

// Word-token embeddings, width text_width, without start/end framing.
struct TokenSequence {
    ag::Var embeddings;  // [L x text_width]
    std::size_t length() const { return embeddings.defined() ? embeddings.rows() : 0; }
};

enum class TrainingPolicy {
    frozen,          // nothing trainable
    layernorm_only,  // vision LayerNorm gamma/beta
    all,             // every parameter (backbone pretraining only)
};

class DualEncoder {
public:
    DualEncoder(EncoderConfig config, text::BpeTokenizer tokenizer, std::uint64_t seed);

    // Directory layout: backbone.json, backbone.safetensors, merges.txt.
    static DualEncoder load(const std::filesystem::path& dir);
    void save(const std::filesystem::path& dir) const;

    const EncoderConfig& config() const { return config_; }
    const text::BpeTokenizer& tokenizer() const { return *tokenizer_; }

    // image: [3 x R x R] normalized model input. Deterministic, no graph.
    VisualFeature encode_image(const Tensor& image, SourceKind kind = SourceKind::photo) const;
    // Batched, differentiable w.r.t. whatever the training policy enables.
    VisualBatch encode_images(const std::vector<const Tensor*>& images) const;

    // Word-token embeddings of the text (the table is always frozen).
    TokenSequence embed_words(const std::string& text) const;
    TokenSequence embed_tokens(const std::vector<text::TokenId>& ids) const;

    // Frames each sequence with start/end tokens, runs the text transformer
    // and projects the end-token state. seqs[i]: [L_i x text_width].
    // Throws InputError when L_i + 2 exceeds context_length.
    ag::Var encode_sequences(const std::vector<ag::Var>& seqs) const;
    Tensor encode_sequence(const TokenSequence& seq) const;

    // Reference text path: tokenize with start/end, pad to context_length,
    // run the full padded sequence and read the end-token position.
    Tensor encode_text_reference(const std::string& text) const;

    void set_training_policy(TrainingPolicy policy);
    TrainingPolicy training_policy() const { return policy_; }

    // Exactly the vision-encoder LayerNorm parameters.
    std::vector<std::string> layernorm_parameter_names() const;
    std::map<std::string, Tensor> trainable_parameters() const;
    std::size_t total_parameter_count() const { return params_.numel(); }

    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    std::string fingerprint() const;

private:
    ag::Var vision_tower(const Tensor& patch_pixels, std::size_t batch) const;
    ag::Var block(const ag::Var& x, const std::string& prefix, std::size_t width, std::size_t heads,
                  const std::vector<std::size_t>& lengths, bool causal) const;
    const ag::Var& p(const std::string& name) const { return params_.at(name); }

    EncoderConfig config_;
    std::shared_ptr<const text::BpeTokenizer> tokenizer_;
    ParamStore params_;
    TrainingPolicy policy_ = TrainingPolicy::frozen;
};

// Converts [3 x R x R] images into [B*T x 3*P*P] patch rows in (c, y, x)
// order, matching a flattened [w x 3 x P x P] convolution kernel.
Tensor patchify(const std::vector<const Tensor*>& images, std::size_t resolution, std::size_t patch);

}  // namespace duet::encoder
