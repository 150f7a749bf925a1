#include "duet/encoder.hpp"

#include <cmath>
#include <random>

#include "duet/errors.hpp"
#include "duet/io.hpp"

namespace duet::encoder {

namespace fs = std::filesystem;
using nlohmann::json;
using ag::Var;

// ---- config ----------------------------------------------------------------

std::size_t EncoderConfig::patch_count() const {
    const std::size_t side = image_resolution / patch_size;
    return side * side;
}

void EncoderConfig::validate() const {
    if (embed_dim == 0) throw ConfigError("embed_dim must be positive");
    if (context_length < 5) throw ConfigError("context_length must be at least 5");
    if (patch_size == 0 || image_resolution % patch_size != 0)
        throw ConfigError("image_resolution must be a multiple of patch_size");
    if (vision_heads == 0 || vision_width % vision_heads != 0)
        throw ConfigError("vision_width must be divisible by vision_heads");
    if (text_heads == 0 || text_width % text_heads != 0)
        throw ConfigError("text_width must be divisible by text_heads");
    if (vision_layers == 0 || text_layers == 0) throw ConfigError("encoders need at least one layer");
}

EncoderConfig EncoderConfig::desk_tiny() { return EncoderConfig{}; }

EncoderConfig EncoderConfig::vit_l14() {
    EncoderConfig c;
    c.backbone_id = "ViT-L/14";
    c.embed_dim = 768;
    c.image_resolution = 224;
    c.patch_size = 14;
    c.vision_width = 1024;
    c.vision_layers = 24;
    c.vision_heads = 16;
    c.text_width = 768;
    c.text_layers = 12;
    c.text_heads = 12;
    c.context_length = 77;
    c.vocab_size = 49408;
    return c;
}

EncoderConfig EncoderConfig::from_hf_config(const json& j) {
    EncoderConfig c;
    const auto& v = j.at("vision_config");
    const auto& t = j.at("text_config");
    c.backbone_id = j.value("_name_or_path", std::string("hf-clip"));
    c.embed_dim = j.value("projection_dim", 512);
    c.image_resolution = v.value("image_size", 224);
    c.patch_size = v.value("patch_size", 32);
    c.vision_width = v.value("hidden_size", 768);
    c.vision_layers = v.value("num_hidden_layers", 12);
    c.vision_heads = v.value("num_attention_heads", 12);
    c.text_width = t.value("hidden_size", 512);
    c.text_layers = t.value("num_hidden_layers", 12);
    c.text_heads = t.value("num_attention_heads", 8);
    c.context_length = t.value("max_position_embeddings", 77);
    c.vocab_size = t.value("vocab_size", 49408);
    return c;
}

void to_json(json& j, const EncoderConfig& c) {
    j = json{{"backbone_id", c.backbone_id},       {"embed_dim", c.embed_dim},
             {"image_resolution", c.image_resolution}, {"patch_size", c.patch_size},
             {"vision_width", c.vision_width},     {"vision_layers", c.vision_layers},
             {"vision_heads", c.vision_heads},     {"text_width", c.text_width},
             {"text_layers", c.text_layers},       {"text_heads", c.text_heads},
             {"context_length", c.context_length}, {"vocab_size", c.vocab_size}};
}

void from_json(const json& j, EncoderConfig& c) {
    c.backbone_id = j.at("backbone_id");
    c.embed_dim = j.at("embed_dim");
    c.image_resolution = j.at("image_resolution");
    c.patch_size = j.at("patch_size");
    c.vision_width = j.at("vision_width");
    c.vision_layers = j.at("vision_layers");
    c.vision_heads = j.at("vision_heads");
    c.text_width = j.at("text_width");
    c.text_layers = j.at("text_layers");
    c.text_heads = j.at("text_heads");
    c.context_length = j.at("context_length");
    c.vocab_size = j.value("vocab_size", std::size_t{0});
}

// ---- construction ----------------------------------------------------------

namespace {

Tensor normal(Shape shape, double sd, std::mt19937_64& rng) {
    std::normal_distribution<double> nd(0.0, sd);
    Tensor t(std::move(shape));
    for (double& v : t.data) v = nd(rng);
    return t;
}

void add_tower(ParamStore& ps, const std::string& tower, std::size_t w, std::size_t layers,
               std::mt19937_64& rng) {
    const double attn_sd = 1.0 / std::sqrt(static_cast<double>(w));
    const double resid_sd = attn_sd / std::sqrt(2.0 * layers);
    for (std::size_t i = 0; i < layers; ++i) {
        const std::string b = tower + ".blocks." + std::to_string(i) + ".";
        ps.add(b + "ln_1.weight", Tensor({w}, 1.0));
        ps.add(b + "ln_1.bias", Tensor({w}));
        ps.add(b + "attn.qkv.weight", normal({w, 3 * w}, attn_sd, rng));
        ps.add(b + "attn.qkv.bias", Tensor({3 * w}));
        ps.add(b + "attn.out.weight", normal({w, w}, resid_sd, rng));
        ps.add(b + "attn.out.bias", Tensor({w}));
        ps.add(b + "ln_2.weight", Tensor({w}, 1.0));
        ps.add(b + "ln_2.bias", Tensor({w}));
        ps.add(b + "mlp.fc1.weight", normal({w, 4 * w}, 1.0 / std::sqrt(2.0 * w), rng));
        ps.add(b + "mlp.fc1.bias", Tensor({4 * w}));
        ps.add(b + "mlp.fc2.weight", normal({4 * w, w}, resid_sd, rng));
        ps.add(b + "mlp.fc2.bias", Tensor({w}));
    }
}

bool is_vision_layernorm(const std::string& name) {
    if (name.rfind("visual.", 0) != 0) return false;
    return name.find("ln_") != std::string::npos;
}

// ---- HF CLIPModel naming ---------------------------------------------------

std::string hf_tower(const std::string& tower) { return tower == "visual" ? "vision_model" : "text_model"; }

std::map<std::string, Tensor> to_hf(const ParamStore& ps, const EncoderConfig& c) {
    std::map<std::string, Tensor> out;
    auto val = [&](const std::string& n) -> const Tensor& { return ps.at(n).value(); };
    auto tr = [](const Tensor& t) { return transpose2d(t); };
    Tensor cls = val("visual.class_embedding");
    cls.shape = {c.vision_width};
    out["vision_model.embeddings.class_embedding"] = cls;
    Tensor patch = tr(val("visual.patch_embed.weight"));
    patch.shape = {c.vision_width, 3, c.patch_size, c.patch_size};
    out["vision_model.embeddings.patch_embedding.weight"] = patch;
    out["vision_model.embeddings.position_embedding.weight"] = val("visual.positional_embedding");
    out["vision_model.pre_layrnorm.weight"] = val("visual.ln_pre.weight");
    out["vision_model.pre_layrnorm.bias"] = val("visual.ln_pre.bias");
    out["vision_model.post_layernorm.weight"] = val("visual.ln_post.weight");
    out["vision_model.post_layernorm.bias"] = val("visual.ln_post.bias");
    out["visual_projection.weight"] = tr(val("visual.proj"));
    out["text_model.embeddings.token_embedding.weight"] = val("text.token_embedding");
    out["text_model.embeddings.position_embedding.weight"] = val("text.positional_embedding");
    out["text_model.final_layer_norm.weight"] = val("text.ln_final.weight");
    out["text_model.final_layer_norm.bias"] = val("text.ln_final.bias");
    out["text_projection.weight"] = tr(val("text.proj"));

    for (const std::string tower : {"visual", "text"}) {
        const std::size_t w = tower == "visual" ? c.vision_width : c.text_width;
        const std::size_t layers = tower == "visual" ? c.vision_layers : c.text_layers;
        for (std::size_t i = 0; i < layers; ++i) {
            const std::string b = tower + ".blocks." + std::to_string(i) + ".";
            const std::string h = hf_tower(tower) + ".encoder.layers." + std::to_string(i) + ".";
            out[h + "layer_norm1.weight"] = val(b + "ln_1.weight");
            out[h + "layer_norm1.bias"] = val(b + "ln_1.bias");
            out[h + "layer_norm2.weight"] = val(b + "ln_2.weight");
            out[h + "layer_norm2.bias"] = val(b + "ln_2.bias");
            const Tensor qkv_t = tr(val(b + "attn.qkv.weight"));  // [3w x w]
            const Tensor& qkv_b = val(b + "attn.qkv.bias");
            const char* names[3] = {"q_proj", "k_proj", "v_proj"};
            for (std::size_t k = 0; k < 3; ++k) {
                Tensor wk({w, w});
                std::copy_n(qkv_t.data.begin() + static_cast<long>(k * w * w), w * w, wk.data.begin());
                Tensor bk({w});
                std::copy_n(qkv_b.data.begin() + static_cast<long>(k * w), w, bk.data.begin());
                out[h + "self_attn." + names[k] + ".weight"] = wk;
                out[h + "self_attn." + names[k] + ".bias"] = bk;
            }
            out[h + "self_attn.out_proj.weight"] = tr(val(b + "attn.out.weight"));
            out[h + "self_attn.out_proj.bias"] = val(b + "attn.out.bias");
            out[h + "mlp.fc1.weight"] = tr(val(b + "mlp.fc1.weight"));
            out[h + "mlp.fc1.bias"] = val(b + "mlp.fc1.bias");
            out[h + "mlp.fc2.weight"] = tr(val(b + "mlp.fc2.weight"));
            out[h + "mlp.fc2.bias"] = val(b + "mlp.fc2.bias");
        }
    }
    return out;
}

std::map<std::string, Tensor> from_hf(const std::map<std::string, Tensor>& hf, const EncoderConfig& c) {
    auto get = [&](const std::string& n) -> const Tensor& {
        auto it = hf.find(n);
        if (it == hf.end()) throw LoadError("backbone weights lack tensor " + n);
        return it->second;
    };
    auto as2d = [](Tensor t, std::size_t r) {
        t.shape = {r, t.size() / r};
        return t;
    };
    std::map<std::string, Tensor> out;
    Tensor cls = get("vision_model.embeddings.class_embedding");
    cls.shape = {1, cls.size()};
    out["visual.class_embedding"] = cls;
    out["visual.patch_embed.weight"] =
        transpose2d(as2d(get("vision_model.embeddings.patch_embedding.weight"), c.vision_width));
    out["visual.positional_embedding"] =
        as2d(get("vision_model.embeddings.position_embedding.weight"), c.patch_count() + 1);
    out["visual.ln_pre.weight"] = get("vision_model.pre_layrnorm.weight");
    out["visual.ln_pre.bias"] = get("vision_model.pre_layrnorm.bias");
    out["visual.ln_post.weight"] = get("vision_model.post_layernorm.weight");
    out["visual.ln_post.bias"] = get("vision_model.post_layernorm.bias");
    out["visual.proj"] = transpose2d(as2d(get("visual_projection.weight"), c.embed_dim));
    out["text.token_embedding"] = as2d(get("text_model.embeddings.token_embedding.weight"), c.vocab_size);
    out["text.positional_embedding"] =
        as2d(get("text_model.embeddings.position_embedding.weight"), c.context_length);
    out["text.ln_final.weight"] = get("text_model.final_layer_norm.weight");
    out["text.ln_final.bias"] = get("text_model.final_layer_norm.bias");
    out["text.proj"] = transpose2d(as2d(get("text_projection.weight"), c.embed_dim));

    for (const std::string tower : {"visual", "text"}) {
        const std::size_t w = tower == "visual" ? c.vision_width : c.text_width;
        const std::size_t layers = tower == "visual" ? c.vision_layers : c.text_layers;
        for (std::size_t i = 0; i < layers; ++i) {
            const std::string b = tower + ".blocks." + std::to_string(i) + ".";
            const std::string h = hf_tower(tower) + ".encoder.layers." + std::to_string(i) + ".";
            out[b + "ln_1.weight"] = get(h + "layer_norm1.weight");
            out[b + "ln_1.bias"] = get(h + "layer_norm1.bias");
            out[b + "ln_2.weight"] = get(h + "layer_norm2.weight");
            out[b + "ln_2.bias"] = get(h + "layer_norm2.bias");
            Tensor qkv_t({3 * w, w});
            Tensor qkv_b({3 * w});
            const char* names[3] = {"q_proj", "k_proj", "v_proj"};
            for (std::size_t k = 0; k < 3; ++k) {
                const Tensor& wk = get(h + "self_attn." + names[k] + ".weight");
                const Tensor& bk = get(h + "self_attn." + names[k] + ".bias");
                std::copy(wk.data.begin(), wk.data.end(), qkv_t.data.begin() + static_cast<long>(k * w * w));
                std::copy(bk.data.begin(), bk.data.end(), qkv_b.data.begin() + static_cast<long>(k * w));
            }
            out[b + "attn.qkv.weight"] = transpose2d(qkv_t);
            out[b + "attn.qkv.bias"] = qkv_b;
            out[b + "attn.out.weight"] = transpose2d(as2d(get(h + "self_attn.out_proj.weight"), w));
            out[b + "attn.out.bias"] = get(h + "self_attn.out_proj.bias");
            out[b + "mlp.fc1.weight"] = transpose2d(as2d(get(h + "mlp.fc1.weight"), 4 * w));
            out[b + "mlp.fc1.bias"] = get(h + "mlp.fc1.bias");
            out[b + "mlp.fc2.weight"] = transpose2d(as2d(get(h + "mlp.fc2.weight"), w));
            out[b + "mlp.fc2.bias"] = get(h + "mlp.fc2.bias");
        }
    }
    return out;
}

}  // namespace

DualEncoder::DualEncoder(EncoderConfig config, text::BpeTokenizer tokenizer, std::uint64_t seed)
    : config_(std::move(config)),
      tokenizer_(std::make_shared<const text::BpeTokenizer>(std::move(tokenizer))) {
    if (config_.vocab_size == 0) config_.vocab_size = tokenizer_->vocab_size();
    if (config_.vocab_size != tokenizer_->vocab_size())
        throw ConfigError("vocab_size " + std::to_string(config_.vocab_size) + " does not match tokenizer (" +
                          std::to_string(tokenizer_->vocab_size()) + ")");
    config_.validate();
    std::mt19937_64 rng(seed);
    const auto& c = config_;
    const std::size_t vw = c.vision_width, tw = c.text_width;
    params_.add("visual.class_embedding", normal({1, vw}, 1.0 / std::sqrt(double(vw)), rng));
    params_.add("visual.patch_embed.weight",
                normal({3 * c.patch_size * c.patch_size, vw}, 1.0 / std::sqrt(3.0 * c.patch_size * c.patch_size), rng));
    params_.add("visual.positional_embedding", normal({c.patch_count() + 1, vw}, 1.0 / std::sqrt(double(vw)), rng));
    params_.add("visual.ln_pre.weight", Tensor({vw}, 1.0));
    params_.add("visual.ln_pre.bias", Tensor({vw}));
    add_tower(params_, "visual", vw, c.vision_layers, rng);
    params_.add("visual.ln_post.weight", Tensor({vw}, 1.0));
    params_.add("visual.ln_post.bias", Tensor({vw}));
    params_.add("visual.proj", normal({vw, c.embed_dim}, 1.0 / std::sqrt(double(vw)), rng));

    params_.add("text.token_embedding", normal({c.vocab_size, tw}, 0.2, rng));
    params_.add("text.positional_embedding", normal({c.context_length, tw}, 0.1, rng));
    add_tower(params_, "text", tw, c.text_layers, rng);
    params_.add("text.ln_final.weight", Tensor({tw}, 1.0));
    params_.add("text.ln_final.bias", Tensor({tw}));
    params_.add("text.proj", normal({tw, c.embed_dim}, 1.0 / std::sqrt(double(tw)), rng));

    set_training_policy(TrainingPolicy::frozen);
}

DualEncoder DualEncoder::load(const fs::path& dir) {
    EncoderConfig config;
    fs::path weights;
    if (fs::exists(dir / "backbone.json")) {
        config = json::parse(io::read_text(dir / "backbone.json")).get<EncoderConfig>();
        weights = dir / "backbone.safetensors";
    } else if (fs::exists(dir / "config.json")) {
        config = EncoderConfig::from_hf_config(json::parse(io::read_text(dir / "config.json")));
        weights = dir / "model.safetensors";
    } else {
        throw LoadError("no backbone.json or config.json in " + dir.string());
    }
    auto tokenizer = text::BpeTokenizer::from_file(
        dir / "merges.txt", config.vocab_size > 514 ? config.vocab_size - 514 : 0);
    DualEncoder enc(config, std::move(tokenizer), 0);
    enc.params_.load(from_hf(io::read_safetensors(weights).tensors, enc.config_));
    return enc;
}

void DualEncoder::save(const fs::path& dir) const {
    fs::create_directories(dir);
    io::write_atomic(dir / "backbone.json", json(config_).dump(2) + "\n");
    tokenizer_->save(dir / "merges.txt");
    io::TensorArchive archive;
    archive.tensors = to_hf(params_, config_);
    archive.metadata["format"] = "pt";
    io::write_safetensors(dir / "backbone.safetensors", archive, io::DType::f32);
}

void DualEncoder::set_training_policy(TrainingPolicy policy) {
    policy_ = policy;
    for (const auto& [name, v] : params_.all()) {
        bool on = false;
        if (policy == TrainingPolicy::all) on = true;
        if (policy == TrainingPolicy::layernorm_only) on = is_vision_layernorm(name);
        params_.at(name).set_requires_grad(on);
    }
}

std::vector<std::string> DualEncoder::layernorm_parameter_names() const {
    std::vector<std::string> out;
    for (const auto& [name, v] : params_.all())
        if (is_vision_layernorm(name)) out.push_back(name);
    return out;
}

std::map<std::string, Tensor> DualEncoder::trainable_parameters() const {
    std::map<std::string, Tensor> out;
    for (const auto& name : layernorm_parameter_names()) out.emplace(name, params_.at(name).value());
    return out;
}

std::string DualEncoder::fingerprint() const {
    auto snap = params_.snapshot();
    return io::sha256_hex(json(config_).dump() + io::fingerprint(snap));
}

// ---- forward ---------------------------------------------------------------

Tensor patchify(const std::vector<const Tensor*>& images, std::size_t resolution, std::size_t patch) {
    const std::size_t side = resolution / patch;
    const std::size_t t = side * side;
    const std::size_t pp = 3 * patch * patch;
    Tensor out({images.size() * t, pp});
    for (std::size_t b = 0; b < images.size(); ++b) {
        const Tensor& img = *images[b];
        if (img.shape != Shape{3, resolution, resolution})
            throw ConfigError("image tensor " + shape_str(img.shape) + " does not match encoder resolution " +
                              std::to_string(resolution));
        if (!img.all_finite()) throw InputError("image contains NaN or Inf");
        for (std::size_t py = 0; py < side; ++py)
            for (std::size_t px = 0; px < side; ++px) {
                double* row = out.data.data() + (b * t + py * side + px) * pp;
                for (std::size_t c = 0; c < 3; ++c)
                    for (std::size_t y = 0; y < patch; ++y)
                        for (std::size_t x = 0; x < patch; ++x)
                            row[(c * patch + y) * patch + x] =
                                img.data[(c * resolution + py * patch + y) * resolution + px * patch + x];
            }
    }
    return out;
}

Var DualEncoder::block(const Var& x, const std::string& prefix, std::size_t width, std::size_t heads,
                       const std::vector<std::size_t>& lengths, bool causal) const {
    Var h = ag::layer_norm(x, p(prefix + "ln_1.weight"), p(prefix + "ln_1.bias"));
    Var qkv = ag::linear(h, p(prefix + "attn.qkv.weight"), p(prefix + "attn.qkv.bias"));
    Var att = ag::multi_head_attention(qkv, lengths, heads, causal);
    Var x1 = ag::add(x, ag::linear(att, p(prefix + "attn.out.weight"), p(prefix + "attn.out.bias")));
    Var h2 = ag::layer_norm(x1, p(prefix + "ln_2.weight"), p(prefix + "ln_2.bias"));
    Var m = ag::quick_gelu(ag::linear(h2, p(prefix + "mlp.fc1.weight"), p(prefix + "mlp.fc1.bias")));
    (void)width;
    return ag::add(x1, ag::linear(m, p(prefix + "mlp.fc2.weight"), p(prefix + "mlp.fc2.bias")));
}

Var DualEncoder::vision_tower(const Tensor& patch_pixels, std::size_t batch) const {
    const auto& c = config_;
    const std::size_t t = c.patch_count();
    Var emb = ag::matmul(Var::constant(patch_pixels), p("visual.patch_embed.weight"));  // [B*T x w]
    // Interleave the class token in front of each image's patches.
    Var all = ag::concat_rows({p("visual.class_embedding"), emb});
    std::vector<std::size_t> order, pos;
    order.reserve(batch * (t + 1));
    for (std::size_t b = 0; b < batch; ++b) {
        order.push_back(0);
        pos.push_back(0);
        for (std::size_t i = 0; i < t; ++i) {
            order.push_back(1 + b * t + i);
            pos.push_back(1 + i);
        }
    }
    Var x = ag::add(ag::gather_rows(all, order), ag::gather_rows(p("visual.positional_embedding"), pos));
    x = ag::layer_norm(x, p("visual.ln_pre.weight"), p("visual.ln_pre.bias"));
    const std::vector<std::size_t> lengths(batch, t + 1);
    for (std::size_t i = 0; i < c.vision_layers; ++i)
        x = block(x, "visual.blocks." + std::to_string(i) + ".", c.vision_width, c.vision_heads, lengths, false);
    x = ag::layer_norm(x, p("visual.ln_post.weight"), p("visual.ln_post.bias"));
    return ag::matmul(x, p("visual.proj"));  // [B*(T+1) x d]
}

VisualBatch DualEncoder::encode_images(const std::vector<const Tensor*>& images) const {
    if (images.empty()) throw InputError("encode_images on an empty batch");
    const auto& c = config_;
    const std::size_t t = c.patch_count();
    const std::size_t batch = images.size();
    Var out = vision_tower(patchify(images, c.image_resolution, c.patch_size), batch);
    std::vector<std::size_t> cls, patches;
    for (std::size_t b = 0; b < batch; ++b) {
        cls.push_back(b * (t + 1));
        for (std::size_t i = 0; i < t; ++i) patches.push_back(b * (t + 1) + 1 + i);
    }
    VisualBatch vb;
    vb.global = ag::gather_rows(out, cls);
    vb.patches = ag::gather_rows(out, patches);
    vb.batch = batch;
    vb.tokens = t;
    return vb;
}

VisualFeature DualEncoder::encode_image(const Tensor& image, SourceKind kind) const {
    ag::NoGradGuard ng;
    VisualBatch vb = encode_images({&image});
    VisualFeature f;
    f.global = vb.global.value();
    f.global.shape = {config_.embed_dim};
    f.patches = vb.patches.value();
    f.source_kind = kind;
    return f;
}

TokenSequence DualEncoder::embed_tokens(const std::vector<text::TokenId>& ids) const {
    std::vector<std::size_t> rows(ids.begin(), ids.end());
    ag::NoGradGuard ng;  // the word-embedding table never receives gradients
    TokenSequence seq;
    seq.embeddings = Var::constant(ag::gather_rows(p("text.token_embedding"), rows).value());
    return seq;
}

TokenSequence DualEncoder::embed_words(const std::string& text) const {
    const auto ids = tokenizer_->encode(text);
    if (ids.empty()) throw InputError("embed_words: text is empty after trimming");
    return embed_tokens(ids);
}

Var DualEncoder::encode_sequences(const std::vector<Var>& seqs) const {
    if (seqs.empty()) throw InputError("encode_sequences on an empty batch");
    const auto& c = config_;
    const Var& table = p("text.token_embedding");
    Var sot = ag::gather_rows(table, {static_cast<std::size_t>(tokenizer_->sot())});
    Var eot = ag::gather_rows(table, {static_cast<std::size_t>(tokenizer_->eot())});
    std::vector<Var> parts;
    std::vector<std::size_t> lengths, pos, ends;
    std::size_t off = 0;
    for (const Var& s : seqs) {
        if (s.cols() != c.text_width)
            throw ConfigError("token width " + std::to_string(s.cols()) + " != text width " +
                              std::to_string(c.text_width));
        const std::size_t len = s.rows() + 2;
        if (len > c.context_length)
            throw InputError("sequence of " + std::to_string(len) + " tokens exceeds context length " +
                             std::to_string(c.context_length));
        parts.push_back(sot);
        if (s.rows() > 0) parts.push_back(s);
        parts.push_back(eot);
        lengths.push_back(len);
        for (std::size_t i = 0; i < len; ++i) pos.push_back(i);
        off += len;
        ends.push_back(off - 1);
    }
    Var x = ag::add(ag::concat_rows(parts), ag::gather_rows(p("text.positional_embedding"), pos));
    for (std::size_t i = 0; i < c.text_layers; ++i)
        x = block(x, "text.blocks." + std::to_string(i) + ".", c.text_width, c.text_heads, lengths, true);
    Var last = ag::gather_rows(x, ends);
    last = ag::layer_norm(last, p("text.ln_final.weight"), p("text.ln_final.bias"));
    return ag::matmul(last, p("text.proj"));
}

Tensor DualEncoder::encode_sequence(const TokenSequence& seq) const {
    ag::NoGradGuard ng;
    Tensor out = encode_sequences({seq.embeddings}).value();
    out.shape = {config_.embed_dim};
    return out;
}

Tensor DualEncoder::encode_text_reference(const std::string& text) const {
    ag::NoGradGuard ng;
    const auto& c = config_;
    std::vector<std::size_t> ids{static_cast<std::size_t>(tokenizer_->sot())};
    for (auto id : tokenizer_->encode(text)) ids.push_back(static_cast<std::size_t>(id));
    if (ids.size() + 1 > c.context_length) throw InputError("text exceeds context length");
    ids.push_back(static_cast<std::size_t>(tokenizer_->eot()));
    const std::size_t eot_pos = ids.size() - 1;
    ids.resize(c.context_length, 0);
    std::vector<std::size_t> pos(c.context_length);
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i;
    Var x = ag::add(ag::gather_rows(p("text.token_embedding"), ids), ag::gather_rows(p("text.positional_embedding"), pos));
    for (std::size_t i = 0; i < c.text_layers; ++i)
        x = block(x, "text.blocks." + std::to_string(i) + ".", c.text_width, c.text_heads, {c.context_length}, true);
    x = ag::layer_norm(x, p("text.ln_final.weight"), p("text.ln_final.bias"));
    Tensor out = ag::matmul(ag::gather_rows(x, {eot_pos}), p("text.proj")).value();
    out.shape = {c.embed_dim};
    return out;
}

}  // namespace duet::encoder
