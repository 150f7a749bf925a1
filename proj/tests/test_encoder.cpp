#include <cmath>

#include "doctest.h"
#include "duet/encoder.hpp"
#include "duet/errors.hpp"
#include "duet/io.hpp"
#include "fixtures.hpp"

using namespace duet;
using namespace duet::encoder;
using duet::testing::cosine;
using duet::testing::random_image;
using duet::testing::tiny_encoder;

TEST_CASE("config validation") {
    auto c = duet::testing::tiny_config();
    c.patch_size = 5;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = duet::testing::tiny_config();
    c.context_length = 4;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    CHECK(EncoderConfig::vit_l14().patch_count() == 256);
    CHECK(EncoderConfig::vit_l14().embed_dim == 768);
}

TEST_CASE("image features: shapes and determinism") {
    auto enc = tiny_encoder();
    auto img = random_image(16, 1);
    auto a = enc.encode_image(img);
    auto b = enc.encode_image(img);
    CHECK(a.global.shape == Shape{16});
    CHECK(a.patches.shape == Shape{4, 16});
    CHECK(a.global.data == b.global.data);
    CHECK(a.patches.data == b.patches.data);
}

TEST_CASE("batched encoding matches per-image encoding") {
    auto enc = tiny_encoder();
    auto i1 = random_image(16, 1), i2 = random_image(16, 2);
    VisualBatch vb;
    {
        ag::NoGradGuard ng;
        vb = enc.encode_images({&i1, &i2});
    }
    auto f2 = enc.encode_image(i2);
    for (std::size_t j = 0; j < 16; ++j) CHECK(vb.global.value().at(1, j) == doctest::Approx(f2.global[j]).epsilon(1e-12));
    for (std::size_t j = 0; j < f2.patches.size(); ++j)
        CHECK(vb.patches.value()[4 * 16 + j] == doctest::Approx(f2.patches[j]).epsilon(1e-12));
}

TEST_CASE("bad image input") {
    auto enc = tiny_encoder();
    Tensor wrong({3, 8, 8});
    CHECK_THROWS_AS(enc.encode_image(wrong), ConfigError);
    auto img = random_image(16, 1);
    img[5] = std::nan("");
    CHECK_THROWS_AS(enc.encode_image(img), InputError);
}

TEST_CASE("one-pixel perturbation barely moves the global feature") {
    auto enc = tiny_encoder();
    auto img = random_image(16, 3);
    auto moved = img;
    moved[40] += 0.5;
    CHECK(cosine(enc.encode_image(img).global, enc.encode_image(moved).global) > 0.99);
}

TEST_CASE("patchify order matches a flattened convolution kernel") {
    Tensor img({3, 4, 4});
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>(i);
    auto p = patchify({&img}, 4, 2);
    CHECK(p.shape == Shape{4, 12});
    // patch (py=1, px=0), channel 2, offset (y=1, x=1) -> pixel (c=2, y=3, x=1)
    CHECK(p.at(2, (2 * 2 + 1) * 2 + 1) == img[(2 * 4 + 3) * 4 + 1]);
}

TEST_CASE("word embeddings") {
    auto enc = tiny_encoder();
    CHECK_THROWS_AS(enc.embed_words("   "), InputError);
    auto ids = enc.tokenizer().encode("a photo of");
    auto seq = enc.embed_words("a photo of");
    CHECK(seq.length() == ids.size());
    CHECK(seq.embeddings.value().data == enc.embed_words("a photo of").embeddings.value().data);
    CHECK_FALSE(seq.embeddings.requires_grad());
}

TEST_CASE("unpadded sequence path agrees with the padded reference encoder") {
    auto enc = tiny_encoder();
    for (const std::string s : {"a photo of a shoe", "with red laces", "in origami"}) {
        auto fast = enc.encode_sequence(enc.embed_words(s));
        auto ref = enc.encode_text_reference(s);
        CHECK(cosine(fast, ref) >= 0.999);
        for (std::size_t j = 0; j < fast.size(); ++j) CHECK(fast[j] == doctest::Approx(ref[j]).epsilon(1e-9));
    }
}

TEST_CASE("distinct phrases encode differently; repeated calls are identical") {
    auto enc = tiny_encoder();
    auto a = enc.encode_sequence(enc.embed_words("as a doodle"));
    auto b = enc.encode_sequence(enc.embed_words("in origami"));
    CHECK(a.data != b.data);
    CHECK(a.data == enc.encode_sequence(enc.embed_words("as a doodle")).data);
}

TEST_CASE("over-length sequences are rejected") {
    auto enc = tiny_encoder();
    ag::Var long_seq = ag::Var::constant(Tensor({15, 16}));
    CHECK_THROWS_AS(enc.encode_sequences({long_seq}), InputError);
}

TEST_CASE("trainable set is exactly the vision LayerNorms") {
    auto enc = tiny_encoder();
    auto names = enc.layernorm_parameter_names();
    std::size_t count = 0;
    for (const auto& n : names) {
        CHECK(n.rfind("visual.", 0) == 0);
        CHECK(n.find("ln_") != std::string::npos);
        count += enc.params().at(n).size();
    }
    // ln_pre, ln_1, ln_2, ln_post: 4 LayerNorms x (gamma + beta) x width 16
    CHECK(count == 4 * 2 * 16);
    for (const auto& [n, t] : enc.trainable_parameters()) CHECK(n.rfind("text.", 0) != 0);
}

TEST_CASE("desk-tiny LayerNorm share is under one percent") {
    EncoderConfig c;  // desk-tiny geometry
    DualEncoder enc(c, duet::testing::tiny_tokenizer(), 1);
    std::size_t ln = 0;
    for (const auto& [n, t] : enc.trainable_parameters()) ln += t.size();
    CHECK(ln == (2 + 2 * 2) * 2 * 64);
    CHECK(static_cast<double>(ln) < 0.01 * static_cast<double>(enc.total_parameter_count()));
}

TEST_CASE("gradient mask under the LayerNorm-only policy") {
    auto enc = tiny_encoder();
    enc.set_training_policy(TrainingPolicy::layernorm_only);
    auto img = random_image(16, 4);
    auto vb = enc.encode_images({&img});
    auto text = enc.encode_sequences({enc.embed_words("a photo of a shoe").embeddings});
    auto loss = ag::sum(ag::cosine_distance_rows(vb.global, text));
    loss.backward();
    const auto ln = enc.layernorm_parameter_names();
    double ln_norm = 0;
    for (const auto& [name, v] : enc.params().all()) {
        const bool is_ln = std::find(ln.begin(), ln.end(), name) != ln.end();
        if (is_ln) {
            for (double g : v.grad().data) ln_norm += g * g;
        } else {
            CHECK_MESSAGE(!v.has_grad(), name);
        }
    }
    CHECK(ln_norm > 0);
}

TEST_CASE("save and load round trip through HF tensor names") {
    auto enc = tiny_encoder();
    auto dir = std::filesystem::temp_directory_path() / "duet_encoder_rt";
    std::filesystem::remove_all(dir);
    enc.save(dir);
    auto back = DualEncoder::load(dir);
    CHECK(back.config().embed_dim == 16);
    auto img = random_image(16, 5);
    auto a = enc.encode_image(img).global, b = back.encode_image(img).global;
    for (std::size_t j = 0; j < a.size(); ++j) CHECK(a[j] == doctest::Approx(b[j]).epsilon(1e-4));
    auto ta = enc.encode_sequence(enc.embed_words("with blue laces"));
    auto tb = back.encode_sequence(back.embed_words("with blue laces"));
    CHECK(cosine(ta, tb) > 0.99999);
    auto hf = io::read_safetensors(dir / "backbone.safetensors");
    CHECK(hf.tensors.count("vision_model.encoder.layers.0.self_attn.q_proj.weight") == 1);
    CHECK(hf.tensors.at("vision_model.embeddings.patch_embedding.weight").shape == Shape{16, 3, 8, 8});
    std::filesystem::remove_all(dir);
}
