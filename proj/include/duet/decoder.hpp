#pragma once
// Reconstruction decoder G: query embedding -> [0,1] RGB image. Used only by
// the reconstruction loss during training.
//
// Layout: affine d -> C x g x g, then `upsamples` stages of
// (nearest 2x, conv3x3, ReLU), then conv3x3 -> 3 channels and a sigmoid.
// Output side = grid * 2^upsamples.
//
// A StyleGAN-style generator could replace this class; it only needs to
// accept a [B x d] query and return [B x 3*H*W] pixels.

#include "duet/params.hpp"
#include "json.hpp"

namespace duet::decoder {

struct DecoderConfig {
    std::size_t in_dim = 64;
    std::size_t channels = 16;
    std::size_t grid = 8;
    std::size_t upsamples = 2;

    std::size_t output_size() const { return grid << upsamples; }
};

void to_json(nlohmann::json& j, const DecoderConfig& c);
void from_json(const nlohmann::json& j, DecoderConfig& c);

class Decoder {
public:
    Decoder(DecoderConfig config, std::uint64_t seed);

    // query: [B x d] -> [B x 3*S*S] with S = output_size(), values in (0, 1).
    ag::Var decode(const ag::Var& query) const;

    const DecoderConfig& config() const { return config_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

private:
    std::size_t stage_channels(std::size_t stage) const;

    DecoderConfig config_;
    ParamStore params_;
};

}  // namespace duet::decoder
