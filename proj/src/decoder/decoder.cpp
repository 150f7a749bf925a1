#include "duet/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "duet/errors.hpp"

namespace duet::decoder {

using ag::Var;
using nlohmann::json;

void to_json(json& j, const DecoderConfig& c) {
    j = json{{"in_dim", c.in_dim}, {"channels", c.channels}, {"grid", c.grid}, {"upsamples", c.upsamples}};
}

void from_json(const json& j, DecoderConfig& c) {
    c.in_dim = j.value("in_dim", c.in_dim);
    c.channels = j.value("channels", c.channels);
    c.grid = j.value("grid", c.grid);
    c.upsamples = j.value("upsamples", c.upsamples);
}

std::size_t Decoder::stage_channels(std::size_t stage) const {
    return std::max<std::size_t>(8, config_.channels >> stage);
}

Decoder::Decoder(DecoderConfig config, std::uint64_t seed) : config_(config) {
    if (config_.in_dim == 0 || config_.channels == 0 || config_.grid == 0)
        throw ConfigError("decoder dimensions must be positive");
    std::mt19937_64 rng(seed);
    auto normal = [&](Shape s, double sd) {
        std::normal_distribution<double> nd(0.0, sd);
        Tensor t(std::move(s));
        for (double& v : t.data) v = nd(rng);
        return t;
    };
    const std::size_t c0 = config_.channels, g = config_.grid;
    params_.add("fc.weight", normal({config_.in_dim, c0 * g * g}, 1.0 / std::sqrt(double(config_.in_dim))));
    params_.add("fc.bias", Tensor({c0 * g * g}));
    std::size_t cin = c0;
    for (std::size_t s = 0; s < config_.upsamples; ++s) {
        const std::size_t cout = stage_channels(s + 1);
        const std::string p = "up" + std::to_string(s);
        params_.add(p + ".weight", normal({cout, cin, 3, 3}, std::sqrt(2.0 / (9.0 * cin))));
        params_.add(p + ".bias", Tensor({cout}));
        cin = cout;
    }
    params_.add("out.weight", normal({3, cin, 3, 3}, std::sqrt(1.0 / (9.0 * cin))));
    params_.add("out.bias", Tensor({3}));
}

Var Decoder::decode(const Var& query) const {
    if (query.cols() != config_.in_dim)
        throw ConfigError("decoder input width " + std::to_string(query.cols()) + " != " +
                          std::to_string(config_.in_dim));
    const std::size_t b = query.rows(), g = config_.grid;
    Var x = ag::linear(query, params_.at("fc.weight"), params_.at("fc.bias"));
    x = ag::reshape(x, {b, config_.channels, g, g});
    for (std::size_t s = 0; s < config_.upsamples; ++s) {
        const std::string p = "up" + std::to_string(s);
        x = ag::relu(ag::conv3x3(ag::upsample2x(x), params_.at(p + ".weight"), params_.at(p + ".bias")));
    }
    x = ag::sigmoid(ag::conv3x3(x, params_.at("out.weight"), params_.at("out.bias")));
    const std::size_t side = config_.output_size();
    return ag::reshape(x, {b, 3 * side * side});
}

}  // namespace duet::decoder
