#pragma once
// Contrastive image-caption pretraining for small CLIP-layout backbones on
// procedurally rendered shapes. Produces the desk-scale stand-in for a
// released vision-language checkpoint.

#include <functional>

#include "duet/datasets.hpp"
#include "duet/encoder.hpp"

namespace duet::trainer {

struct PretrainConfig {
    encoder::EncoderConfig encoder = encoder::EncoderConfig::desk_tiny();
    std::size_t merges = 256;
    std::size_t steps = 4000;
    std::size_t batch_size = 64;
    double lr = 1e-3;
    double weight_decay = 0.01;
    std::size_t warmup = 200;
    double temperature = 0.07;
    std::uint64_t seed = 0;
    int render_side = 64;
    // Weight of an extra sketch/photo InfoNCE term over distinct geometries
    // (0 disables). Stands in for the cross-depiction alignment a web-scale
    // checkpoint already has.
    double pair_weight = 1.0;
    std::size_t pair_batch = 32;
};

struct PretrainReport {
    double initial_loss = 0.0;  // mean over the first 50 steps
    double final_loss = 0.0;    // mean over the last 50 steps
    std::size_t steps = 0;
};

// A caption for one rendered shape; attributes are dropped at random so
// single words ("red", "circle") carry meaning on their own.
std::string shape_caption(const datasets::Geometry& g, const datasets::ColorName& color, datasets::Style style,
                          std::mt19937_64& rng);

// Text the tokenizer is fitted on: every caption template plus the shipped
// phrase lists.
std::vector<std::string> pretrain_corpus();

encoder::DualEncoder pretrain_backbone(const PretrainConfig& cfg, PretrainReport* report = nullptr,
                                       const std::function<void(std::size_t, double)>& on_step = {});

}  // namespace duet::trainer
