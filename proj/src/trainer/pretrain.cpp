#include "duet/pretrain.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "duet/trainer.hpp"

namespace duet::trainer {

using namespace duet::datasets;
using ag::Var;

namespace {

const std::vector<std::string>& connectors() {
    static const std::vector<std::string> c{"with", "in", "having", "and"};
    return c;
}

template <class T>
const T& pick(const std::vector<T>& v, std::mt19937_64& rng) {
    return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
}

bool coin(std::mt19937_64& rng, double p) { return std::bernoulli_distribution(p)(rng); }

}  // namespace

std::string shape_caption(const Geometry& g, const ColorName& color, Style style, std::mt19937_64& rng) {
    static const PhraseSet prompts = PhraseSet::shipped(PhraseKind::handcrafted_prompt);
    static const PhraseSet neutral = PhraseSet::shipped(PhraseKind::neutral_text);
    const std::string shape = shape_name(g.shape);
    std::string sz = coin(rng, 0.9) ? size_name(g.size) + " " : "";
    std::string where = coin(rng, 0.9) ? " in the " + position_name(g.position) : "";

    if (style == Style::sketch) {
        switch (std::uniform_int_distribution<int>(0, 2)(rng)) {
            case 0: return "a sketch of a " + sz + shape + where;
            case 1: return "a " + sz + shape + where + " " + neutral.sample(rng);
            default: return sz + shape + where;
        }
    }
    const std::string prefix = coin(rng, 0.5) ? prompts.sample(rng) + " " : "";
    switch (std::uniform_int_distribution<int>(0, 3)(rng)) {
        case 0: return prefix + sz + color.name + " " + shape + where;
        case 1: return prefix + sz + shape + where + " " + pick(connectors(), rng) + " " + color.name;
        case 2: return pick(connectors(), rng) + " " + color.name;
        default: return prefix + sz + shape + " " + pick(connectors(), rng) + " " + color.name + where;
    }
}

std::vector<std::string> pretrain_corpus() {
    std::vector<std::string> lines;
    std::mt19937_64 rng(12345);
    for (const auto& g : fixture_geometries())
        for (const auto& c : fixture_colors())
            for (int i = 0; i < 4; ++i) {
                lines.push_back(shape_caption(g, c, Style::photo, rng));
                lines.push_back(shape_caption(g, c, Style::sketch, rng));
            }
    for (auto kind : {PhraseKind::neutral_text, PhraseKind::handcrafted_prompt, PhraseKind::connecting_word})
        for (const auto& p : PhraseSet::shipped(kind).phrases) lines.push_back(p);
    return lines;
}

encoder::DualEncoder pretrain_backbone(const PretrainConfig& cfg, PretrainReport* report,
                                       const std::function<void(std::size_t, double)>& on_step) {
    auto tok = text::BpeTokenizer::train(pretrain_corpus(), cfg.merges);
    encoder::DualEncoder enc(cfg.encoder, std::move(tok), cfg.seed);
    enc.set_training_policy(encoder::TrainingPolicy::all);

    AdamW::Group all{"backbone", cfg.lr, {}};
    for (const auto& [name, v] : enc.params().all()) all.params.emplace_back(name, v);
    AdamW opt({all}, cfg.weight_decay, 0.9, 0.98, 1e-6);

    std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    const auto& geoms = fixture_geometries();
    const auto& colors = fixture_colors();
    const int res = static_cast<int>(cfg.encoder.image_resolution);
    std::vector<std::size_t> labels(cfg.batch_size);
    std::iota(labels.begin(), labels.end(), 0);
    std::vector<double> losses;

    for (std::size_t step = 0; step < cfg.steps; ++step) {
        std::vector<Tensor> images;
        std::vector<Var> seqs;
        for (std::size_t b = 0; b < cfg.batch_size; ++b) {
            const auto& g = pick(geoms, rng);
            const auto& c = pick(colors, rng);
            const Style style = coin(rng, 0.5) ? Style::photo : Style::sketch;
            images.push_back(image::to_model_input(render_shape(g, c, style, cfg.render_side, rng), res));
            seqs.push_back(enc.embed_words(shape_caption(g, c, style, rng)).embeddings);
        }
        std::vector<const Tensor*> ptrs;
        for (const auto& t : images) ptrs.push_back(&t);
        const Var img = ag::normalize_rows(enc.encode_images(ptrs).global);
        const Var txt = ag::normalize_rows(enc.encode_sequences(seqs));
        const Var logits = ag::scale(ag::matmul(img, ag::transpose(txt)), 1.0 / cfg.temperature);
        Var loss =
            ag::scale(ag::add(ag::cross_entropy(logits, labels), ag::cross_entropy(ag::transpose(logits), labels)), 0.5);

        if (cfg.pair_weight > 0.0) {
            std::vector<std::size_t> order(geoms.size());
            std::iota(order.begin(), order.end(), 0);
            std::shuffle(order.begin(), order.end(), rng);
            order.resize(std::min(cfg.pair_batch, order.size()));
            std::vector<Tensor> pair_imgs;
            for (const Style style : {Style::sketch, Style::photo})
                for (std::size_t g : order)
                    pair_imgs.push_back(image::to_model_input(
                        render_shape(geoms[g], pick(colors, rng), style, cfg.render_side, rng), res));
            std::vector<const Tensor*> pp;
            for (const auto& t : pair_imgs) pp.push_back(&t);
            const Var both = ag::normalize_rows(enc.encode_images(pp).global);
            const std::size_t n = order.size();
            std::vector<std::size_t> first(n), second(n), ids(n);
            std::iota(first.begin(), first.end(), 0);
            std::iota(second.begin(), second.end(), n);
            std::iota(ids.begin(), ids.end(), 0);
            const Var pl = ag::scale(
                ag::matmul(ag::gather_rows(both, first), ag::transpose(ag::gather_rows(both, second))), 1.0 / cfg.temperature);
            const Var pair_loss =
                ag::scale(ag::add(ag::cross_entropy(pl, ids), ag::cross_entropy(ag::transpose(pl), ids)), 0.5);
            loss = ag::add(loss, ag::scale(pair_loss, cfg.pair_weight));
        }

        const double warm = cfg.warmup ? std::min(1.0, static_cast<double>(step + 1) / cfg.warmup) : 1.0;
        const double cosine = 0.55 + 0.45 * std::cos(M_PI * static_cast<double>(step) / cfg.steps);
        opt.set_lr(0, cfg.lr * warm * cosine);

        loss.backward();
        opt.clip_grad_norm(1.0);
        opt.step();
        opt.zero_grad();
        losses.push_back(loss.item());
        if (on_step) on_step(step, losses.back());
        if ((step + 1) % 100 == 0) spdlog::info("pretrain step {}/{}: loss {:.4f}", step + 1, cfg.steps, losses.back());
    }
    enc.set_training_policy(encoder::TrainingPolicy::frozen);
    if (report) {
        const std::size_t w = std::min<std::size_t>(50, losses.size());
        report->steps = losses.size();
        if (w) {
            report->initial_loss = std::accumulate(losses.begin(), losses.begin() + w, 0.0) / w;
            report->final_loss = std::accumulate(losses.end() - w, losses.end(), 0.0) / w;
        }
    }
    return enc;
}

}  // namespace duet::trainer
