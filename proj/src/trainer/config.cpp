#include <sstream>

#include "duet/errors.hpp"
#include "duet/io.hpp"
#include "duet/trainer.hpp"

namespace duet::trainer {

namespace fs = std::filesystem;
using nlohmann::json;

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (batch_size < 2) throw ConfigError("batch_size must be at least 2 (negatives are drawn in-batch)");
    for (double r : {lr.prompt, lr.layernorm, lr.decoder, lr.converter})
        if (!(r > 0.0)) throw ConfigError("learning rates must be positive");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("betas must lie in [0, 1)");
    if (grad_clip < 0.0) throw ConfigError("grad_clip must be non-negative");
    if (backbone.empty()) throw ConfigError("config needs a backbone path");
    if (manifest.empty()) throw ConfigError("config needs a manifest path");
    if (checkpoint_every == 0 || validate_every == 0) throw ConfigError("checkpoint/validate cadence must be >= 1");
    weights.validate();
    margins.validate();
    if (!toggles.any()) throw ConfigError("every loss is disabled");
}

namespace {

std::string resolve(const json& j, const char* key, const fs::path& base) {
    if (!j.contains(key)) return {};
    fs::path p = j.at(key).get<std::string>();
    if (p.is_relative()) p = base / p;
    return p.lexically_normal().string();
}

}  // namespace

TrainConfig TrainConfig::from_json(const json& j, const fs::path& base_dir) {
    TrainConfig c;
    try {
        c.backbone = resolve(j, "backbone", base_dir);
        c.manifest = resolve(j, "manifest", base_dir);
        if (j.contains("output_dir")) c.output_dir = resolve(j, "output_dir", base_dir);
        c.epochs = j.value("epochs", c.epochs);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.seed = j.value("seed", c.seed);
        c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
        c.validate_every = j.value("validate_every", c.validate_every);
        c.max_steps = j.value("max_steps", c.max_steps);
        if (j.contains("optimizer")) {
            const auto& o = j.at("optimizer");
            c.weight_decay = o.value("weight_decay", c.weight_decay);
            c.beta1 = o.value("beta1", c.beta1);
            c.beta2 = o.value("beta2", c.beta2);
            c.adam_eps = o.value("eps", c.adam_eps);
            c.grad_clip = o.value("grad_clip", c.grad_clip);
            if (o.contains("lr")) {
                const auto& l = o.at("lr");
                c.lr.prompt = l.value("prompt", c.lr.prompt);
                c.lr.layernorm = l.value("layernorm", c.lr.layernorm);
                c.lr.decoder = l.value("decoder", c.lr.decoder);
                c.lr.converter = l.value("converter", c.lr.converter);
            }
        }
        if (j.contains("loss")) {
            const auto& l = j.at("loss");
            if (l.contains("weights")) c.weights = l.at("weights").get<objectives::LossWeights>();
            if (l.contains("margins")) c.margins = l.at("margins").get<objectives::Margins>();
            c.ablation = l.value("ablation", c.ablation);
            if (l.contains("distance")) c.distance = objectives::parse_metric(l.at("distance").get<std::string>());
            c.toggles = objectives::LossToggles::preset(c.ablation);
            if (l.contains("toggles")) {
                // Explicit toggles refine the preset.
                objectives::LossToggles t = c.toggles;
                const auto& tj = l.at("toggles");
                t.trip = tj.value("trip", t.trip);
                t.comp = tj.value("comp", t.comp);
                t.reg = tj.value("reg", t.reg);
                t.tt = tj.value("tt", t.tt);
                t.rt = tj.value("rt", t.rt);
                t.rec = tj.value("rec", t.rec);
                c.toggles = t;
            }
        }
        if (j.contains("composer")) c.composer = j.at("composer").get<composer::ComposerConfig>();
        if (j.contains("decoder")) c.decoder = j.at("decoder").get<decoder::DecoderConfig>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed training config: ") + e.what());
    }
    c.source = j;
    c.validate();
    return c;
}

json TrainConfig::to_json() const {
    return json{{"backbone", backbone},
                {"manifest", manifest},
                {"output_dir", output_dir},
                {"epochs", epochs},
                {"batch_size", batch_size},
                {"seed", seed},
                {"checkpoint_every", checkpoint_every},
                {"validate_every", validate_every},
                {"max_steps", max_steps},
                {"optimizer",
                 {{"weight_decay", weight_decay},
                  {"beta1", beta1},
                  {"beta2", beta2},
                  {"eps", adam_eps},
                  {"grad_clip", grad_clip},
                  {"lr",
                   {{"prompt", lr.prompt},
                    {"layernorm", lr.layernorm},
                    {"decoder", lr.decoder},
                    {"converter", lr.converter}}}}},
                {"loss",
                 {{"weights", weights},
                  {"margins", margins},
                  {"toggles", toggles},
                  {"ablation", ablation},
                  {"distance", objectives::metric_name(distance)}}},
                {"composer", composer},
                {"decoder", decoder}};
}

json apply_overrides(json doc, const std::vector<std::string>& overrides) {
    for (const auto& ov : overrides) {
        const auto eq = ov.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: " + ov);
        const std::string key = ov.substr(0, eq), raw = ov.substr(eq + 1);
        json value;
        try {
            value = json::parse(raw);
        } catch (const json::parse_error&) {
            value = raw;
        }
        json* node = &doc;
        std::istringstream parts(key);
        std::string part;
        std::vector<std::string> path;
        while (std::getline(parts, part, '.')) path.push_back(part);
        for (std::size_t i = 0; i + 1 < path.size(); ++i) {
            if (!node->is_object()) throw ConfigError("override path " + key + " crosses a non-object");
            node = &(*node)[path[i]];
            if (node->is_null()) *node = json::object();
        }
        (*node)[path.back()] = value;
    }
    return doc;
}

TrainConfig load_config(const fs::path& path, const std::vector<std::string>& overrides) {
    json doc;
    try {
        doc = json::parse(io::read_text(path));
    } catch (const json::parse_error& e) {
        throw ConfigError("cannot parse config " + path.string() + ": " + e.what());
    }
    return TrainConfig::from_json(apply_overrides(std::move(doc), overrides), path.parent_path());
}

}  // namespace duet::trainer
