#include "duet/trainer.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "duet/errors.hpp"
#include "duet/io.hpp"
#include "duet/retrieval.hpp"

namespace duet::trainer {

namespace fs = std::filesystem;
using nlohmann::json;
using ag::Var;

namespace {

constexpr const char* kFormat = "duet-checkpoint";
constexpr int kFormatVersion = 1;

std::map<std::string, Tensor> frozen_params(const encoder::DualEncoder& enc) {
    const auto ln = enc.layernorm_parameter_names();
    std::map<std::string, Tensor> out;
    for (const auto& [name, v] : enc.params().all())
        if (std::find(ln.begin(), ln.end(), name) == ln.end()) out.emplace(name, v.value());
    return out;
}

std::map<std::string, Tensor> inference_tensors(const encoder::DualEncoder& enc, const composer::Composer& comp) {
    std::map<std::string, Tensor> out = comp.params().snapshot("composer.");
    for (const auto& [name, t] : enc.trainable_parameters()) out.emplace("encoder." + name, t);
    return out;
}

void load_layernorms(encoder::DualEncoder& enc, const std::map<std::string, Tensor>& tensors) {
    for (const auto& name : enc.layernorm_parameter_names()) {
        auto it = tensors.find("encoder." + name);
        auto& p = enc.params().at(name);
        if (it == tensors.end() || it->second.shape != p.shape())
            throw LoadError("checkpoint lacks a matching tensor for encoder." + name);
        p.mutable_value() = it->second;
    }
}

std::vector<std::size_t> iota_from(std::size_t begin, std::size_t n) {
    std::vector<std::size_t> v(n);
    std::iota(v.begin(), v.end(), begin);
    return v;
}

double mean_of(const std::vector<StepReport>& h, std::size_t begin, std::size_t end) {
    if (begin >= end) return 0.0;
    double s = 0;
    for (std::size_t i = begin; i < end; ++i) s += h[i].total;
    return s / static_cast<double>(end - begin);
}

}  // namespace

std::string model_fingerprint(const encoder::DualEncoder& enc, const composer::Composer& comp) {
    return io::sha256_hex(enc.fingerprint() + io::fingerprint(comp.params().snapshot()));
}

InferenceModel load_inference_model(const fs::path& dir, const std::optional<fs::path>& backbone_override) {
    if (!fs::exists(dir / "checkpoint.json")) throw LoadError("no checkpoint.json in " + dir.string());
    json meta;
    try {
        meta = json::parse(io::read_text(dir / "checkpoint.json"));
    } catch (const json::parse_error& e) {
        throw LoadError("corrupt checkpoint.json in " + dir.string() + ": " + e.what());
    }
    if (meta.value("format", "") != kFormat) throw LoadError(dir.string() + " is not a duet checkpoint");
    const fs::path backbone = backbone_override ? *backbone_override : fs::path(meta.at("backbone").get<std::string>());
    auto enc = std::make_shared<encoder::DualEncoder>(encoder::DualEncoder::load(backbone));
    const std::string frozen = io::fingerprint(frozen_params(*enc));
    if (frozen != meta.at("frozen_fingerprint").get<std::string>())
        throw FingerprintMismatch("backbone at " + backbone.string() + " differs from the one this checkpoint was trained on");
    const auto archive = io::read_safetensors(dir / "model.safetensors");
    load_layernorms(*enc, archive.tensors);
    auto comp = std::make_shared<composer::Composer>(*enc, meta.at("composer").get<composer::ComposerConfig>(), 0);
    comp->params().load(archive.tensors, "composer.");
    InferenceModel m{enc, comp, model_fingerprint(*enc, *comp)};
    if (meta.contains("model_fingerprint") && meta["model_fingerprint"] != m.fingerprint)
        throw FingerprintMismatch("checkpoint weights do not reproduce the recorded model fingerprint");
    return m;
}

Trainer::Trainer(TrainConfig config, datasets::DatasetManifest manifest, encoder::DualEncoder encoder)
    : config_(std::move(config)),
      manifest_(std::move(manifest)),
      encoder_(std::make_shared<encoder::DualEncoder>(std::move(encoder))),
      composer_(std::make_shared<composer::Composer>(*encoder_, config_.composer, config_.seed * 7919 + 1)),
      decoder_([&] {
          config_.decoder.in_dim = encoder_->config().embed_dim;
          return decoder::Decoder(config_.decoder, config_.seed * 7919 + 2);
      }()),
      neutral_(datasets::PhraseSet::shipped(datasets::PhraseKind::neutral_text)),
      prompts_(datasets::PhraseSet::shipped(datasets::PhraseKind::handcrafted_prompt)),
      images_(static_cast<int>(encoder_->config().image_resolution), static_cast<int>(config_.decoder.output_size())),
      rng_(config_.seed * 7919 + 3) {
    config_.validate();
    if (manifest_.split_indices(datasets::Split::train).size() < 2)
        throw ConfigError("training needs at least two train pairs");
    encoder_->set_training_policy(encoder::TrainingPolicy::layernorm_only);

    std::vector<AdamW::Group> groups;
    groups.push_back({"prompt", config_.lr.prompt, {{"prompt", composer_->params().at("prompt")}}});
    AdamW::Group ln{"layernorm", config_.lr.layernorm, {}};
    for (const auto& name : encoder_->layernorm_parameter_names()) ln.params.emplace_back(name, encoder_->params().at(name));
    groups.push_back(std::move(ln));
    AdamW::Group conv{"converter", config_.lr.converter, {}};
    for (const auto& [name, v] : composer_->params().all())
        if (name != "prompt") conv.params.emplace_back(name, v);
    groups.push_back(std::move(conv));
    AdamW::Group dec{"decoder", config_.lr.decoder, {}};
    for (const auto& [name, v] : decoder_.params().all()) dec.params.emplace_back(name, v);
    groups.push_back(std::move(dec));
    optimizer_ = std::make_unique<AdamW>(std::move(groups), config_.weight_decay, config_.beta1, config_.beta2,
                                         config_.adam_eps);
}

objectives::BatchBundle Trainer::build_bundle(const std::vector<datasets::Triplet>& batch, std::mt19937_64& rng) {
    const auto& t = config_.toggles;
    const std::size_t B = batch.size();
    const bool need_neg = t.trip || t.rt;
    const bool need_delta = t.comp || t.reg || t.rec;

    std::vector<const Tensor*> imgs;
    for (const auto& tr : batch) imgs.push_back(&images_.model_input(manifest_.resolve(manifest_.pairs[tr.anchor].sketch)));
    for (const auto& tr : batch)
        imgs.push_back(&images_.model_input(manifest_.resolve(manifest_.pairs[tr.anchor].photo.path)));
    if (need_neg)
        for (const auto& tr : batch)
            imgs.push_back(&images_.model_input(manifest_.resolve(manifest_.pairs[tr.negative].photo.path)));

    const auto vb = encoder_->encode_images(imgs);
    const std::size_t T = vb.tokens;
    objectives::BatchBundle out;
    out.tokens = T;
    const Var s = ag::gather_rows(vb.global, iota_from(0, B));
    out.p_pos = ag::gather_rows(vb.global, iota_from(B, B));
    out.patches_pos = ag::gather_rows(vb.patches, iota_from(B * T, B * T));
    if (need_neg) {
        out.p_neg = ag::gather_rows(vb.global, iota_from(2 * B, B));
        out.patches_neg = ag::gather_rows(vb.patches, iota_from(2 * B * T, B * T));
    }

    const auto pw = composer_->invert(s);
    std::optional<composer::PseudoWords> delta;
    if (need_delta) delta = composer_->difference_token(out.p_pos, s);

    const Var& prompt = composer_->prompt();
    std::vector<Var> seqs;
    for (std::size_t b = 0; b < B; ++b) seqs.push_back(composer_->compose(prompt, pw.item(b)));
    if (need_delta)
        for (std::size_t b = 0; b < B; ++b) seqs.push_back(composer_->compose(prompt, pw.item(b), delta->item(b)));
    if (t.reg)
        for (std::size_t b = 0; b < B; ++b)
            seqs.push_back(composer_->compose(prompt, pw.item(b), encoder_->embed_words(neutral_.sample(rng)).embeddings));
    if (t.tt) {
        // A handcrafted prompt longer than the context allows keeps its head.
        const std::size_t room = encoder_->config().context_length - 2 - pw.per_item;
        for (std::size_t b = 0; b < B; ++b) {
            Var fixed = encoder_->embed_words(prompts_.sample(rng)).embeddings;
            if (fixed.rows() > room) {
                spdlog::debug("fixed prompt of {} tokens cut to {}", fixed.rows(), room);
                fixed = ag::gather_rows(fixed, iota_from(0, room));
            }
            seqs.push_back(composer_->compose(fixed, pw.item(b)));
        }
    }

    const Var q = encoder_->encode_sequences(seqs);
    std::size_t at = 0;
    out.s_plain = ag::gather_rows(q, iota_from(at, B));
    at += B;
    if (need_delta) {
        out.s_delta = ag::gather_rows(q, iota_from(at, B));
        at += B;
    }
    if (t.reg) {
        out.s_neutral = ag::gather_rows(q, iota_from(at, B));
        at += B;
    }
    if (t.tt) out.s_fixed = ag::gather_rows(q, iota_from(at, B));

    if (t.rec) {
        const std::size_t S = config_.decoder.output_size();
        Tensor px({B, 3 * S * S});
        for (std::size_t b = 0; b < B; ++b) {
            const Tensor& u = images_.unit_pixels(manifest_.resolve(manifest_.pairs[batch[b].anchor].photo.path));
            std::copy(u.data.begin(), u.data.end(), px.data.begin() + static_cast<std::ptrdiff_t>(b * 3 * S * S));
        }
        out.photo_pixels = Var::constant(std::move(px));
    }
    return out;
}

StepReport Trainer::train_step(const std::vector<datasets::Triplet>& batch) {
    if (batch.empty()) throw InputError("empty training batch");
    const auto bundle = build_bundle(batch, rng_);
    auto rep = objectives::loss_total(bundle, config_.weights, config_.margins, config_.toggles,
                                      config_.toggles.rec ? &decoder_ : nullptr, config_.distance);
    rep.total.backward();
    StepReport out;
    out.grad_norm = optimizer_->clip_grad_norm(config_.grad_clip);
    if (!std::isfinite(out.grad_norm)) {
        optimizer_->zero_grad();
        throw NumericalError("non-finite gradient norm at step " + std::to_string(step_));
    }
    optimizer_->step();
    optimizer_->zero_grad();
    out.step = ++step_;
    out.total = rep.total.item();
    out.losses = rep.breakdown;
    return out;
}

objectives::LossReport Trainer::evaluate_loss(const std::vector<datasets::Triplet>& batch, std::uint64_t seed) {
    if (batch.empty()) throw InputError("empty training batch");
    std::mt19937_64 rng(seed);
    const auto bundle = build_bundle(batch, rng);
    return objectives::loss_total(bundle, config_.weights, config_.margins, config_.toggles,
                                  config_.toggles.rec ? &decoder_ : nullptr, config_.distance);
}

double Trainer::validate() {
    retrieval::EvalOptions opts;
    opts.use_text = false;
    opts.split = manifest_.split_indices(datasets::Split::test).empty() ? datasets::Split::train : datasets::Split::test;
    const auto rep = retrieval::evaluate(retrieval::Protocol::fine_grained, manifest_, *encoder_, *composer_, opts);
    return rep.metrics.at("acc@1");
}

void Trainer::log_line(const json& rec) const {
    if (config_.output_dir.empty()) return;
    fs::create_directories(config_.output_dir);
    std::ofstream out(fs::path(config_.output_dir) / "metrics.jsonl", std::ios::app);
    out << rec.dump() << '\n';
}

FitResult Trainer::fit(const std::function<void(const StepReport&)>& on_step) {
    FitResult res;
    const fs::path out_dir = config_.output_dir;
    std::size_t epoch_begin = 0;  // index into history where the current epoch starts
    std::size_t first_epoch_end = 0;
    std::size_t last_epoch_begin = 0;
    bool capped = false;

    while (epoch_ < config_.epochs && !capped) {
        const auto batches = datasets::epoch_batches(manifest_, config_.batch_size, config_.seed * 1000003 + epoch_);
        epoch_begin = res.history.size();
        while (batch_in_epoch_ < batches.size()) {
            if (config_.max_steps && step_ >= config_.max_steps) {
                capped = true;
                break;
            }
            auto rep = train_step(batches[batch_in_epoch_]);
            ++batch_in_epoch_;
            json rec{{"type", "step"}, {"step", rep.step}, {"epoch", epoch_}, {"total", rep.total},
                     {"losses", rep.losses}, {"grad_norm", rep.grad_norm}, {"lr", json::object()}};
            for (const auto& g : optimizer_->groups()) rec["lr"][g.name] = g.lr;
            log_line(rec);
            if (on_step) on_step(rep);
            res.history.push_back(std::move(rep));
        }
        if (capped) break;
        if (first_epoch_end == 0) first_epoch_end = res.history.size();
        last_epoch_begin = epoch_begin;
        const std::size_t finished = epoch_ + 1;
        epoch_ = finished;
        batch_in_epoch_ = 0;
        if (!res.history.empty())
            spdlog::info("epoch {}/{}: mean loss {:.5f}", finished, config_.epochs,
                         mean_of(res.history, epoch_begin, res.history.size()));
        if (finished % config_.validate_every == 0 || finished == config_.epochs) {
            const double acc = validate();
            log_line({{"type", "val"}, {"epoch", finished}, {"step", step_}, {"val_acc1", acc}});
            spdlog::info("epoch {}: validation Acc@1 {:.2f}", finished, acc);
            if (acc > best_val_) {
                best_val_ = acc;
                if (!out_dir.empty()) save_checkpoint(out_dir / "best", false);
            }
        }
        if (!out_dir.empty() && (finished % config_.checkpoint_every == 0 || finished == config_.epochs))
            save_checkpoint(out_dir / "last", true);
    }
    if (capped && !out_dir.empty()) save_checkpoint(out_dir / "last", true);

    // Per-step totals are noisy (random negatives), so compare epoch means.
    if (first_epoch_end == 0) first_epoch_end = res.history.size();
    if (last_epoch_begin == 0 && capped) last_epoch_begin = epoch_begin;
    res.initial_loss = mean_of(res.history, 0, first_epoch_end);
    res.final_loss = mean_of(res.history, last_epoch_begin, res.history.size());
    res.best_val_acc1 = best_val_;
    res.steps = step_;
    return res;
}

void Trainer::save_checkpoint(const fs::path& target, bool with_optimizer) const {
    // Written into a sibling and renamed over the old checkpoint.
    const fs::path dir = target.string() + ".tmp";
    fs::remove_all(dir);
    fs::create_directories(dir);
    std::ostringstream rng;
    rng << rng_;
    json meta{{"format", kFormat},
              {"version", kFormatVersion},
              {"config", config_.source.is_null() ? config_.to_json() : config_.source},
              {"resolved_config", config_.to_json()},
              {"backbone", fs::absolute(config_.backbone).lexically_normal().string()},
              {"backbone_id", encoder_->config().backbone_id},
              {"frozen_fingerprint", io::fingerprint(frozen_params(*encoder_))},
              {"model_fingerprint", model_fingerprint(*encoder_, *composer_)},
              {"composer", composer_->config()},
              {"decoder", decoder_.config()},
              {"step", step_},
              {"epoch", epoch_},
              {"batch_in_epoch", batch_in_epoch_},
              {"optimizer_steps", optimizer_->steps()},
              {"best_val_acc1", best_val_},
              {"rng", rng.str()},
              {"has_optimizer", with_optimizer}};
    io::write_safetensors(dir / "model.safetensors", {inference_tensors(*encoder_, *composer_), {}});
    io::write_safetensors(dir / "decoder.safetensors", {decoder_.params().snapshot("decoder."), {}});
    if (with_optimizer) io::write_safetensors(dir / "optimizer.safetensors", {optimizer_->state(), {}});
    // checkpoint.json last: its presence marks a complete checkpoint.
    io::write_atomic(dir / "checkpoint.json", meta.dump(2));
    const fs::path old = target.string() + ".old";
    fs::remove_all(old);
    if (fs::exists(target)) fs::rename(target, old);
    fs::rename(dir, target);
    fs::remove_all(old);
}

void Trainer::resume(const fs::path& dir) {
    const auto meta = json::parse(io::read_text(dir / "checkpoint.json"));
    if (meta.value("format", "") != kFormat) throw LoadError(dir.string() + " is not a duet checkpoint");
    if (!meta.value("has_optimizer", false)) throw LoadError(dir.string() + " has no optimizer state to resume from");
    if (meta.at("frozen_fingerprint").get<std::string>() != io::fingerprint(frozen_params(*encoder_)))
        throw FingerprintMismatch("checkpoint was trained on a different backbone");
    if (meta.at("resolved_config") != config_.to_json())
        spdlog::warn("resuming {} with a config that differs from the one it was saved with", dir.string());
    const auto model = io::read_safetensors(dir / "model.safetensors");
    load_layernorms(*encoder_, model.tensors);
    composer_->params().load(model.tensors, "composer.");
    decoder_.params().load(io::read_safetensors(dir / "decoder.safetensors").tensors, "decoder.");
    optimizer_->load_state(io::read_safetensors(dir / "optimizer.safetensors").tensors,
                           meta.at("optimizer_steps").get<std::size_t>());
    step_ = meta.at("step").get<std::size_t>();
    epoch_ = meta.at("epoch").get<std::size_t>();
    batch_in_epoch_ = meta.at("batch_in_epoch").get<std::size_t>();
    best_val_ = meta.at("best_val_acc1").get<double>();
    std::istringstream rng(meta.at("rng").get<std::string>());
    rng >> rng_;
}

InferenceModel Trainer::inference_model() const {
    return {encoder_, composer_, model_fingerprint(*encoder_, *composer_)};
}

std::map<std::string, Tensor> Trainer::trainable_snapshot() const {
    std::map<std::string, Tensor> out;
    for (const auto& g : optimizer_->groups())
        for (const auto& [name, p] : g.params) out.emplace(g.name + "/" + name, p.value());
    return out;
}

std::map<std::string, Tensor> Trainer::frozen_snapshot() const { return frozen_params(*encoder_); }

}  // namespace duet::trainer
