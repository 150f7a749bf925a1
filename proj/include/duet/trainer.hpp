#pragma once
// Multitask training: builds every query variant per batch, evaluates the
// weighted loss, and updates vision LayerNorms, converter, prompt and
// decoder with per-group AdamW learning rates.
//
// Checkpoint directory:
//   checkpoint.json        config echo, counters, RNG state, fingerprints
//   model.safetensors      converter, prompt, vision LayerNorms (inference set)
//   decoder.safetensors    reconstruction decoder (droppable)
//   optimizer.safetensors  AdamW moments (resume only)

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "duet/composer.hpp"
#include "duet/datasets.hpp"
#include "duet/decoder.hpp"
#include "duet/encoder.hpp"
#include "duet/objectives.hpp"

namespace duet::trainer {

struct LearningRates {
    double prompt = 1e-5;
    double layernorm = 1e-5;
    double decoder = 1e-4;
    double converter = 1e-3;
};

struct TrainConfig {
    std::string backbone;     // encoder directory
    std::string manifest;     // dataset manifest
    std::string output_dir = "runs/default";
    std::size_t epochs = 100;
    std::size_t batch_size = 128;
    std::uint64_t seed = 0;
    LearningRates lr;
    double weight_decay = 0.09;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double grad_clip = 1.0;
    objectives::LossWeights weights;
    objectives::Margins margins;
    objectives::LossToggles toggles;
    std::string ablation = "full";
    objectives::Metric distance = objectives::Metric::cosine;
    composer::ComposerConfig composer;
    decoder::DecoderConfig decoder;  // in_dim follows the encoder
    std::size_t checkpoint_every = 1;  // epochs
    std::size_t validate_every = 1;    // epochs
    std::size_t max_steps = 0;         // 0: no cap

    nlohmann::json source;  // the document this config was read from

    void validate() const;
    // Paths in the document are relative to base_dir.
    static TrainConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = ".");
    nlohmann::json to_json() const;
};

// Applies "a.b.c=value" overrides. Values parse as JSON when possible and
// fall back to plain strings.
nlohmann::json apply_overrides(nlohmann::json doc, const std::vector<std::string>& overrides);
TrainConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

// Decoupled-weight-decay Adam over named parameter groups.
class AdamW {
public:
    struct Group {
        std::string name;
        double lr;
        std::vector<std::pair<std::string, ag::Var>> params;
    };

    AdamW(std::vector<Group> groups, double weight_decay, double beta1, double beta2, double eps);

    // Scales gradients to global norm <= max_norm (if > 0); returns the
    // norm before clipping.
    double clip_grad_norm(double max_norm);
    void step();
    void zero_grad();

    std::size_t steps() const { return t_; }
    const std::vector<Group>& groups() const { return groups_; }
    void set_lr(std::size_t group, double lr) { groups_.at(group).lr = lr; }
    std::map<std::string, Tensor> state() const;
    void load_state(const std::map<std::string, Tensor>& state, std::size_t t);

private:
    std::vector<Group> groups_;
    double wd_, b1_, b2_, eps_;
    std::size_t t_ = 0;
    std::map<std::string, Tensor> m_, v_;
};

struct StepReport {
    std::size_t step = 0;
    double total = 0.0;
    std::map<std::string, double> losses;
    double grad_norm = 0.0;
};

struct FitResult {
    double initial_loss = 0.0;
    double final_loss = 0.0;
    double best_val_acc1 = -1.0;
    std::size_t steps = 0;
    std::vector<StepReport> history;
};

// Inference-ready encoder + composer with the combined fingerprint that
// gallery indexes are stamped with.
struct InferenceModel {
    std::shared_ptr<encoder::DualEncoder> encoder;
    std::shared_ptr<composer::Composer> composer;
    std::string fingerprint;
};

std::string model_fingerprint(const encoder::DualEncoder& enc, const composer::Composer& comp);

// Loads checkpoint.json + model.safetensors on top of the referenced
// backbone (or backbone_override when given).
InferenceModel load_inference_model(const std::filesystem::path& checkpoint_dir,
                                    const std::optional<std::filesystem::path>& backbone_override = std::nullopt);

class Trainer {
public:
    Trainer(TrainConfig config, datasets::DatasetManifest manifest, encoder::DualEncoder encoder);

    StepReport train_step(const std::vector<datasets::Triplet>& batch);
    // Loss graph for a batch without touching any parameter; phrase sampling
    // draws from a generator seeded with `seed`.
    objectives::LossReport evaluate_loss(const std::vector<datasets::Triplet>& batch, std::uint64_t seed);
    // Runs the remaining epochs; calls on_step after every step if set.
    FitResult fit(const std::function<void(const StepReport&)>& on_step = {});

    // Sketch-only Acc@1 on the held-out split (train split if none).
    double validate();

    void save_checkpoint(const std::filesystem::path& dir, bool with_optimizer = true) const;
    void resume(const std::filesystem::path& dir);

    const TrainConfig& config() const { return config_; }
    encoder::DualEncoder& encoder() { return *encoder_; }
    composer::Composer& composer() { return *composer_; }
    const decoder::Decoder& decoder() const { return decoder_; }
    const datasets::DatasetManifest& manifest() const { return manifest_; }
    AdamW& optimizer() { return *optimizer_; }
    std::size_t step_count() const { return step_; }
    InferenceModel inference_model() const;

    // Every parameter the optimizer may touch, prefixed by group.
    std::map<std::string, Tensor> trainable_snapshot() const;
    // Every encoder parameter outside the trainable set.
    std::map<std::string, Tensor> frozen_snapshot() const;

private:
    objectives::BatchBundle build_bundle(const std::vector<datasets::Triplet>& batch, std::mt19937_64& rng);
    void log_line(const nlohmann::json& rec) const;

    TrainConfig config_;
    datasets::DatasetManifest manifest_;
    std::shared_ptr<encoder::DualEncoder> encoder_;
    std::shared_ptr<composer::Composer> composer_;
    decoder::Decoder decoder_;
    std::unique_ptr<AdamW> optimizer_;
    datasets::PhraseSet neutral_;
    datasets::PhraseSet prompts_;
    datasets::ImageCache images_;
    std::mt19937_64 rng_;
    std::size_t step_ = 0;
    std::size_t epoch_ = 0;
    std::size_t batch_in_epoch_ = 0;
    double best_val_ = -1.0;
};

}  // namespace duet::trainer
