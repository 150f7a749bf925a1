#pragma once
// Finite-difference check of one training loss through the whole trainer
// graph (vision tower, converter, prompt, text tower, decoder) on a small
// surrogate encoder.

#include <string>

#include "duet/trainer.hpp"
#include "gradcheck.hpp"

namespace duet::testing {

struct PipelineGrad {
    std::string loss;
    GradCheckResult result;
    double value = 0.0;
};

// Margins are widened so every hinge stays active under perturbation.
inline trainer::TrainConfig single_loss_config(trainer::TrainConfig base, const std::string& loss) {
    objectives::LossToggles t{false, false, false, false, false, false};
    if (loss == "trip") t.trip = true;
    if (loss == "comp") t.comp = true;
    if (loss == "reg") t.reg = true;
    if (loss == "tt") t.tt = true;
    if (loss == "rt") t.rt = true;
    if (loss == "rec") t.rec = true;
    base.toggles = t;
    base.margins.trip = 5.0;
    base.margins.comp = 5.0;
    base.margins.rt = 5.0;
    return base;
}

inline PipelineGrad pipeline_grad_check(trainer::Trainer& tr, const std::vector<datasets::Triplet>& batch,
                                        const std::string& loss) {
    std::vector<ag::Var> params;
    for (const auto& g : tr.optimizer().groups())
        for (const auto& [name, p] : g.params) params.push_back(p);
    PipelineGrad out;
    out.loss = loss;
    auto f = [&] { return tr.evaluate_loss(batch, 17).total; };
    out.value = f().item();
    out.result = grad_check(f, params, 1e-5, 12);
    for (auto& p : params) p.zero_grad();
    return out;
}

}  // namespace duet::testing
