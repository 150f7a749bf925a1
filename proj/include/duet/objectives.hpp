#pragma once
// Training losses over batched query/photo features. Every loss is a
// per-item value reduced by the batch mean; distances are cosine.

#include <map>
#include <string>

#include "duet/autograd.hpp"
#include "json.hpp"

namespace duet::decoder {
class Decoder;
}

namespace duet::objectives {

struct LossWeights {
    double trip = 1.0;
    double comp = 0.5;
    double reg = 0.1;
    double tt = 0.1;
    double rt = 1.0;
    double rec = 1.0;

    void validate() const;
};

struct Margins {
    double trip = 0.2;
    double comp = 0.1;
    double rt = 0.2;

    void validate() const;
};

struct LossToggles {
    bool trip = true;
    bool comp = true;
    bool reg = true;
    bool tt = true;
    bool rt = true;
    bool rec = true;

    bool any() const { return trip || comp || reg || tt || rt || rec; }
    // Names of the enabled losses in canonical order.
    std::vector<std::string> enabled() const;

    // Ablation presets: "full", "no_tt", "no_rec", "no_rt", "no_compositionality".
    static LossToggles preset(const std::string& name);
};

void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);
void to_json(nlohmann::json& j, const Margins& m);
void from_json(const nlohmann::json& j, Margins& m);
void to_json(nlohmann::json& j, const LossToggles& t);
void from_json(const nlohmann::json& j, LossToggles& t);

// Per-batch tensors. Rows are items; unused entries may stay undefined
// when the loss that needs them is disabled.
struct BatchBundle {
    ag::Var s_plain;     // s^T_L       [B x d]
    ag::Var s_delta;     // s^{T,D}_L   [B x d]
    ag::Var s_neutral;   // s^{T,N}_L   [B x d]
    ag::Var s_fixed;     // s^T_F       [B x d]
    ag::Var p_pos;       // [B x d]
    ag::Var p_neg;       // [B x d]
    ag::Var patches_pos; // [B*T x d]
    ag::Var patches_neg; // [B*T x d]
    std::size_t tokens = 0;
    ag::Var photo_pixels;  // [B x 3*H*W] in [0,1]
};

// Row distance used by the hinge losses. Cosine unless configured otherwise.
enum class Metric { cosine, euclidean };
Metric parse_metric(const std::string& s);
std::string metric_name(Metric m);

// Distance between rows: [B].
ag::Var distance(const ag::Var& a, const ag::Var& b, Metric metric = Metric::cosine);
double distance(const std::vector<double>& a, const std::vector<double>& b, Metric metric = Metric::cosine);

ag::Var loss_trip(const ag::Var& s_plain, const ag::Var& p_pos, const ag::Var& p_neg, double margin,
                  Metric metric = Metric::cosine);
ag::Var loss_comp(const ag::Var& s_delta, const ag::Var& s_plain, const ag::Var& p_pos, double margin,
                  Metric metric = Metric::cosine);
ag::Var loss_reg(const ag::Var& s_delta, const ag::Var& s_neutral, const ag::Var& p_pos, Metric metric = Metric::cosine);
ag::Var loss_tt(const ag::Var& s_fixed, const ag::Var& s_plain);

struct RegionPooled {
    ag::Var weights;  // [B x T], rows on the simplex
    ag::Var pooled;   // [B x d]
};
// Softmax over patch-query dot products; throws InputError when T == 0.
RegionPooled region_attention(const ag::Var& query, const ag::Var& patches, std::size_t tokens);

ag::Var loss_rt(const ag::Var& s_plain, const ag::Var& patches_pos, const ag::Var& patches_neg, std::size_t tokens,
                double margin, Metric metric = Metric::cosine);

// Root-mean-square pixel error per item, summed over the two reconstructions
// and averaged over the batch. recon_* and target: [B x 3*H*W].
ag::Var loss_rec(const ag::Var& recon_plain, const ag::Var& recon_delta, const ag::Var& target);

struct LossReport {
    ag::Var total;
    std::map<std::string, double> breakdown;  // enabled losses only, unweighted
};

// Weighted sum of the enabled losses. Disabled losses are never evaluated.
// decoder is required only when rec is enabled.
LossReport loss_total(const BatchBundle& bundle, const LossWeights& weights, const Margins& margins,
                      const LossToggles& toggles, const decoder::Decoder* decoder, Metric metric = Metric::cosine);

}  // namespace duet::objectives
