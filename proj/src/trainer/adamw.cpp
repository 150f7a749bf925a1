#include <cmath>

#include "duet/errors.hpp"
#include "duet/trainer.hpp"

namespace duet::trainer {

namespace {

std::string key(const std::string& group, const std::string& name) { return group + "/" + name; }

}  // namespace

AdamW::AdamW(std::vector<Group> groups, double weight_decay, double beta1, double beta2, double eps)
    : groups_(std::move(groups)), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {
    for (const auto& g : groups_)
        for (const auto& [name, p] : g.params) {
            m_.emplace(key(g.name, name), Tensor(p.shape()));
            v_.emplace(key(g.name, name), Tensor(p.shape()));
        }
}

double AdamW::clip_grad_norm(double max_norm) {
    double sq = 0;
    for (const auto& g : groups_)
        for (const auto& [name, p] : g.params)
            if (p.has_grad())
                for (double x : p.grad().data) sq += x * x;
    const double norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm) {
        const double s = max_norm / (norm + 1e-12);
        for (auto& g : groups_)
            for (auto& [name, p] : g.params)
                if (p.has_grad())
                    for (double& x : p.mutable_grad().data) x *= s;
    }
    return norm;
}

void AdamW::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (auto& g : groups_)
        for (auto& [name, p] : g.params) {
            if (!p.has_grad()) continue;  // untouched this step
            auto& w = p.mutable_value().data;
            const auto& gr = p.grad().data;
            auto& m = m_.at(key(g.name, name)).data;
            auto& v = v_.at(key(g.name, name)).data;
            for (std::size_t i = 0; i < w.size(); ++i) {
                w[i] -= g.lr * wd_ * w[i];
                m[i] = b1_ * m[i] + (1.0 - b1_) * gr[i];
                v[i] = b2_ * v[i] + (1.0 - b2_) * gr[i] * gr[i];
                w[i] -= g.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
            }
        }
}

void AdamW::zero_grad() {
    for (auto& g : groups_)
        for (auto& [name, p] : g.params) p.zero_grad();
}

std::map<std::string, Tensor> AdamW::state() const {
    std::map<std::string, Tensor> out;
    for (const auto& [k, t] : m_) out.emplace("m." + k, t);
    for (const auto& [k, t] : v_) out.emplace("v." + k, t);
    return out;
}

void AdamW::load_state(const std::map<std::string, Tensor>& state, std::size_t t) {
    for (auto& [k, tensor] : m_) {
        auto it = state.find("m." + k);
        if (it == state.end() || it->second.size() != tensor.size()) throw LoadError("optimizer state lacks m." + k);
        tensor.data = it->second.data;
    }
    for (auto& [k, tensor] : v_) {
        auto it = state.find("v." + k);
        if (it == state.end() || it->second.size() != tensor.size()) throw LoadError("optimizer state lacks v." + k);
        tensor.data = it->second.data;
    }
    t_ = t;
}

}  // namespace duet::trainer
