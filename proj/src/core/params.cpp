#include "duet/params.hpp"

#include "duet/errors.hpp"

namespace duet {

ag::Var& ParamStore::add(const std::string& name, Tensor value, bool trainable) {
    auto [it, inserted] = params_.emplace(name, ag::Var::parameter(std::move(value)));
    if (!inserted) throw std::logic_error("duplicate parameter " + name);
    it->second.set_requires_grad(trainable);
    return it->second;
}

ag::Var& ParamStore::at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter " + name);
    return it->second;
}

const ag::Var& ParamStore::at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter " + name);
    return it->second;
}

std::vector<ag::Var> ParamStore::trainable() const {
    std::vector<ag::Var> out;
    for (const auto& [name, v] : params_)
        if (v.requires_grad()) out.push_back(v);
    return out;
}

std::size_t ParamStore::numel() const {
    std::size_t n = 0;
    for (const auto& [name, v] : params_) n += v.size();
    return n;
}

std::map<std::string, Tensor> ParamStore::snapshot(const std::string& prefix) const {
    std::map<std::string, Tensor> out;
    for (const auto& [name, v] : params_) out.emplace(prefix + name, v.value());
    return out;
}

void ParamStore::load(const std::map<std::string, Tensor>& tensors, const std::string& prefix) {
    for (auto& [name, v] : params_) {
        auto it = tensors.find(prefix + name);
        if (it == tensors.end()) throw LoadError("missing tensor " + prefix + name);
        if (it->second.size() != v.size())
            throw LoadError("shape mismatch for " + prefix + name + ": " + shape_str(it->second.shape) +
                            " vs " + shape_str(v.shape()));
        v.mutable_value().data = it->second.data;
    }
}

void ParamStore::set_trainable(bool on) {
    for (auto& [name, v] : params_) v.set_requires_grad(on);
}

void ParamStore::zero_grad() {
    for (auto& [name, v] : params_) v.zero_grad();
}

}  // namespace duet
