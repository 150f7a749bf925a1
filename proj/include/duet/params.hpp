#pragma once
// Named parameter collections with save/load into tensor archives.

#include <map>
#include <string>
#include <vector>

#include "duet/autograd.hpp"

namespace duet {

class ParamStore {
public:
    ag::Var& add(const std::string& name, Tensor value, bool trainable = true);
    ag::Var& at(const std::string& name);
    const ag::Var& at(const std::string& name) const;
    bool contains(const std::string& name) const { return params_.count(name) != 0; }

    const std::map<std::string, ag::Var>& all() const { return params_; }
    std::vector<ag::Var> trainable() const;
    std::size_t numel() const;

    std::map<std::string, Tensor> snapshot(const std::string& prefix = "") const;
    // Copies values for every entry of this store from `tensors` (keys
    // prefixed by `prefix`). Missing or mis-shaped entries throw LoadError.
    void load(const std::map<std::string, Tensor>& tensors, const std::string& prefix = "");

    void set_trainable(bool on);
    void zero_grad();

private:
    std::map<std::string, ag::Var> params_;
};

}  // namespace duet
