#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "dualpath/tensor.hpp"

namespace dualpath {

template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    // Participates in decoupled weight decay.
    bool decay = false;
};

// Named, shaped weights with gradient slots. Iteration order is insertion order,
// which is also the checkpoint order.
template <typename T>
class ParameterStore {
public:
    Parameter<T>& add(std::string name, Tensor<T> value, bool decay) {
        if (index_.contains(name)) throw ConfigError("duplicate parameter " + name);
        Tensor<T> grad(value.shape());
        index_.emplace(name, params_.size());
        params_.push_back(Parameter<T>{std::move(name), std::move(value), std::move(grad), decay});
        return params_.back();
    }

    bool contains(const std::string& name) const { return index_.contains(name); }

    Parameter<T>& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter " + name);
        return params_[it->second];
    }
    const Parameter<T>& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter " + name);
        return params_[it->second];
    }

    std::vector<Parameter<T>>& params() { return params_; }
    const std::vector<Parameter<T>>& params() const { return params_; }

    std::size_t size() const { return params_.size(); }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.value.size();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) std::fill(p.grad.storage().begin(), p.grad.storage().end(), T(0));
    }

    template <typename U>
    ParameterStore<U> cast() const {
        ParameterStore<U> out;
        for (const auto& p : params_) out.add(p.name, p.value.template cast<U>(), p.decay);
        return out;
    }

private:
    // Parameters live in a vector; references returned by add() are invalidated
    // by later insertions.
    std::vector<Parameter<T>> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace dualpath
