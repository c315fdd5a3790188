#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "usts/tensor.hpp"

namespace usts {

using Rng = std::mt19937_64;

/// A named leaf tensor. Frozen parameters never require a gradient, so the
/// tape never produces one for them.
template <class T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    bool trainable = true;
};

/// Ordered registry of every parameter in a model. Insertion order is the
/// serialization and optimizer order.
template <class T>
class ParameterSet {
public:
    /// Registers a parameter and returns a handle sharing its storage.
    Tensor<T> add(const std::string& name, Tensor<T> value, bool trainable) {
        if (index_.count(name)) throw ContractError("duplicate parameter name '" + name + "'");
        value.set_requires_grad(trainable);
        index_[name] = params_.size();
        params_.push_back({name, std::move(value), trainable});
        return params_.back().value;
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    Parameter<T>& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractError("no parameter named '" + name + "'");
        return params_[it->second];
    }
    const Parameter<T>& get(const std::string& name) const {
        return const_cast<ParameterSet*>(this)->get(name);
    }

    void set_trainable(const std::string& name, bool on) {
        auto& p = get(name);
        p.trainable = on;
        p.value.set_requires_grad(on);
    }

    std::vector<Parameter<T>>& all() { return params_; }
    const std::vector<Parameter<T>>& all() const { return params_; }
    std::size_t size() const { return params_.size(); }

    std::size_t count(bool trainable_only) const {
        std::size_t n = 0;
        for (const auto& p : params_)
            if (!trainable_only || p.trainable) n += p.value.numel();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p.value.zero_grad();
    }

private:
    std::vector<Parameter<T>> params_;
    std::map<std::string, std::size_t> index_;
};

namespace init {

template <class T>
Tensor<T> normal(Shape shape, double stddev, Rng& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(dist(rng));
    return Tensor<T>(std::move(shape), std::move(v));
}

/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual default for dense and recurrent layers.
template <class T>
Tensor<T> fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(dist(rng));
    return Tensor<T>(std::move(shape), std::move(v));
}

}  // namespace init

}  // namespace usts
