#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "petlab/errors.hpp"
#include "petlab/tensor.hpp"

namespace petlab {

// Named, shaped weight. The trainable flag is mirrored into the tensor's
// requires_grad so backward skips frozen parameters entirely; the
// optimizer additionally consults the trainable mask, so a frozen
// parameter is never touched by either path.
template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    bool trainable = true;
};

// Ordered collection of uniquely named parameters. Order is insertion
// order and is stable across save/load.
template <typename T>
class ParameterStore {
public:
    Parameter<T>& add(std::string name, Tensor<T> value, bool trainable = true) {
        if (index_.count(name)) {
            throw ContractError("duplicate parameter name: " + name);
        }
        index_[name] = params_.size();
        params_.push_back({std::move(name), std::move(value), trainable});
        Parameter<T>& p = params_.back();
        p.value.set_requires_grad(p.trainable);
        return p;
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    Parameter<T>& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("missing parameter: " + name);
        return params_[it->second];
    }
    const Parameter<T>& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("missing parameter: " + name);
        return params_[it->second];
    }

    Tensor<T>& tensor(const std::string& name) { return get(name).value; }
    const Tensor<T>& tensor(const std::string& name) const { return get(name).value; }

    std::vector<Parameter<T>>& all() { return params_; }
    const std::vector<Parameter<T>>& all() const { return params_; }
    std::size_t count() const { return params_.size(); }

    void set_trainable(const std::string& name, bool trainable) {
        Parameter<T>& p = get(name);
        p.trainable = trainable;
        p.value.set_requires_grad(trainable);
    }

    void freeze_all() {
        for (auto& p : params_) {
            p.trainable = false;
            p.value.set_requires_grad(false);
        }
    }

    std::size_t total_size() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.value.size();
        return n;
    }

    std::size_t trainable_size() const {
        std::size_t n = 0;
        for (const auto& p : params_) {
            if (p.trainable) n += p.value.size();
        }
        return n;
    }

    void zero_grads() {
        for (auto& p : params_) p.value.zero_grad();
    }

    // FNV-1a over the raw bytes of every parameter buffer, in order.
    // Used by the frozen-parameter audits.
    std::uint64_t content_hash() const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        auto mix = [&h](const void* data, std::size_t bytes) {
            const auto* p = static_cast<const unsigned char*>(data);
            for (std::size_t i = 0; i < bytes; ++i) {
                h ^= p[i];
                h *= 0x100000001b3ull;
            }
        };
        for (const auto& p : params_) {
            mix(p.name.data(), p.name.size());
            mix(p.value.values().data(), p.value.size() * sizeof(T));
        }
        return h;
    }

private:
    std::vector<Parameter<T>> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace petlab
