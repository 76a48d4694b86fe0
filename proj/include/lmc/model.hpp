#pragma once

#include <map>
#include <random>
#include <string>
#include <vector>

#include "lmc/tape.hpp"
#include "lmc/tensor.hpp"

namespace lmc {

// Ordered set of named parameter tensors plus non-trainable buffers
// (batch-norm running stats). The forward definition lives in the densenet /
// levit modules keyed by the architecture tag.
struct ModelGraph {
    std::string arch;         // e.g. "densenet-toy/v1"
    std::string config_json;  // config echo
    std::vector<std::string> param_order;
    std::map<std::string, Tensor> params;
    std::vector<std::string> buffer_order;
    std::map<std::string, Tensor> buffers;

    Tensor& add_param(const std::string& name, Tensor t) {
        if (params.count(name)) throw ConfigError("duplicate parameter name: " + name);
        param_order.push_back(name);
        return params.emplace(name, std::move(t)).first->second;
    }
    Tensor& add_buffer(const std::string& name, Tensor t) {
        if (buffers.count(name)) throw ConfigError("duplicate buffer name: " + name);
        buffer_order.push_back(name);
        return buffers.emplace(name, std::move(t)).first->second;
    }
    Tensor& param(const std::string& name) {
        auto it = params.find(name);
        if (it == params.end()) throw ConfigError("unknown parameter: " + name);
        return it->second;
    }
    const Tensor& param(const std::string& name) const {
        auto it = params.find(name);
        if (it == params.end()) throw ConfigError("unknown parameter: " + name);
        return it->second;
    }
    Tensor& buffer(const std::string& name) {
        auto it = buffers.find(name);
        if (it == buffers.end()) throw ConfigError("unknown buffer: " + name);
        return it->second;
    }
    int64_t num_scalars() const {
        int64_t n = 0;
        for (const auto& [k, v] : params) n += v.numel();
        return n;
    }
};

// He-normal initialization for conv/linear weights, fan_in from shape.
inline Tensor he_normal(Shape shape, std::mt19937& rng) {
    int64_t fan_in = 1;
    if (shape.size() == 4)
        fan_in = shape[1] * shape[2] * shape[3];  // OIKK
    else if (shape.size() == 2)
        fan_in = shape[0];  // F,G
    else
        fan_in = shape[0];
    float stddev = std::sqrt(2.0f / static_cast<float>(fan_in));
    std::normal_distribution<float> dist(0.0f, stddev);
    Tensor t(std::move(shape));
    for (auto& v : t.data) v = dist(rng);
    return t;
}

// Binds ModelGraph parameters into a tape, casting to the tape scalar type,
// and remembers name -> var for gradient collection after backward.
template <typename T>
struct ParamBinder {
    TapeT<T>* tape;
    const ModelGraph* model;
    bool requires_grad = true;
    const std::map<std::string, TensorT<T>>* overrides = nullptr;  // shadow values
    std::map<std::string, typename TapeT<T>::Var> vars;

    typename TapeT<T>::Var operator()(const std::string& name) {
        auto it = vars.find(name);
        if (it != vars.end()) return it->second;
        typename TapeT<T>::Var v;
        if (overrides) {
            auto ov = overrides->find(name);
            if (ov != overrides->end()) {
                v = tape->leaf(ov->second, requires_grad);
                vars.emplace(name, v);
                return v;
            }
        }
        const Tensor& p = model->param(name);
        v = tape->leaf(p.template cast<T>(), requires_grad);
        vars.emplace(name, v);
        return v;
    }

    std::map<std::string, Tensor> grads() const {
        std::map<std::string, Tensor> out;
        for (const auto& [name, var] : vars) out[name] = tape->grad(var).template cast<float>();
        return out;
    }
};

}  // namespace lmc
