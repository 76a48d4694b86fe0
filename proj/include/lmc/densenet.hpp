#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lmc/model.hpp"
#include "lmc/tape.hpp"

namespace lmc {

inline constexpr const char* kDenseNetArch = "densenet-toy/v1";

struct DenseNetConfig {
    int growth_rate = 4;
    std::vector<int> block_layout = {2, 2, 2};
    int init_channels = 8;
    int num_classes = 2;  // benign / malign
    float compression = 0.5f;

    void validate() const;
    std::string to_json() const;
    static DenseNetConfig from_json(const std::string& json);
};

// Channel count entering layer `layer` of block `block` (concatenation rule:
// init + i * growth inside a block, compressed at each transition).
int densenet_channels_before(const DenseNetConfig& cfg, int block, int layer);
int densenet_head_channels(const DenseNetConfig& cfg);

ModelGraph build_densenet(const DenseNetConfig& cfg, uint64_t seed);

namespace detail {

template <typename T>
typename TapeT<T>::Var bn_relu(TapeT<T>& tape, ParamBinder<T>& p, const std::string& prefix,
                               typename TapeT<T>::Var x, bool training, ModelGraph* stats) {
    Tensor* rm = stats ? &stats->buffer(prefix + ".bn.rm") : nullptr;
    Tensor* rv = stats ? &stats->buffer(prefix + ".bn.rv") : nullptr;
    auto y = tape.batchnorm2d(x, p(prefix + ".bn.gamma"), p(prefix + ".bn.beta"), rm, rv, training);
    return tape.relu(y);
}

}  // namespace detail

// Forward pass over an already-bound tape. `stats` supplies batch-norm
// running buffers; it must be the owning ModelGraph in the float path and may
// be non-null in the shadow path too (stats are only mutated in train mode).
template <typename T>
typename TapeT<T>::Var densenet_forward_tape(TapeT<T>& tape, ParamBinder<T>& p,
                                             const DenseNetConfig& cfg,
                                             typename TapeT<T>::Var input, bool training,
                                             ModelGraph* stats) {
    using Var = typename TapeT<T>::Var;
    Var x = tape.conv2d(input, p("stem.conv.w"), p("stem.conv.b"), 2, 1);
    x = detail::bn_relu(tape, p, "stem", x, training, stats);
    x = tape.avgpool2d(x, 2, 2);
    int blocks = static_cast<int>(cfg.block_layout.size());
    for (int b = 0; b < blocks; ++b) {
        std::vector<Var> features = {x};
        for (int l = 0; l < cfg.block_layout[static_cast<size_t>(b)]; ++l) {
            Var cur = features.size() == 1 ? features[0] : tape.concat_channels(features);
            std::string prefix = "block" + std::to_string(b) + ".layer" + std::to_string(l);
            Var y = detail::bn_relu(tape, p, prefix, cur, training, stats);
            y = tape.conv2d(y, p(prefix + ".conv.w"), p(prefix + ".conv.b"), 1, 1);
            features.push_back(y);
        }
        x = tape.concat_channels(features);
        if (b + 1 < blocks) {
            std::string prefix = "trans" + std::to_string(b);
            Var y = detail::bn_relu(tape, p, prefix, x, training, stats);
            y = tape.conv2d(y, p(prefix + ".conv.w"), p(prefix + ".conv.b"), 1, 0);
            x = tape.avgpool2d(y, 2, 2);
        }
    }
    x = detail::bn_relu(tape, p, "head", x, training, stats);
    x = tape.global_avgpool(x);
    return tape.linear(x, p("head.fc.w"), p("head.fc.b"));
}

// Convenience float-path forward: batch (N,3,H,W) -> logits (N,num_classes).
Tensor densenet_forward(ModelGraph& model, const Tensor& batch, bool training);

}  // namespace lmc
