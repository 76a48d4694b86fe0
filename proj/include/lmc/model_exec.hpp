#pragma once

#include <map>
#include <string>
#include <vector>

#include "lmc/model.hpp"

namespace lmc {

// Arch-tag dispatch over the network forward definitions.

// Eval/inference logits for a batch (N,3,S,S).
Tensor model_logits(ModelGraph& model, const Tensor& batch, bool training);

// One forward+backward in train mode; returns the scalar loss and fills
// per-parameter gradients. Throws NumericError on non-finite loss/logits.
float model_forward_backward(ModelGraph& model, const Tensor& batch,
                             const std::vector<int>& labels, std::map<std::string, Tensor>& grads,
                             Tensor* logits_out = nullptr);

int model_num_classes(const ModelGraph& model);

// Double-precision shadow loss for gradient checking: evaluates the same
// graph with 64-bit scalars using the supplied parameter overrides.
TensorD model_shadow_loss(const ModelGraph& model, const TensorD& batch,
                          const std::vector<int>& labels,
                          const std::map<std::string, TensorD>& overrides, bool training);

// Double-precision analytic gradients through the same graph code as the
// float path. Finite-difference checks compare against these so that the
// verdict reflects the backward-pass math, not float rounding of parameters
// whose true gradient is vanishingly small.
std::map<std::string, TensorD> model_shadow_backward(const ModelGraph& model, const TensorD& batch,
                                                     const std::vector<int>& labels,
                                                     const std::map<std::string, TensorD>& overrides,
                                                     bool training);

}  // namespace lmc
