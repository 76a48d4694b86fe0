#include "lmc/model_exec.hpp"

#include "lmc/densenet.hpp"
#include "lmc/errors.hpp"
#include "lmc/levit.hpp"

namespace lmc {

namespace {

template <typename T>
typename TapeT<T>::Var forward_dispatch(TapeT<T>& tape, ParamBinder<T>& bind,
                                        const ModelGraph& model, typename TapeT<T>::Var input,
                                        bool training, ModelGraph* stats) {
    if (model.arch == kDenseNetArch) {
        DenseNetConfig cfg = DenseNetConfig::from_json(model.config_json);
        return densenet_forward_tape<T>(tape, bind, cfg, input, training, stats);
    }
    if (model.arch == kLeViTArch) {
        LeViTConfig cfg = LeViTConfig::from_json(model.config_json);
        return levit_forward_tape<T>(tape, bind, cfg, input, training, stats);
    }
    throw ConfigError("unknown architecture tag: " + model.arch);
}

}  // namespace

Tensor model_logits(ModelGraph& model, const Tensor& batch, bool training) {
    Tape tape;
    ParamBinder<float> bind{&tape, &model, false};
    auto input = tape.leaf(batch, false);
    auto logits = forward_dispatch<float>(tape, bind, model, input, training, &model);
    Tensor out = tape.val(logits);
    if (!out.all_finite()) throw NumericError("model_logits: non-finite logits");
    return out;
}

float model_forward_backward(ModelGraph& model, const Tensor& batch,
                             const std::vector<int>& labels, std::map<std::string, Tensor>& grads,
                             Tensor* logits_out) {
    Tape tape;
    ParamBinder<float> bind{&tape, &model, true};
    auto input = tape.leaf(batch, false);
    auto logits = forward_dispatch<float>(tape, bind, model, input, true, &model);
    if (!tape.val(logits).all_finite())
        throw NumericError("model_forward_backward: non-finite logits");
    if (logits_out) *logits_out = tape.val(logits);
    auto loss = tape.cross_entropy(logits, std::make_shared<const std::vector<int>>(labels));
    tape.backward(loss);
    grads = bind.grads();
    return tape.val(loss)[0];
}

int model_num_classes(const ModelGraph& model) {
    return static_cast<int>(model.param("head.fc.w").dim(1));
}

TensorD model_shadow_loss(const ModelGraph& model, const TensorD& batch,
                          const std::vector<int>& labels,
                          const std::map<std::string, TensorD>& overrides, bool training) {
    TapeD tape;
    ParamBinder<double> bind{&tape, &model, false, &overrides};
    auto input = tape.leaf(batch, false);
    // scratch copy so the shadow pass never mutates the real running stats
    ModelGraph scratch = model;
    auto logits = forward_dispatch<double>(tape, bind, model, input, training, &scratch);
    auto loss = tape.cross_entropy(logits, std::make_shared<const std::vector<int>>(labels));
    return tape.val(loss);
}

std::map<std::string, TensorD> model_shadow_backward(
    const ModelGraph& model, const TensorD& batch, const std::vector<int>& labels,
    const std::map<std::string, TensorD>& overrides, bool training) {
    TapeD tape;
    ParamBinder<double> bind{&tape, &model, true, &overrides};
    auto input = tape.leaf(batch, false);
    ModelGraph scratch = model;
    auto logits = forward_dispatch<double>(tape, bind, model, input, training, &scratch);
    auto loss = tape.cross_entropy(logits, std::make_shared<const std::vector<int>>(labels));
    tape.backward(loss);
    std::map<std::string, TensorD> grads;
    for (const auto& [name, var] : bind.vars) grads[name] = tape.grad(var);
    return grads;
}

}  // namespace lmc
