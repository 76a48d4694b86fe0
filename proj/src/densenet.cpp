#include "lmc/densenet.hpp"

#include <nlohmann/json.hpp>

#include "lmc/errors.hpp"

namespace lmc {

void DenseNetConfig::validate() const {
    if (growth_rate <= 0 || init_channels <= 0) throw ConfigError("densenet: counts must be positive");
    if (block_layout.empty()) throw ConfigError("densenet: block_layout must be non-empty");
    for (int n : block_layout)
        if (n <= 0) throw ConfigError("densenet: block layer counts must be positive");
    if (num_classes != 2) throw ConfigError("densenet: num_classes is fixed at 2");
    if (!(compression > 0.0f && compression <= 1.0f))
        throw ConfigError("densenet: compression must be in (0,1]");
}

std::string DenseNetConfig::to_json() const {
    nlohmann::json j{{"growth_rate", growth_rate},
                     {"block_layout", block_layout},
                     {"init_channels", init_channels},
                     {"num_classes", num_classes},
                     {"compression", compression}};
    return j.dump();
}

DenseNetConfig DenseNetConfig::from_json(const std::string& json) {
    auto j = nlohmann::json::parse(json);
    DenseNetConfig cfg;
    cfg.growth_rate = j.value("growth_rate", cfg.growth_rate);
    if (j.contains("block_layout")) cfg.block_layout = j["block_layout"].get<std::vector<int>>();
    cfg.init_channels = j.value("init_channels", cfg.init_channels);
    cfg.num_classes = j.value("num_classes", cfg.num_classes);
    cfg.compression = j.value("compression", cfg.compression);
    return cfg;
}

int densenet_channels_before(const DenseNetConfig& cfg, int block, int layer) {
    int ch = cfg.init_channels;
    for (int b = 0; b <= block; ++b) {
        int layers = (b == block) ? layer : cfg.block_layout[static_cast<size_t>(b)];
        ch += layers * cfg.growth_rate;
        if (b < block) ch = static_cast<int>(ch * cfg.compression);
    }
    return ch;
}

int densenet_head_channels(const DenseNetConfig& cfg) {
    int blocks = static_cast<int>(cfg.block_layout.size());
    return densenet_channels_before(cfg, blocks - 1,
                                    cfg.block_layout[static_cast<size_t>(blocks - 1)]);
}

namespace {

void add_bn(ModelGraph& m, const std::string& prefix, int channels) {
    m.add_param(prefix + ".bn.gamma", Tensor::full({channels}, 1.0f));
    m.add_param(prefix + ".bn.beta", Tensor::zeros({channels}));
    m.add_buffer(prefix + ".bn.rm", Tensor::zeros({channels}));
    m.add_buffer(prefix + ".bn.rv", Tensor::full({channels}, 1.0f));
}

}  // namespace

ModelGraph build_densenet(const DenseNetConfig& cfg, uint64_t seed) {
    cfg.validate();
    std::mt19937 rng(static_cast<uint32_t>(seed));
    ModelGraph m;
    m.arch = kDenseNetArch;
    m.config_json = cfg.to_json();
    m.add_param("stem.conv.w", he_normal({cfg.init_channels, 3, 3, 3}, rng));
    m.add_param("stem.conv.b", Tensor::zeros({cfg.init_channels}));
    add_bn(m, "stem", cfg.init_channels);
    int blocks = static_cast<int>(cfg.block_layout.size());
    for (int b = 0; b < blocks; ++b) {
        for (int l = 0; l < cfg.block_layout[static_cast<size_t>(b)]; ++l) {
            int ch = densenet_channels_before(cfg, b, l);
            std::string prefix = "block" + std::to_string(b) + ".layer" + std::to_string(l);
            add_bn(m, prefix, ch);
            m.add_param(prefix + ".conv.w", he_normal({cfg.growth_rate, ch, 3, 3}, rng));
            m.add_param(prefix + ".conv.b", Tensor::zeros({cfg.growth_rate}));
        }
        if (b + 1 < blocks) {
            int ch = densenet_channels_before(cfg, b, cfg.block_layout[static_cast<size_t>(b)]);
            int out = static_cast<int>(ch * cfg.compression);
            std::string prefix = "trans" + std::to_string(b);
            add_bn(m, prefix, ch);
            m.add_param(prefix + ".conv.w", he_normal({out, ch, 1, 1}, rng));
            m.add_param(prefix + ".conv.b", Tensor::zeros({out}));
        }
    }
    int head_ch = densenet_head_channels(cfg);
    add_bn(m, "head", head_ch);
    m.add_param("head.fc.w", he_normal({head_ch, cfg.num_classes}, rng));
    m.add_param("head.fc.b", Tensor::zeros({cfg.num_classes}));
    return m;
}

Tensor densenet_forward(ModelGraph& model, const Tensor& batch, bool training) {
    if (batch.rank() != 4 || batch.dim(1) != 3)
        throw ShapeError("densenet_forward: batch must be (N,3,H,W)");
    DenseNetConfig cfg = DenseNetConfig::from_json(model.config_json);
    Tape tape;
    ParamBinder<float> bind{&tape, &model, false};
    auto input = tape.leaf(batch, false);
    auto logits = densenet_forward_tape<float>(tape, bind, cfg, input, training, &model);
    Tensor out = tape.val(logits);
    if (!out.all_finite()) throw NumericError("densenet_forward: non-finite logits");
    return out;
}

}  // namespace lmc
