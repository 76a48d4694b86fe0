#include "lmc/levit.hpp"

#include <nlohmann/json.hpp>

#include "lmc/errors.hpp"

namespace lmc {

void LeViTConfig::validate() const {
    if (stem_channels.empty()) throw ConfigError("levit: stem_channels must be non-empty");
    size_t stages = stage_dims.size();
    if (stages == 0) throw ConfigError("levit: stage_dims must be non-empty");
    if (stage_depths.size() != stages || stage_heads.size() != stages)
        throw ConfigError("levit: stage list lengths must match");
    for (int c : stem_channels)
        if (c <= 0) throw ConfigError("levit: stem channels must be positive");
    for (size_t i = 0; i < stages; ++i)
        if (stage_dims[i] <= 0 || stage_depths[i] <= 0 || stage_heads[i] <= 0)
            throw ConfigError("levit: stage settings must be positive");
    if (key_dim <= 0 || mlp_ratio <= 0) throw ConfigError("levit: key_dim/mlp_ratio must be positive");
    if (num_classes != 25) throw ConfigError("levit: num_classes is fixed at 25");
    int divisor = 1 << (stem_channels.size() + stage_dims.size() - 1);
    if (input_side <= 0 || input_side % divisor != 0)
        throw ConfigError("levit: input_side must be divisible by 2^(stem depth + stages - 1)");
}

std::string LeViTConfig::to_json() const {
    nlohmann::json j{{"stem_channels", stem_channels}, {"stage_dims", stage_dims},
                     {"stage_depths", stage_depths},   {"stage_heads", stage_heads},
                     {"key_dim", key_dim},             {"mlp_ratio", mlp_ratio},
                     {"num_classes", num_classes},     {"input_side", input_side},
                     {"attn_bias", attn_bias},         {"learned_query_pool", learned_query_pool}};
    return j.dump();
}

LeViTConfig LeViTConfig::from_json(const std::string& json) {
    auto j = nlohmann::json::parse(json);
    LeViTConfig cfg;
    auto vec = [&](const char* key, std::vector<int>& out) {
        if (j.contains(key)) out = j[key].get<std::vector<int>>();
    };
    vec("stem_channels", cfg.stem_channels);
    vec("stage_dims", cfg.stage_dims);
    vec("stage_depths", cfg.stage_depths);
    vec("stage_heads", cfg.stage_heads);
    cfg.key_dim = j.value("key_dim", cfg.key_dim);
    cfg.mlp_ratio = j.value("mlp_ratio", cfg.mlp_ratio);
    cfg.num_classes = j.value("num_classes", cfg.num_classes);
    cfg.input_side = j.value("input_side", cfg.input_side);
    cfg.attn_bias = j.value("attn_bias", cfg.attn_bias);
    cfg.learned_query_pool = j.value("learned_query_pool", cfg.learned_query_pool);
    return cfg;
}

int levit_stem_side(const LeViTConfig& cfg, int input_side) {
    int side = input_side;
    for (size_t i = 0; i < cfg.stem_channels.size(); ++i) {
        if (side % 2 != 0) throw ConfigError("levit: input side must halve through the stem");
        side /= 2;
    }
    return side;
}

std::vector<int64_t> levit_token_schedule(const LeViTConfig& cfg, int input_side) {
    int side = levit_stem_side(cfg, input_side);
    std::vector<int64_t> counts;
    for (size_t st = 0; st < cfg.stage_dims.size(); ++st) {
        counts.push_back(static_cast<int64_t>(side) * side);
        if (st + 1 < cfg.stage_dims.size()) {
            if (side % 2 != 0) throw ConfigError("levit: token grid side must be even to shrink");
            side /= 2;
        }
    }
    return counts;
}

std::shared_ptr<std::vector<int64_t>> AttentionBiasTable::gather_indices(
    int64_t heads, int64_t key_side, const std::vector<std::pair<int64_t, int64_t>>& q_pos) {
    int64_t n_off = offsets_for_side(key_side);
    int64_t lk = key_side * key_side;
    auto idx = std::make_shared<std::vector<int64_t>>();
    idx->reserve(static_cast<size_t>(heads * static_cast<int64_t>(q_pos.size()) * lk));
    for (int64_t h = 0; h < heads; ++h) {
        for (const auto& [qr, qc] : q_pos) {
            for (int64_t kr = 0; kr < key_side; ++kr)
                for (int64_t kc = 0; kc < key_side; ++kc)
                    idx->push_back(h * n_off + offset_index(key_side, qr - kr, qc - kc));
        }
    }
    return idx;
}

std::shared_ptr<std::vector<int64_t>> AttentionBiasTable::gather_indices_full(int64_t heads,
                                                                              int64_t side) {
    std::vector<std::pair<int64_t, int64_t>> q_pos;
    for (int64_t r = 0; r < side; ++r)
        for (int64_t c = 0; c < side; ++c) q_pos.emplace_back(r, c);
    return gather_indices(heads, side, q_pos);
}

std::shared_ptr<std::vector<int64_t>> AttentionBiasTable::gather_indices_shrink(int64_t heads,
                                                                                int64_t side) {
    std::vector<std::pair<int64_t, int64_t>> q_pos;
    for (int64_t r = 0; r < side; r += 2)
        for (int64_t c = 0; c < side; c += 2) q_pos.emplace_back(r, c);
    return gather_indices(heads, side, q_pos);
}

std::shared_ptr<std::vector<int64_t>> subsample_token_indices(int64_t side) {
    auto idx = std::make_shared<std::vector<int64_t>>();
    for (int64_t r = 0; r < side; r += 2)
        for (int64_t c = 0; c < side; c += 2) idx->push_back(r * side + c);
    return idx;
}

namespace {

void add_bn1d(ModelGraph& m, const std::string& prefix, int channels) {
    m.add_param(prefix + ".bn.gamma", Tensor::full({channels}, 1.0f));
    m.add_param(prefix + ".bn.beta", Tensor::zeros({channels}));
    m.add_buffer(prefix + ".bn.rm", Tensor::zeros({channels}));
    m.add_buffer(prefix + ".bn.rv", Tensor::full({channels}, 1.0f));
}

void add_linear(ModelGraph& m, const std::string& prefix, int in, int out, std::mt19937& rng) {
    m.add_param(prefix + ".w", he_normal({in, out}, rng));
    m.add_param(prefix + ".b", Tensor::zeros({out}));
}

void add_mha(ModelGraph& m, const std::string& prefix, int dim_in, int dim_out, int heads,
             int key_dim, bool bias, int64_t key_side, std::mt19937& rng) {
    add_linear(m, prefix + ".q", dim_in, heads * key_dim, rng);
    add_linear(m, prefix + ".k", dim_in, heads * key_dim, rng);
    add_linear(m, prefix + ".v", dim_in, heads * 2 * key_dim, rng);
    add_linear(m, prefix + ".proj", heads * 2 * key_dim, dim_out, rng);
    if (bias)
        m.add_param(prefix + ".bias",
                    Tensor::zeros({heads, AttentionBiasTable::offsets_for_side(key_side)}));
}

void add_mlp(ModelGraph& m, const std::string& prefix, int dim, int ratio, std::mt19937& rng) {
    add_bn1d(m, prefix, dim);
    add_linear(m, prefix + ".fc1", dim, ratio * dim, rng);
    add_linear(m, prefix + ".fc2", ratio * dim, dim, rng);
}

}  // namespace

ModelGraph build_levit(const LeViTConfig& cfg, uint64_t seed) {
    cfg.validate();
    std::mt19937 rng(static_cast<uint32_t>(seed));
    ModelGraph m;
    m.arch = kLeViTArch;
    m.config_json = cfg.to_json();
    int in_ch = 3;
    for (size_t i = 0; i < cfg.stem_channels.size(); ++i) {
        std::string prefix = "stem" + std::to_string(i);
        int out_ch = cfg.stem_channels[i];
        m.add_param(prefix + ".conv.w", he_normal({out_ch, in_ch, 3, 3}, rng));
        m.add_param(prefix + ".conv.b", Tensor::zeros({out_ch}));
        add_bn1d(m, prefix, out_ch);
        in_ch = out_ch;
    }
    // Bias tables are sized by the key-grid side at each stage, fixed by
    // cfg.input_side (28/14/7 for the defaults).
    int stages = static_cast<int>(cfg.stage_dims.size());
    int side = levit_stem_side(cfg, cfg.input_side);
    for (int st = 0; st < stages; ++st) {
        int dim = cfg.stage_dims[static_cast<size_t>(st)];
        int heads = cfg.stage_heads[static_cast<size_t>(st)];
        for (int d = 0; d < cfg.stage_depths[static_cast<size_t>(st)]; ++d) {
            std::string prefix = "stage" + std::to_string(st) + ".block" + std::to_string(d);
            add_bn1d(m, prefix + ".attn", dim);
            add_mha(m, prefix + ".attn", dim, dim, heads, cfg.key_dim, cfg.attn_bias, side, rng);
            add_mlp(m, prefix + ".mlp", dim, cfg.mlp_ratio, rng);
        }
        if (st + 1 < stages) {
            std::string prefix = "shrink" + std::to_string(st);
            int next_dim = cfg.stage_dims[static_cast<size_t>(st + 1)];
            int next_heads = cfg.stage_heads[static_cast<size_t>(st + 1)];
            add_bn1d(m, prefix, dim);
            add_mha(m, prefix, dim, next_dim, next_heads, cfg.key_dim, cfg.attn_bias, side, rng);
            add_mlp(m, prefix + ".mlp", next_dim, cfg.mlp_ratio, rng);
            side /= 2;
        }
    }
    int last_dim = cfg.stage_dims.back();
    if (cfg.learned_query_pool) {
        m.add_param("pool.query", he_normal({1, last_dim}, rng));
        add_mha(m, "pool", last_dim, last_dim, cfg.stage_heads.back(), cfg.key_dim, false, 1, rng);
    }
    add_bn1d(m, "head", last_dim);
    add_linear(m, "head.fc", last_dim, cfg.num_classes, rng);
    return m;
}

Tensor levit_forward(ModelGraph& model, const Tensor& batch, bool training) {
    if (batch.rank() != 4 || batch.dim(1) != 3)
        throw ShapeError("levit_forward: batch must be (N,3,H,W)");
    LeViTConfig cfg = LeViTConfig::from_json(model.config_json);
    if (batch.dim(2) != cfg.input_side || batch.dim(3) != cfg.input_side)
        throw ShapeError("levit_forward: input side must match the configured input_side");
    Tape tape;
    ParamBinder<float> bind{&tape, &model, false};
    auto input = tape.leaf(batch, false);
    auto logits = levit_forward_tape<float>(tape, bind, cfg, input, training, &model);
    Tensor out = tape.val(logits);
    if (!out.all_finite()) throw NumericError("levit_forward: non-finite logits");
    return out;
}

}  // namespace lmc
