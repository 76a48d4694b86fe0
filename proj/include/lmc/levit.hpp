#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "lmc/model.hpp"
#include "lmc/tape.hpp"

namespace lmc {

inline constexpr const char* kLeViTArch = "levit-toy/v1";

struct LeViTConfig {
    std::vector<int> stem_channels = {8, 16, 32};
    std::vector<int> stage_dims = {32, 48, 64};
    std::vector<int> stage_depths = {2, 2, 2};
    std::vector<int> stage_heads = {2, 3, 4};
    int key_dim = 8;       // per-head Q/K width; V width is 2 * key_dim
    int mlp_ratio = 2;
    int num_classes = 25;  // malware families
    int input_side = 224;  // sizes the relative-offset bias tables
    bool attn_bias = true;
    bool learned_query_pool = false;  // default: mean pooling over tokens

    void validate() const;
    std::string to_json() const;
    static LeViTConfig from_json(const std::string& json);
};

// Token-grid side after the stem for a given input side (one stride-2 conv
// per stem entry), and the per-stage token counts.
int levit_stem_side(const LeViTConfig& cfg, int input_side);
std::vector<int64_t> levit_token_schedule(const LeViTConfig& cfg, int input_side = 224);

ModelGraph build_levit(const LeViTConfig& cfg, uint64_t seed);

// Relative-offset attention bias: positions with equal (drow, dcol) share one
// learned scalar per head. Index layout: (dr + side - 1) * (2*side - 1) +
// (dc + side - 1) into a table row of (2*side-1)^2 scalars.
struct AttentionBiasTable {
    static int64_t offsets_for_side(int64_t side) { return (2 * side - 1) * (2 * side - 1); }
    static int64_t offset_index(int64_t side, int64_t dr, int64_t dc) {
        return (dr + side - 1) * (2 * side - 1) + (dc + side - 1);
    }
    // Flat gather indices mapping a (heads, Lq, Lk) bias tensor onto the
    // (heads, offsets) table. Query positions are given on the key grid.
    static std::shared_ptr<std::vector<int64_t>> gather_indices(
        int64_t heads, int64_t key_side, const std::vector<std::pair<int64_t, int64_t>>& q_pos);
    // Full-resolution queries (q grid == k grid).
    static std::shared_ptr<std::vector<int64_t>> gather_indices_full(int64_t heads,
                                                                     int64_t side);
    // Stride-2 subsampled queries.
    static std::shared_ptr<std::vector<int64_t>> gather_indices_shrink(int64_t heads,
                                                                       int64_t side);
};

std::shared_ptr<std::vector<int64_t>> subsample_token_indices(int64_t side);

namespace levit_detail {

template <typename T>
typename TapeT<T>::Var bn_tokens(TapeT<T>& tape, ParamBinder<T>& p, const std::string& prefix,
                                 typename TapeT<T>::Var x, bool training, ModelGraph* stats) {
    const auto& s = tape.val(x).shape;  // (N, L, D)
    int64_t n = s[0], l = s[1], d = s[2];
    auto flat = tape.reshape(x, {n * l, d, 1, 1});
    Tensor* rm = stats ? &stats->buffer(prefix + ".bn.rm") : nullptr;
    Tensor* rv = stats ? &stats->buffer(prefix + ".bn.rv") : nullptr;
    auto y = tape.batchnorm2d(flat, p(prefix + ".bn.gamma"), p(prefix + ".bn.beta"), rm, rv,
                              training);
    return tape.reshape(y, {n, l, d});
}

// (N, L, h*d) -> (N, h, L, d)
template <typename T>
typename TapeT<T>::Var split_heads(TapeT<T>& tape, typename TapeT<T>::Var x, int64_t heads,
                                   int64_t depth) {
    const auto& s = tape.val(x).shape;
    auto r = tape.reshape(x, {s[0], s[1], heads, depth});
    return tape.permute4(r, {0, 2, 1, 3});
}

// (N, h, L, d) -> (N, L, h*d)
template <typename T>
typename TapeT<T>::Var merge_heads(TapeT<T>& tape, typename TapeT<T>::Var x) {
    auto s = tape.val(x).shape;  // copy: permute4 may grow the tape and invalidate references
    auto pm = tape.permute4(x, {0, 2, 1, 3});
    return tape.reshape(pm, {s[0], s[2], s[1] * s[3]});
}

// Multi-head attention sublayer reading q from `q_tokens` and k/v from
// `kv_tokens` (already normalized), with an optional relative-offset bias.
template <typename T>
typename TapeT<T>::Var mha(TapeT<T>& tape, ParamBinder<T>& p, const std::string& prefix,
                           typename TapeT<T>::Var q_tokens, typename TapeT<T>::Var kv_tokens,
                           int heads, int key_dim,
                           std::shared_ptr<const std::vector<int64_t>> bias_idx, int64_t lq,
                           int64_t lk) {
    auto q = split_heads(tape, tape.linear(q_tokens, p(prefix + ".q.w"), p(prefix + ".q.b")),
                         heads, key_dim);
    auto k = split_heads(tape, tape.linear(kv_tokens, p(prefix + ".k.w"), p(prefix + ".k.b")),
                         heads, key_dim);
    auto v = split_heads(tape, tape.linear(kv_tokens, p(prefix + ".v.w"), p(prefix + ".v.b")),
                         heads, 2 * key_dim);
    std::optional<typename TapeT<T>::Var> bias;
    if (bias_idx) bias = tape.gather(p(prefix + ".bias"), bias_idx, {heads, lq, lk});
    auto att = tape.attention(q, k, v, bias);
    auto merged = merge_heads(tape, att);
    auto act = tape.hardswish(merged);
    return tape.linear(act, p(prefix + ".proj.w"), p(prefix + ".proj.b"));
}

template <typename T>
typename TapeT<T>::Var mlp_block(TapeT<T>& tape, ParamBinder<T>& p, const std::string& prefix,
                                 typename TapeT<T>::Var x, bool training, ModelGraph* stats) {
    auto xb = bn_tokens(tape, p, prefix, x, training, stats);
    auto h = tape.hardswish(tape.linear(xb, p(prefix + ".fc1.w"), p(prefix + ".fc1.b")));
    auto out = tape.linear(h, p(prefix + ".fc2.w"), p(prefix + ".fc2.b"));
    return tape.add(x, out);
}

}  // namespace levit_detail

// One residual attention block (pre-BN attention + pre-BN MLP) over grid
// tokens. L must be a perfect square.
template <typename T>
typename TapeT<T>::Var levit_attention_block(TapeT<T>& tape, ParamBinder<T>& p,
                                             const std::string& prefix,
                                             typename TapeT<T>::Var tokens, int heads,
                                             int key_dim, bool use_bias, bool training,
                                             ModelGraph* stats) {
    const auto& s = tape.val(tokens).shape;
    if (s.size() != 3) throw ShapeError("attention_block: tokens must be (N,L,D)");
    int64_t l = s[1];
    int64_t side = static_cast<int64_t>(std::llround(std::sqrt(static_cast<double>(l))));
    if (side * side != l) throw ShapeError("attention_block: token count must be a perfect square");
    auto xb = levit_detail::bn_tokens(tape, p, prefix + ".attn", tokens, training, stats);
    std::shared_ptr<const std::vector<int64_t>> bias_idx;
    if (use_bias) bias_idx = AttentionBiasTable::gather_indices_full(heads, side);
    auto att = levit_detail::mha(tape, p, prefix + ".attn", xb, xb, heads, key_dim, bias_idx, l, l);
    auto x = tape.add(tokens, att);
    return levit_detail::mlp_block(tape, p, prefix + ".mlp", x, training, stats);
}

// Down-sampling block: stride-2 subsampled queries attend over the full
// token grid; no residual on the attention path (width changes), then a
// residual MLP at the new width.
template <typename T>
typename TapeT<T>::Var levit_shrink_block(TapeT<T>& tape, ParamBinder<T>& p,
                                          const std::string& prefix,
                                          typename TapeT<T>::Var tokens, int heads, int key_dim,
                                          bool use_bias, bool training, ModelGraph* stats) {
    const auto& s = tape.val(tokens).shape;
    int64_t l = s[1];
    int64_t side = static_cast<int64_t>(std::llround(std::sqrt(static_cast<double>(l))));
    if (side * side != l) throw ShapeError("shrink_block: token count must be a perfect square");
    auto xb = levit_detail::bn_tokens(tape, p, prefix, tokens, training, stats);
    auto q_tokens = tape.index_tokens(xb, subsample_token_indices(side));
    int64_t lq = tape.val(q_tokens).dim(1);
    std::shared_ptr<const std::vector<int64_t>> bias_idx;
    if (use_bias) bias_idx = AttentionBiasTable::gather_indices_shrink(heads, side);
    auto att = levit_detail::mha(tape, p, prefix, q_tokens, xb, heads, key_dim, bias_idx, lq, l);
    return levit_detail::mlp_block(tape, p, prefix + ".mlp", att, training, stats);
}

template <typename T>
typename TapeT<T>::Var levit_forward_tape(TapeT<T>& tape, ParamBinder<T>& p,
                                          const LeViTConfig& cfg, typename TapeT<T>::Var input,
                                          bool training, ModelGraph* stats) {
    using Var = typename TapeT<T>::Var;
    Var x = input;
    for (size_t i = 0; i < cfg.stem_channels.size(); ++i) {
        std::string prefix = "stem" + std::to_string(i);
        x = tape.conv2d(x, p(prefix + ".conv.w"), p(prefix + ".conv.b"), 2, 1);
        Tensor* rm = stats ? &stats->buffer(prefix + ".bn.rm") : nullptr;
        Tensor* rv = stats ? &stats->buffer(prefix + ".bn.rv") : nullptr;
        x = tape.batchnorm2d(x, p(prefix + ".bn.gamma"), p(prefix + ".bn.beta"), rm, rv, training);
        x = tape.hardswish(x);
    }
    auto xs = tape.val(x).shape;  // (N, C, S, S); copied — later pushes may reallocate
    Var tokens = tape.reshape(tape.permute4(x, {0, 2, 3, 1}), {xs[0], xs[2] * xs[3], xs[1]});
    int stages = static_cast<int>(cfg.stage_dims.size());
    for (int st = 0; st < stages; ++st) {
        for (int d = 0; d < cfg.stage_depths[static_cast<size_t>(st)]; ++d) {
            std::string prefix = "stage" + std::to_string(st) + ".block" + std::to_string(d);
            tokens = levit_attention_block(tape, p, prefix, tokens,
                                           cfg.stage_heads[static_cast<size_t>(st)], cfg.key_dim,
                                           cfg.attn_bias, training, stats);
        }
        if (st + 1 < stages) {
            std::string prefix = "shrink" + std::to_string(st);
            tokens = levit_shrink_block(tape, p, prefix, tokens,
                                        cfg.stage_heads[static_cast<size_t>(st + 1)], cfg.key_dim,
                                        cfg.attn_bias, training, stats);
        }
    }
    Var pooled;
    if (cfg.learned_query_pool) {
        auto ts = tape.val(tokens).shape;  // copy
        int heads = cfg.stage_heads.back();
        Var query = tape.reshape(p("pool.query"), {1, 1, ts[2]});
        // broadcast the learned query across the batch via concat-free tiling
        if (ts[0] > 1) {
            std::vector<Var> copies(static_cast<size_t>(ts[0]), query);
            // stack along batch: reshape each to NCHW-ish and concat channels
            std::vector<Var> as_nchw;
            as_nchw.reserve(copies.size());
            for (Var c : copies) as_nchw.push_back(tape.reshape(c, {1, 1, 1, ts[2]}));
            query = tape.reshape(tape.concat_channels(as_nchw), {ts[0], 1, ts[2]});
        }
        auto att = levit_detail::mha(tape, p, "pool", query, tokens, heads, cfg.key_dim, nullptr,
                                     1, ts[1]);
        pooled = tape.reshape(att, {ts[0], ts[2]});
    } else {
        pooled = tape.mean_tokens(tokens);
    }
    auto ps = tape.val(pooled).shape;  // copy
    auto flat = tape.reshape(pooled, {ps[0], ps[1], 1, 1});
    Tensor* rm = stats ? &stats->buffer("head.bn.rm") : nullptr;
    Tensor* rv = stats ? &stats->buffer("head.bn.rv") : nullptr;
    auto normed = tape.batchnorm2d(flat, p("head.bn.gamma"), p("head.bn.beta"), rm, rv, training);
    auto flat2 = tape.reshape(normed, {ps[0], ps[1]});
    return tape.linear(flat2, p("head.fc.w"), p("head.fc.b"));
}

Tensor levit_forward(ModelGraph& model, const Tensor& batch, bool training);

}  // namespace lmc
