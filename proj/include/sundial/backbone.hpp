#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "sundial/instrumentation.hpp"
#include "sundial/model.hpp"
#include "sundial/tensor.hpp"
#include "sundial/tokenizer.hpp"

namespace sundial {

// [N, D] -> [H, N, d]
template <typename S>
TensorT<S> split_heads(const TensorT<S>& x, std::int64_t heads) {
    std::int64_t N = x.shape()[0], D = x.shape()[1];
    return permute(reshape(x, {N, heads, D / heads}), {1, 0, 2});
}

// [H, N, d] -> [N, D]
template <typename S>
TensorT<S> merge_heads(const TensorT<S>& x) {
    auto p = permute(x, {1, 0, 2});
    return reshape(p, {p.shape()[0], p.shape()[1] * p.shape()[2]});
}

// Raw (unscaled, unmasked) attention logits between rotated queries and keys.
// q: [H, Nq, d] at q_pos, k: [H, Nk, d] at k_pos. With rotation disabled the
// logits carry no positional information at all.
template <typename S>
TensorT<S> rope_scores(const TensorT<S>& q, const TensorT<S>& k,
                       const std::vector<std::int64_t>& q_pos,
                       const std::vector<std::int64_t>& k_pos, const ModelConfig& cfg) {
    auto qr = cfg.rope_enabled ? rope_apply(q, q_pos, cfg.rope_theta) : q;
    auto kr = cfg.rope_enabled ? rope_apply(k, k_pos, cfg.rope_theta) : k;
    return matmul(qr, transpose_last(kr));
}

namespace detail {

// Streaming-softmax attention over key blocks: numerically equivalent to the
// naive path up to accumulation order. Forward-only; used at inference when
// cfg.blocked_attention is set.
template <typename S>
TensorT<S> blocked_attention_ctx(const TensorT<S>& q, const TensorT<S>& k, const TensorT<S>& v,
                                 std::int64_t block) {
    std::int64_t H = q.shape()[0], N = q.shape()[1], d = q.shape()[2];
    std::vector<S> out(static_cast<std::size_t>(H * N * d), S(0));
    const auto& qd = q.data();
    const auto& kd = k.data();
    const auto& vd = v.data();
    double scale = 1.0 / std::sqrt(static_cast<double>(d));
    std::uint64_t mults = 0;
    std::vector<double> acc(static_cast<std::size_t>(d));
    for (std::int64_t h = 0; h < H; ++h)
        for (std::int64_t i = 0; i < N; ++i) {
            const S* qrow = qd.data() + (h * N + i) * d;
            double run_max = -1e300, run_denom = 0.0;
            std::fill(acc.begin(), acc.end(), 0.0);
            for (std::int64_t b0 = 0; b0 <= i; b0 += block) {
                std::int64_t b1 = std::min(b0 + block, i + 1);
                double blk_max = -1e300;
                std::vector<double> logits(static_cast<std::size_t>(b1 - b0));
                for (std::int64_t j = b0; j < b1; ++j) {
                    const S* krow = kd.data() + (h * N + j) * d;
                    double dot = 0.0;
                    for (std::int64_t c = 0; c < d; ++c)
                        dot += static_cast<double>(qrow[c]) * static_cast<double>(krow[c]);
                    mults += static_cast<std::uint64_t>(d);
                    logits[static_cast<std::size_t>(j - b0)] = dot * scale;
                    blk_max = std::max(blk_max, dot * scale);
                }
                double new_max = std::max(run_max, blk_max);
                double rescale = run_denom > 0.0 ? std::exp(run_max - new_max) : 0.0;
                run_denom *= rescale;
                for (auto& a : acc) a *= rescale;
                for (std::int64_t j = b0; j < b1; ++j) {
                    double w = std::exp(logits[static_cast<std::size_t>(j - b0)] - new_max);
                    run_denom += w;
                    const S* vrow = vd.data() + (h * N + j) * d;
                    for (std::int64_t c = 0; c < d; ++c) acc[static_cast<std::size_t>(c)] += w * static_cast<double>(vrow[c]);
                    mults += static_cast<std::uint64_t>(d);
                }
                run_max = new_max;
            }
            S* orow = out.data() + (h * N + i) * d;
            for (std::int64_t c = 0; c < d; ++c)
                orow[c] = static_cast<S>(acc[static_cast<std::size_t>(c)] / run_denom);
        }
    add_multiplies(mults);
    return TensorT<S>::from_data({H, N, d}, std::move(out));
}

}  // namespace detail

// Causal multi-head self-attention for a full context of N tokens at the
// given absolute positions. x: [N, D] -> [N, D].
template <typename S>
TensorT<S> attention_layer(const TensorT<S>& x, const AttentionT<S>& attn, const ModelConfig& cfg,
                           const std::vector<std::int64_t>& positions) {
    std::int64_t H = cfg.heads, d = cfg.head_dim();
    auto q = split_heads(linear(x, attn.wq), H);
    auto k = split_heads(linear(x, attn.wk), H);
    auto v = split_heads(linear(x, attn.wv), H);
    TensorT<S> ctx;
    if (cfg.blocked_attention && !grad_enabled()) {
        auto qr = cfg.rope_enabled ? rope_apply(q, positions, cfg.rope_theta) : q;
        auto kr = cfg.rope_enabled ? rope_apply(k, positions, cfg.rope_theta) : k;
        ctx = detail::blocked_attention_ctx(qr, kr, v, 16);
    } else {
        auto logits = rope_scores(q, k, positions, positions, cfg);
        auto probs = causal_softmax(mul_scalar(logits, 1.0 / std::sqrt(static_cast<double>(d))));
        ctx = matmul(probs, v);
    }
    return linear(merge_heads(ctx), attn.wo);
}

template <typename S>
TensorT<S> ffn_forward(const TensorT<S>& x, const BlockT<S>& blk) {
    return linear(gelu(linear(x, blk.fc1)), blk.fc2);
}

template <typename S>
TensorT<S> block_forward(const TensorT<S>& x_in, const BlockT<S>& blk, const ModelConfig& cfg,
                         const std::vector<std::int64_t>& positions) {
    if (cfg.pre_ln) {
        auto x = add(x_in, attention_layer(apply_norm(x_in, blk.ln1), blk.attn, cfg, positions));
        return add(x, ffn_forward(apply_norm(x, blk.ln2), blk));
    }
    auto x = apply_norm(add(x_in, attention_layer(x_in, blk.attn, cfg, positions)), blk.ln1);
    return apply_norm(add(x, ffn_forward(x, blk)), blk.ln2);
}

// Full forward over an embedded token sequence. tokens: [N, D] -> [N, D].
template <typename S>
TensorT<S> backbone_forward(const SundialModelT<S>& m, const TensorT<S>& tokens,
                            const std::vector<std::int64_t>& positions) {
    if (tokens.rank() != 2 || tokens.shape()[1] != m.cfg.dim)
        throw ShapeError("backbone_forward: expected [N, dim], got " + shape_str(tokens.shape()));
    std::int64_t N = tokens.shape()[0];
    if (N > m.cfg.max_tokens())
        throw ContractError("backbone_forward: " + std::to_string(N) + " tokens exceed capacity " +
                            std::to_string(m.cfg.max_tokens()));
    if (static_cast<std::int64_t>(positions.size()) != N)
        throw ContractError("backbone_forward: positions size mismatch");
    auto x = tokens;
    for (const auto& blk : m.blocks) x = block_forward(x, blk, m.cfg, positions);
    x = apply_norm(x, m.final_ln);
    add_backbone_forward();
    return x;
}

// Tokenize-embed-transform for one context window; rows are per-token
// representations. patches/mask: [N, P].
template <typename S>
TensorT<S> encode(const SundialModelT<S>& m, const TensorT<S>& patches, const TensorT<S>& mask) {
    auto tokens = embed_patches(patches, mask, m.embed);
    std::vector<std::int64_t> positions(static_cast<std::size_t>(tokens.shape()[0]));
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<std::int64_t>(i);
    return backbone_forward(m, tokens, positions);
}

inline Tensor encode_sample(const SundialModel& m, const SeriesSample& sample) {
    return encode(m, sample.patches, sample.mask);
}

// ---- incremental decoding ----

// Per-layer key/value store in token-major layout [len][H][d], holding
// post-rotation keys. Evicts the oldest token at capacity; absolute
// positions keep increasing so rotations stay consistent across eviction.
struct KVCache {
    struct LayerKV {
        std::vector<float> k, v;
        std::int64_t len = 0;
    };
    std::int64_t capacity = 0;
    std::int64_t next_position = 0;
    std::vector<LayerKV> layers;
};

inline KVCache make_kv_cache(const ModelConfig& cfg) {
    KVCache c;
    c.capacity = cfg.max_tokens();
    c.layers.resize(static_cast<std::size_t>(cfg.layers));
    return c;
}

namespace detail {

// Gathers the token-major cache into [H, len, d].
inline Tensor cache_tensor(const std::vector<float>& store, std::int64_t len, std::int64_t H,
                           std::int64_t d) {
    std::vector<float> out(static_cast<std::size_t>(H * len * d));
    for (std::int64_t t = 0; t < len; ++t)
        for (std::int64_t h = 0; h < H; ++h)
            std::copy(store.begin() + (t * H + h) * d, store.begin() + (t * H + h) * d + d,
                      out.begin() + (h * len + t) * d);
    return Tensor::from_data({H, len, d}, std::move(out));
}

inline Tensor incremental_attention(const Tensor& x, const AttentionT<float>& attn,
                                    const ModelConfig& cfg, KVCache::LayerKV& kv,
                                    std::int64_t capacity, std::int64_t position) {
    std::int64_t H = cfg.heads, d = cfg.head_dim();
    auto q = split_heads(linear(x, attn.wq), H);
    auto k = split_heads(linear(x, attn.wk), H);
    auto v = split_heads(linear(x, attn.wv), H);
    std::vector<std::int64_t> pos = {position};
    if (cfg.rope_enabled) {
        q = rope_apply(q, pos, cfg.rope_theta);
        k = rope_apply(k, pos, cfg.rope_theta);
    }
    if (kv.len == capacity) {
        kv.k.erase(kv.k.begin(), kv.k.begin() + H * d);
        kv.v.erase(kv.v.begin(), kv.v.begin() + H * d);
        --kv.len;
    }
    // [H, 1, d] is already h-major, matching one token-major entry
    kv.k.insert(kv.k.end(), k.data().begin(), k.data().end());
    kv.v.insert(kv.v.end(), v.data().begin(), v.data().end());
    ++kv.len;

    auto K = cache_tensor(kv.k, kv.len, H, d);
    auto V = cache_tensor(kv.v, kv.len, H, d);
    auto logits = matmul(q, transpose_last(K));  // [H, 1, len]
    auto probs = softmax_last(mul_scalar(logits, 1.0 / std::sqrt(static_cast<double>(d))));
    auto ctx = matmul(probs, V);  // [H, 1, d]
    return linear(merge_heads(ctx), attn.wo);
}

}  // namespace detail

// Feeds one new token (patch_row/mask_row: [1, P]) through the model using
// the cache; returns that token's final representation [1, D]. Tokens must
// arrive in order; the cache tracks the absolute position itself.
inline Tensor forward_incremental(const SundialModel& m, const Tensor& patch_row,
                                  const Tensor& mask_row, KVCache& cache) {
    if (cache.layers.size() != m.blocks.size())
        throw StateError("forward_incremental: cache built for a different layer count");
    if (patch_row.rank() != 2 || patch_row.shape()[0] != 1 ||
        patch_row.shape()[1] != m.cfg.patch_len)
        throw ShapeError("forward_incremental: expected [1, patch_len] patch row");
    NoGradGuard guard;
    auto x = embed_patches(patch_row, mask_row, m.embed);
    std::int64_t position = cache.next_position++;
    for (std::size_t l = 0; l < m.blocks.size(); ++l) {
        const auto& blk = m.blocks[l];
        auto& kv = cache.layers[l];
        if (m.cfg.pre_ln) {
            x = add(x, detail::incremental_attention(apply_norm(x, blk.ln1), blk.attn, m.cfg, kv,
                                                     cache.capacity, position));
            x = add(x, ffn_forward(apply_norm(x, blk.ln2), blk));
        } else {
            x = apply_norm(add(x, detail::incremental_attention(x, blk.attn, m.cfg, kv,
                                                                cache.capacity, position)),
                           blk.ln1);
            x = apply_norm(add(x, ffn_forward(x, blk)), blk.ln2);
        }
    }
    return apply_norm(x, m.final_ln);
}

}  // namespace sundial
