#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "sundial/config.hpp"
#include "sundial/layers.hpp"
#include "sundial/tokenizer.hpp"

namespace sundial {

// Width of the raw sinusoidal time-feature vector fed to the flow head.
inline constexpr std::int64_t kTimeFeatureDim = 64;
inline constexpr double kTimeFeatureScale = 1000.0;
inline constexpr double kTimeFeatureMaxPeriod = 10000.0;

template <typename S>
struct AttentionT {
    LinearT<S> wq, wk, wv, wo;
};

template <typename S>
struct BlockT {
    LayerNormT<S> ln1, ln2;
    AttentionT<S> attn;
    LinearT<S> fc1, fc2;  // position-wise FFN with gelu between
};

// One adaptive-norm residual block of the flow head. The norm is non-affine;
// scale/shift/gate come from the conditioning path and start at zero so the
// block is the identity at init.
template <typename S>
struct FlowBlockT {
    LinearT<S> mod_shift, mod_scale, mod_gate;  // [D_tf, D_tf] each
    LinearT<S> fc1, fc2;                        // [D_tf, 4*D_tf], [4*D_tf, D_tf]
};

template <typename S>
struct FlowNetT {
    LinearT<S> time_fc1, time_fc2;  // [64, D_tf], [D_tf, D_tf]
    LinearT<S> in_proj;             // [F, D_tf]
    LinearT<S> cond_in;             // [D, D_tf]
    std::vector<FlowBlockT<S>> blocks;
    LinearT<S> out_proj;  // [D_tf, F]
};

template <typename S>
struct MseHeadT {
    LinearT<S> fc1, fc2;  // [D, D_tf], [D_tf, F]
};

template <typename S>
struct SundialModelT {
    ModelConfig cfg;
    HeadKind head = HeadKind::timeflow;
    PatchEmbedT<S> embed;
    std::vector<BlockT<S>> blocks;
    LayerNormT<S> final_ln;
    FlowNetT<S> flow;     // timeflow and diffusion heads
    MseHeadT<S> mse;      // mse head
};

using SundialModel = SundialModelT<float>;

struct ParamSpec {
    std::string name;
    Shape shape;
};

// Canonical parameter list for a config/head pair, in the exact order the
// model stores and serializes them. Pure shape arithmetic; never allocates
// model-sized buffers.
std::vector<ParamSpec> param_specs(const ModelConfig& cfg, HeadKind head);

std::int64_t param_count(const ModelConfig& cfg, HeadKind head);

// ---- parameter traversal ----

// Visits every trainable tensor in spec order as (name, tensor&).
template <typename S, typename Fn>
void visit_params(SundialModelT<S>& m, Fn&& fn) {
    auto vis_linear = [&](const std::string& prefix, LinearT<S>& l) {
        fn(prefix + ".w", l.w);
        fn(prefix + ".b", l.b);
    };
    auto vis_norm = [&](const std::string& prefix, LayerNormT<S>& n) {
        fn(prefix + ".gamma", n.gamma);
        fn(prefix + ".beta", n.beta);
    };
    vis_linear("embed.fc1", m.embed.fc1);
    vis_linear("embed.fc2", m.embed.fc2);
    for (std::size_t i = 0; i < m.blocks.size(); ++i) {
        std::string p = "blocks." + std::to_string(i);
        auto& blk = m.blocks[i];
        vis_norm(p + ".ln1", blk.ln1);
        vis_linear(p + ".attn.wq", blk.attn.wq);
        vis_linear(p + ".attn.wk", blk.attn.wk);
        vis_linear(p + ".attn.wv", blk.attn.wv);
        vis_linear(p + ".attn.wo", blk.attn.wo);
        vis_norm(p + ".ln2", blk.ln2);
        vis_linear(p + ".ffn.fc1", blk.fc1);
        vis_linear(p + ".ffn.fc2", blk.fc2);
    }
    vis_norm("final_ln", m.final_ln);
    if (m.head == HeadKind::timeflow || m.head == HeadKind::diffusion) {
        vis_linear("flow.time_fc1", m.flow.time_fc1);
        vis_linear("flow.time_fc2", m.flow.time_fc2);
        vis_linear("flow.in_proj", m.flow.in_proj);
        vis_linear("flow.cond_in", m.flow.cond_in);
        for (std::size_t i = 0; i < m.flow.blocks.size(); ++i) {
            std::string p = "flow.blocks." + std::to_string(i);
            auto& blk = m.flow.blocks[i];
            vis_linear(p + ".mod_shift", blk.mod_shift);
            vis_linear(p + ".mod_scale", blk.mod_scale);
            vis_linear(p + ".mod_gate", blk.mod_gate);
            vis_linear(p + ".fc1", blk.fc1);
            vis_linear(p + ".fc2", blk.fc2);
        }
        vis_linear("flow.out_proj", m.flow.out_proj);
    } else {
        vis_linear("mse.fc1", m.mse.fc1);
        vis_linear("mse.fc2", m.mse.fc2);
    }
}

template <typename S>
std::vector<std::pair<std::string, TensorT<S>*>> named_params(SundialModelT<S>& m) {
    std::vector<std::pair<std::string, TensorT<S>*>> out;
    visit_params(m, [&](const std::string& name, TensorT<S>& t) { out.emplace_back(name, &t); });
    return out;
}

// ---- construction ----

namespace detail {

template <typename S>
LinearT<S> make_linear(std::int64_t in, std::int64_t out, Rng& rng, double stddev = 0.02) {
    LinearT<S> l;
    l.w = TensorT<S>::zeros({in, out});
    auto& wd = l.w.mutable_data();
    for (auto& v : wd) v = static_cast<S>(trunc_normal_draw(rng, stddev));
    l.b = TensorT<S>::zeros({out});
    return l;
}

template <typename S>
LinearT<S> make_zero_linear(std::int64_t in, std::int64_t out) {
    LinearT<S> l;
    l.w = TensorT<S>::zeros({in, out});
    l.b = TensorT<S>::zeros({out});
    return l;
}

template <typename S>
LayerNormT<S> make_norm(std::int64_t dim, double eps) {
    LayerNormT<S> n;
    n.gamma = TensorT<S>::full({dim}, S(1));
    n.beta = TensorT<S>::zeros({dim});
    n.eps = eps;
    return n;
}

}  // namespace detail

// Builds and initializes a model. Each parameter draws from its own split
// stream, so the result depends only on (cfg, head, seed).
template <typename S = float>
SundialModelT<S> init_model(const ModelConfig& cfg, HeadKind head, std::uint64_t seed) {
    cfg.validate();
    SundialModelT<S> m;
    m.cfg = cfg;
    m.head = head;
    Rng root(seed);
    std::uint64_t stream = 0;
    auto next_rng = [&]() { return root.split(stream++); };

    const std::int64_t P = cfg.patch_len, D = cfg.dim, F = cfg.horizon, Dtf = cfg.tf_dim;

    {
        Rng r = next_rng();
        m.embed.fc1 = detail::make_linear<S>(2 * P, D, r);
    }
    {
        Rng r = next_rng();
        m.embed.fc2 = detail::make_linear<S>(D, D, r);
    }
    m.blocks.resize(static_cast<std::size_t>(cfg.layers));
    for (auto& blk : m.blocks) {
        blk.ln1 = detail::make_norm<S>(D, cfg.norm_eps);
        blk.ln2 = detail::make_norm<S>(D, cfg.norm_eps);
        for (LinearT<S>* l : {&blk.attn.wq, &blk.attn.wk, &blk.attn.wv, &blk.attn.wo}) {
            Rng r = next_rng();
            *l = detail::make_linear<S>(D, D, r);
        }
        {
            Rng r = next_rng();
            blk.fc1 = detail::make_linear<S>(D, cfg.ffn_dim, r);
        }
        {
            Rng r = next_rng();
            blk.fc2 = detail::make_linear<S>(cfg.ffn_dim, D, r);
        }
    }
    m.final_ln = detail::make_norm<S>(D, cfg.norm_eps);

    if (head == HeadKind::timeflow || head == HeadKind::diffusion) {
        {
            Rng r = next_rng();
            m.flow.time_fc1 = detail::make_linear<S>(kTimeFeatureDim, Dtf, r);
        }
        {
            Rng r = next_rng();
            m.flow.time_fc2 = detail::make_linear<S>(Dtf, Dtf, r);
        }
        {
            Rng r = next_rng();
            m.flow.in_proj = detail::make_linear<S>(F, Dtf, r);
        }
        {
            Rng r = next_rng();
            m.flow.cond_in = detail::make_linear<S>(D, Dtf, r);
        }
        m.flow.blocks.resize(static_cast<std::size_t>(cfg.tf_layers));
        for (auto& blk : m.flow.blocks) {
            blk.mod_shift = detail::make_zero_linear<S>(Dtf, Dtf);
            blk.mod_scale = detail::make_zero_linear<S>(Dtf, Dtf);
            blk.mod_gate = detail::make_zero_linear<S>(Dtf, Dtf);
            {
                Rng r = next_rng();
                blk.fc1 = detail::make_linear<S>(Dtf, 4 * Dtf, r);
            }
            {
                Rng r = next_rng();
                blk.fc2 = detail::make_linear<S>(4 * Dtf, Dtf, r);
            }
        }
        {
            Rng r = next_rng();
            m.flow.out_proj = detail::make_linear<S>(Dtf, F, r);
        }
    } else {
        {
            Rng r = next_rng();
            m.mse.fc1 = detail::make_linear<S>(D, Dtf, r);
        }
        {
            Rng r = next_rng();
            m.mse.fc2 = detail::make_linear<S>(Dtf, F, r);
        }
    }

    visit_params(m, [](const std::string&, TensorT<S>& t) { t.set_requires_grad(true); });
    return m;
}

// Exact-copy conversion between scalar types (f32 -> f64 is lossless).
template <typename T, typename S>
SundialModelT<T> convert_model(SundialModelT<S>& src) {
    SundialModelT<T> dst = init_model<T>(src.cfg, src.head, 0);
    auto sp = named_params(src);
    auto dp = named_params(dst);
    if (sp.size() != dp.size()) throw StateError("convert_model: parameter lists diverge");
    for (std::size_t i = 0; i < sp.size(); ++i) {
        auto converted = sp[i].second->template astype<T>();
        dp[i].second->mutable_data() = converted.data();
    }
    return dst;
}

}  // namespace sundial
