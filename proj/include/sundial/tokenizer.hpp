#pragma once

#include <cstdint>
#include <vector>

#include "sundial/config.hpp"
#include "sundial/error.hpp"
#include "sundial/layers.hpp"
#include "sundial/tensor.hpp"

namespace sundial {

// Instance normalization statistics of one context window.
struct NormStats {
    double mean = 0.0;
    double std = 1.0;  // population std, clamped from below
};

inline NormStats compute_stats(const std::vector<double>& values, double eps = 1e-5) {
    if (values.empty()) throw DataError("compute_stats: empty series");
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    double var = 0.0;
    for (double v : values) var += (v - mean) * (v - mean);
    var /= static_cast<double>(values.size());
    NormStats s;
    s.mean = mean;
    s.std = std::max(std::sqrt(var), eps);
    return s;
}

inline std::vector<double> normalize(const std::vector<double>& values, const NormStats& stats) {
    std::vector<double> out(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) out[i] = (values[i] - stats.mean) / stats.std;
    return out;
}

inline std::vector<double> denormalize(const std::vector<double>& values, const NormStats& stats) {
    std::vector<double> out(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) out[i] = values[i] * stats.std + stats.mean;
    return out;
}

// One tokenized context window.
struct SeriesSample {
    std::vector<double> values;  // raw context, as given
    NormStats stats;
    Tensor patches;  // [N, P], normalized, left-padded with zeros
    Tensor mask;     // [N, P], 1 = observed, 0 = pad
    std::vector<float> grid;  // the padded normalized values, length N*P
    std::int64_t n_tokens = 0;
};

// As patchify below, but normalizes with caller-provided statistics instead of
// recomputing them from the full context. Training uses this to normalize each
// window with statistics that exclude the final targets, matching how inference
// only ever sees statistics of observed history.
inline SeriesSample patchify_with_stats(const std::vector<double>& context, const NormStats& stats,
                                        const ModelConfig& cfg) {
    std::int64_t T = static_cast<std::int64_t>(context.size());
    if (T == 0) throw DataError("patchify: empty context");
    if (T > cfg.max_context)
        throw ContractError("patchify: context length " + std::to_string(T) +
                            " exceeds max_context " + std::to_string(cfg.max_context));
    const std::int64_t P = cfg.patch_len;
    const std::int64_t N = (T + P - 1) / P;
    const std::int64_t pad = N * P - T;

    SeriesSample s;
    s.values = context;
    s.stats = stats;
    s.n_tokens = N;

    auto norm = normalize(context, s.stats);
    std::vector<float> grid(static_cast<std::size_t>(N * P), 0.0f);
    std::vector<float> mask(static_cast<std::size_t>(N * P), 0.0f);
    for (std::int64_t i = 0; i < T; ++i) {
        grid[static_cast<std::size_t>(pad + i)] = static_cast<float>(norm[static_cast<std::size_t>(i)]);
        mask[static_cast<std::size_t>(pad + i)] = 1.0f;
    }
    s.grid = grid;
    s.patches = Tensor::from_data({N, P}, std::move(grid));
    s.mask = Tensor::from_data({N, P}, std::move(mask));
    return s;
}

// Normalizes a context and cuts it into left-padded patches of cfg.patch_len.
inline SeriesSample patchify(const std::vector<double>& context, const ModelConfig& cfg) {
    if (context.empty()) throw DataError("patchify: empty context");
    return patchify_with_stats(context, compute_stats(context), cfg);
}

// Shared two-layer MLP mapping (patch values ++ mask) to token embeddings.
template <typename S>
struct PatchEmbedT {
    LinearT<S> fc1;  // [2P, D]
    LinearT<S> fc2;  // [D, D]
};

// patches/mask: [N, P] -> [N, D]. The mask channel rides along the values so
// padded positions are distinguishable from observed zeros.
template <typename S>
TensorT<S> embed_patches(const TensorT<S>& patches, const TensorT<S>& mask,
                         const PatchEmbedT<S>& pe) {
    if (patches.rank() != 2 || mask.shape() != patches.shape())
        throw ShapeError("embed_patches: expected matching [N, P] patches and mask, got " +
                         shape_str(patches.shape()) + " and " + shape_str(mask.shape()));
    std::int64_t N = patches.shape()[0], P = patches.shape()[1];
    std::vector<S> packed(static_cast<std::size_t>(N * 2 * P));
    const auto& pd = patches.data();
    const auto& md = mask.data();
    for (std::int64_t i = 0; i < N; ++i) {
        std::copy(pd.begin() + i * P, pd.begin() + (i + 1) * P, packed.begin() + i * 2 * P);
        std::copy(md.begin() + i * P, md.begin() + (i + 1) * P, packed.begin() + i * 2 * P + P);
    }
    auto x = TensorT<S>::from_data({N, 2 * P}, std::move(packed));
    return linear(gelu(linear(x, pe.fc1)), pe.fc2);
}

}  // namespace sundial
