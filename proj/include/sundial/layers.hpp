#pragma once

#include "sundial/config.hpp"
#include "sundial/tensor.hpp"

namespace sundial {

template <typename S>
struct LinearT {
    TensorT<S> w;  // [in, out]
    TensorT<S> b;  // [out]
};

template <typename S>
TensorT<S> linear(const TensorT<S>& x, const LinearT<S>& l) {
    return add(matmul(x, l.w), l.b);
}

template <typename S>
struct LayerNormT {
    TensorT<S> gamma, beta;
    double eps = 1e-5;
};

template <typename S>
TensorT<S> apply_norm(const TensorT<S>& x, const LayerNormT<S>& n) {
    return layer_norm(x, n.gamma, n.beta, n.eps);
}

// Truncated normal (cut at +-2 sigma), the weight init for all projections.
inline double trunc_normal_draw(Rng& rng, double stddev) {
    double z = rng.normal();
    while (z < -2.0 || z > 2.0) z = rng.normal();
    return z * stddev;
}

}  // namespace sundial
