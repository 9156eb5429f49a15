#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "sundial/model.hpp"
#include "sundial/tensor.hpp"

namespace sundial {

// ---- time conditioning ----

// Sinusoidal features of t*1000 with geometric periods up to 10000.
// t entries are diffusion-time values; flow matching uses t in [0, 1].
template <typename S>
TensorT<S> time_features(const std::vector<double>& t) {
    const std::int64_t M = static_cast<std::int64_t>(t.size());
    const std::int64_t half = kTimeFeatureDim / 2;
    std::vector<S> data(static_cast<std::size_t>(M * kTimeFeatureDim));
    for (std::int64_t i = 0; i < M; ++i) {
        double scaled = t[static_cast<std::size_t>(i)] * kTimeFeatureScale;
        for (std::int64_t j = 0; j < half; ++j) {
            double freq = std::exp(-std::log(kTimeFeatureMaxPeriod) * static_cast<double>(j) /
                                   static_cast<double>(half));
            double arg = scaled * freq;
            data[i * kTimeFeatureDim + j] = static_cast<S>(std::cos(arg));
            data[i * kTimeFeatureDim + half + j] = static_cast<S>(std::sin(arg));
        }
    }
    return TensorT<S>::from_data({M, kTimeFeatureDim}, std::move(data));
}

template <typename S>
TensorT<S> time_embed(const FlowNetT<S>& net, const std::vector<double>& t) {
    return linear(silu(linear(time_features<S>(t), net.time_fc1)), net.time_fc2);
}

// ---- flow network ----

// Velocity (or noise) prediction network. y_t: [M, F], t: length M,
// h: [M, D] conditioning rows. Returns [M, F].
//
// With freshly initialized modulation layers every residual block is the
// identity, so the output reduces to out_proj(in_proj(y_t) + time_embed(t)).
template <typename S>
TensorT<S> flow_forward(const FlowNetT<S>& net, const TensorT<S>& y_t,
                        const std::vector<double>& t, const TensorT<S>& h,
                        double norm_eps = 1e-5) {
    if (y_t.rank() != 2 || h.rank() != 2 || y_t.shape()[0] != h.shape()[0])
        throw ShapeError("flow_forward: y_t " + shape_str(y_t.shape()) + " and h " +
                         shape_str(h.shape()) + " must share rows");
    if (static_cast<std::int64_t>(t.size()) != y_t.shape()[0])
        throw ShapeError("flow_forward: t has " + std::to_string(t.size()) + " entries for " +
                         std::to_string(y_t.shape()[0]) + " rows");
    auto temb = time_embed(net, t);
    auto z = add(linear(y_t, net.in_proj), temb);
    auto c = add(linear(h, net.cond_in), temb);
    for (const auto& blk : net.blocks) {
        auto cm = silu(c);
        auto shift = linear(cm, blk.mod_shift);
        auto scale = linear(cm, blk.mod_scale);
        auto gate = linear(cm, blk.mod_gate);
        auto zh = layer_norm_noaffine(z, norm_eps);
        auto zm = add(mul(zh, add_scalar(scale, 1.0)), shift);
        auto u = linear(gelu(linear(zm, blk.fc1)), blk.fc2);
        z = add(z, mul(gate, u));
    }
    return linear(z, net.out_proj);
}

// ---- flow matching objective ----

// Straight-line path t*y1 + (1-t)*y0, one t per row.
template <typename S>
TensorT<S> interpolate(const TensorT<S>& y0, const TensorT<S>& y1, const std::vector<double>& t) {
    if (y0.shape() != y1.shape() || y0.rank() != 2)
        throw ShapeError("interpolate: endpoints must be matching [M, F] tensors");
    if (static_cast<std::int64_t>(t.size()) != y0.shape()[0])
        throw ShapeError("interpolate: t length mismatch");
    std::vector<S> tc(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (!(t[i] >= 0.0 && t[i] <= 1.0))
            throw ContractError("interpolate: t must lie in [0, 1]");
        tc[i] = static_cast<S>(t[i]);
    }
    auto t_col = TensorT<S>::from_data({static_cast<std::int64_t>(t.size()), 1}, std::move(tc));
    auto one_minus = add_scalar(neg(t_col), 1.0);
    return add(mul(y1, t_col), mul(y0, one_minus));
}

// Frozen randomness for one objective evaluation: per-row path time and
// noise endpoint. Row i draws from base.split(i), so the set of draws does
// not depend on evaluation order.
struct FlowDraws {
    std::vector<double> t;  // length M
    Tensor y0;              // [M, F]
};

inline FlowDraws draw_flow(const Rng& base, std::int64_t rows, std::int64_t horizon) {
    FlowDraws d;
    d.t.resize(static_cast<std::size_t>(rows));
    std::vector<float> noise(static_cast<std::size_t>(rows * horizon));
    for (std::int64_t i = 0; i < rows; ++i) {
        Rng r = base.split(static_cast<std::uint64_t>(i));
        d.t[static_cast<std::size_t>(i)] = r.uniform();
        for (std::int64_t j = 0; j < horizon; ++j)
            noise[static_cast<std::size_t>(i * horizon + j)] = static_cast<float>(r.normal());
    }
    d.y0 = Tensor::from_data({rows, horizon}, std::move(noise));
    return d;
}

// Conditional flow-matching loss: mean over rows of the squared error
// between the predicted velocity at y_t and the path velocity y1 - y0,
// summed over the horizon.
template <typename S>
TensorT<S> timeflow_loss(const FlowNetT<S>& net, const TensorT<S>& h, const TensorT<S>& y1,
                         const std::vector<double>& t, const TensorT<S>& y0,
                         double norm_eps = 1e-5) {
    auto y_t = interpolate(y0, y1, t);
    auto pred = flow_forward(net, y_t, t, h, norm_eps);
    auto d = sub(pred, sub(y1, y0));
    return mean_all(sum_last(mul(d, d)));
}

// ---- push-forward sampling ----

// Euler integration of the learned velocity field from noise to data.
// h: [R, D] conditioning rows; returns [R, F]. Row r's noise comes from
// rng.split(row_offset + r), so sampling one row alone (with its offset)
// reproduces that row of the batched call bit for bit.
inline Tensor flow_sample(const FlowNetT<float>& net, const Tensor& h, std::int64_t horizon,
                          std::int64_t steps, const Rng& rng, double norm_eps = 1e-5,
                          std::int64_t row_offset = 0) {
    if (steps < 1) throw ContractError("flow_sample: steps must be >= 1");
    NoGradGuard guard;
    std::int64_t rows = h.shape()[0];
    std::vector<float> init(static_cast<std::size_t>(rows * horizon));
    for (std::int64_t r = 0; r < rows; ++r) {
        Rng rr = rng.split(static_cast<std::uint64_t>(row_offset + r));
        for (std::int64_t j = 0; j < horizon; ++j)
            init[static_cast<std::size_t>(r * horizon + j)] = static_cast<float>(rr.normal());
    }
    auto y = Tensor::from_data({rows, horizon}, std::move(init));
    const double dt = 1.0 / static_cast<double>(steps);
    for (std::int64_t k = 0; k < steps; ++k) {
        std::vector<double> t(static_cast<std::size_t>(rows),
                              static_cast<double>(k) / static_cast<double>(steps));
        auto v = flow_forward(net, y, t, h, norm_eps);
        y = add(y, mul_scalar(v, dt));
    }
    return y;
}

// ---- mse objective ----

template <typename S>
TensorT<S> mse_forward(const MseHeadT<S>& head, const TensorT<S>& h) {
    return linear(gelu(linear(h, head.fc1)), head.fc2);
}

template <typename S>
TensorT<S> mse_loss(const MseHeadT<S>& head, const TensorT<S>& h, const TensorT<S>& y1) {
    auto d = sub(mse_forward(head, h), y1);
    return mean_all(sum_last(mul(d, d)));
}

// ---- diffusion objective ----

inline constexpr std::int64_t kDiffusionTrainSteps = 1000;

// Cosine noise schedule; betas derived from the cumulative curve and
// clipped, then alpha_bar rebuilt so the two stay consistent.
struct DiffusionSchedule {
    std::vector<double> alpha_bar;  // length kDiffusionTrainSteps
};

inline DiffusionSchedule cosine_schedule(std::int64_t steps = kDiffusionTrainSteps) {
    auto f = [](double u) {
        double c = std::cos((u + 0.008) / 1.008 * 1.5707963267948966);
        return c * c;
    };
    DiffusionSchedule s;
    s.alpha_bar.resize(static_cast<std::size_t>(steps));
    double f0 = f(0.0);
    double prev = 1.0;
    double acc = 1.0;
    for (std::int64_t i = 0; i < steps; ++i) {
        double cur = f(static_cast<double>(i + 1) / static_cast<double>(steps)) / f0;
        double beta = std::min(1.0 - cur / prev, 0.999);
        acc *= 1.0 - beta;
        s.alpha_bar[static_cast<std::size_t>(i)] = acc;
        prev = cur;
    }
    return s;
}

struct DiffusionDraws {
    std::vector<std::int64_t> step;  // length M, each in [0, train_steps)
    Tensor noise;                    // [M, F]
};

inline DiffusionDraws draw_diffusion(const Rng& base, std::int64_t rows, std::int64_t horizon) {
    DiffusionDraws d;
    d.step.resize(static_cast<std::size_t>(rows));
    std::vector<float> noise(static_cast<std::size_t>(rows * horizon));
    for (std::int64_t i = 0; i < rows; ++i) {
        Rng r = base.split(static_cast<std::uint64_t>(i));
        d.step[static_cast<std::size_t>(i)] = r.uniform_int(0, kDiffusionTrainSteps - 1);
        for (std::int64_t j = 0; j < horizon; ++j)
            noise[static_cast<std::size_t>(i * horizon + j)] = static_cast<float>(r.normal());
    }
    d.noise = Tensor::from_data({rows, horizon}, std::move(noise));
    return d;
}

// Noise-prediction loss on the cosine schedule; the flow net doubles as the
// denoiser with t = step / train_steps.
template <typename S>
TensorT<S> diffusion_loss(const FlowNetT<S>& net, const DiffusionSchedule& sched,
                          const TensorT<S>& h, const TensorT<S>& y1,
                          const std::vector<std::int64_t>& step, const TensorT<S>& noise,
                          double norm_eps = 1e-5) {
    std::int64_t rows = y1.shape()[0], F = y1.shape()[1];
    std::vector<S> ys(static_cast<std::size_t>(rows * F));
    std::vector<double> t(static_cast<std::size_t>(rows));
    const auto& yd = y1.data();
    const auto& nd = noise.data();
    for (std::int64_t i = 0; i < rows; ++i) {
        double ab = sched.alpha_bar[static_cast<std::size_t>(step[static_cast<std::size_t>(i)])];
        double sa = std::sqrt(ab), sn = std::sqrt(1.0 - ab);
        for (std::int64_t j = 0; j < F; ++j)
            ys[static_cast<std::size_t>(i * F + j)] =
                static_cast<S>(sa * static_cast<double>(yd[i * F + j]) +
                               sn * static_cast<double>(nd[i * F + j]));
        t[static_cast<std::size_t>(i)] = static_cast<double>(step[static_cast<std::size_t>(i)]) /
                                         static_cast<double>(kDiffusionTrainSteps);
    }
    auto y_s = TensorT<S>::from_data({rows, F}, std::move(ys));
    auto pred = flow_forward(net, y_s, t, h, norm_eps);
    auto d = sub(pred, noise);
    return mean_all(sum_last(mul(d, d)));
}

// Ancestral sampling over an evenly spaced subsequence of the training
// schedule. h: [R, D]; returns [R, F].
inline Tensor diffusion_sample(const FlowNetT<float>& net, const DiffusionSchedule& sched,
                               const Tensor& h, std::int64_t horizon, std::int64_t steps,
                               const Rng& rng, double norm_eps = 1e-5,
                               std::int64_t row_offset = 0) {
    if (steps < 1) throw ContractError("diffusion_sample: steps must be >= 1");
    NoGradGuard guard;
    std::int64_t rows = h.shape()[0];
    const std::int64_t last = kDiffusionTrainSteps - 1;

    std::vector<std::int64_t> plan(static_cast<std::size_t>(steps));
    for (std::int64_t j = 0; j < steps; ++j)
        plan[static_cast<std::size_t>(j)] =
            steps == 1 ? last
                       : static_cast<std::int64_t>(std::llround(
                             static_cast<double>(last) * static_cast<double>(steps - 1 - j) /
                             static_cast<double>(steps - 1)));

    std::vector<float> init(static_cast<std::size_t>(rows * horizon));
    for (std::int64_t r = 0; r < rows; ++r) {
        Rng rr = rng.split(static_cast<std::uint64_t>(row_offset + r));
        for (std::int64_t j = 0; j < horizon; ++j)
            init[static_cast<std::size_t>(r * horizon + j)] = static_cast<float>(rr.normal());
    }
    auto x = Tensor::from_data({rows, horizon}, std::move(init));

    for (std::int64_t j = 0; j < steps; ++j) {
        std::int64_t s = plan[static_cast<std::size_t>(j)];
        std::int64_t s_next = (j + 1 < steps) ? plan[static_cast<std::size_t>(j + 1)] : -1;
        double ab = sched.alpha_bar[static_cast<std::size_t>(s)];
        std::vector<double> t(static_cast<std::size_t>(rows),
                              static_cast<double>(s) / static_cast<double>(kDiffusionTrainSteps));
        auto eps_hat = flow_forward(net, x, t, h, norm_eps);

        std::vector<float> next(static_cast<std::size_t>(rows * horizon));
        const auto& xd = x.data();
        const auto& ed = eps_hat.data();
        Rng step_rng = rng.split(1000 + static_cast<std::uint64_t>(j));
        for (std::int64_t r = 0; r < rows; ++r) {
            Rng rr = step_rng.split(static_cast<std::uint64_t>(row_offset + r));
            double ab_next = s_next >= 0 ? sched.alpha_bar[static_cast<std::size_t>(s_next)] : 1.0;
            double var = s_next >= 0
                             ? (1.0 - ab_next) / (1.0 - ab) * (1.0 - ab / ab_next)
                             : 0.0;
            double dir = std::max(1.0 - ab_next - var, 0.0);
            for (std::int64_t c = 0; c < horizon; ++c) {
                double xv = static_cast<double>(xd[r * horizon + c]);
                double ev = static_cast<double>(ed[r * horizon + c]);
                double x0 = (xv - std::sqrt(1.0 - ab) * ev) / std::sqrt(ab);
                double mean = std::sqrt(ab_next) * x0 + std::sqrt(dir) * ev;
                double z = var > 0.0 ? rr.normal() : 0.0;
                next[static_cast<std::size_t>(r * horizon + c)] =
                    static_cast<float>(mean + std::sqrt(var) * z);
            }
        }
        x = Tensor::from_data({rows, horizon}, std::move(next));
    }
    return x;
}

}  // namespace sundial
