#include "sundial/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "sundial/backbone.hpp"
#include "sundial/error.hpp"
#include "sundial/timeflow.hpp"

namespace sundial {

namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.95;
constexpr double kAdamEps = 1e-8;
constexpr double kPi = 3.14159265358979323846;

const DiffusionSchedule& shared_schedule() {
    static const DiffusionSchedule s = cosine_schedule();
    return s;
}

bool decays(const TensorT<float>& p) { return p.rank() >= 2; }

template <typename S>
TensorT<S> cast_input(const Tensor& t) {
    if constexpr (std::is_same_v<S, float>)
        return t;
    else
        return t.template astype<S>();
}

// per-token representations at every eligible position, stacked across the batch
template <typename S>
TensorT<S> batch_hidden(const SundialModelT<S>& m, const TrainBatch& batch) {
    std::vector<TensorT<S>> rows;
    rows.reserve(batch.samples.size());
    for (std::size_t e = 0; e < batch.samples.size(); ++e) {
        auto patches = cast_input<S>(batch.samples[e].patches);
        auto mask = cast_input<S>(batch.samples[e].mask);
        auto h = encode(m, patches, mask);
        rows.push_back(take_rows(h, batch.positions[e]));
    }
    return concat_rows<S>(rows);
}

template <typename S>
TensorT<S> objective_loss(const SundialModelT<S>& m, const TrainBatch& batch, HeadKind objective,
                          const FlowDraws& flow_draws, const DiffusionDraws& diff_draws) {
    auto h = batch_hidden(m, batch);
    auto y1 = cast_input<S>(batch.targets);
    switch (objective) {
        case HeadKind::timeflow:
            return timeflow_loss(m.flow, h, y1, flow_draws.t, cast_input<S>(flow_draws.y0),
                                 m.cfg.norm_eps);
        case HeadKind::mse:
            return mse_loss(m.mse, h, y1);
        case HeadKind::diffusion:
            return diffusion_loss(m.flow, shared_schedule(), h, y1, diff_draws.step,
                                  cast_input<S>(diff_draws.noise), m.cfg.norm_eps);
    }
    throw ConfigError("unknown objective");
}

}  // namespace

void TrainConfig::validate(const ModelConfig& mcfg) const {
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (steps < 0) throw ConfigError("train: steps must be >= 0");
    if (lr_peak < 0) throw ConfigError("train: lr_peak must be >= 0");
    if (warmup_steps < 0) throw ConfigError("train: warmup_steps must be >= 0");
    if (weight_decay < 0) throw ConfigError("train: weight_decay must be >= 0");
    if (!(grad_clip_norm > 0)) throw ConfigError("train: grad_clip_norm must be > 0");
    if (min_context < mcfg.patch_len + mcfg.horizon)
        throw ConfigError("train: min_context " + std::to_string(min_context) +
                          " leaves no position with a full target (need >= " +
                          std::to_string(mcfg.patch_len + mcfg.horizon) + ")");
    if (max_context > mcfg.max_context)
        throw ConfigError("train: max_context " + std::to_string(max_context) +
                          " exceeds model limit " + std::to_string(mcfg.max_context));
    if (min_context > max_context) throw ConfigError("train: min_context > max_context");
}

TrainBatch make_batch(const std::vector<SeriesRecord>& corpus, const ModelConfig& mcfg,
                      const TrainConfig& tcfg, Rng& rng) {
    if (corpus.empty()) throw DataError("make_batch: empty corpus");
    std::vector<std::size_t> eligible;
    std::int64_t longest = 0;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        auto len = static_cast<std::int64_t>(corpus[i].values.size());
        longest = std::max(longest, len);
        if (len >= tcfg.min_context) eligible.push_back(i);
    }
    if (eligible.empty())
        throw DataError("make_batch: no series reaches min_context " +
                        std::to_string(tcfg.min_context) + " (longest is " +
                        std::to_string(longest) + ")");

    TrainBatch batch;
    const std::int64_t P = mcfg.patch_len, F = mcfg.horizon;
    std::vector<Tensor> target_rows;
    for (std::int64_t b = 0; b < tcfg.batch_size; ++b) {
        const auto& rec =
            corpus[eligible[static_cast<std::size_t>(rng.uniform_int(
                0, static_cast<std::int64_t>(eligible.size()) - 1))]];
        auto series_len = static_cast<std::int64_t>(rec.values.size());
        std::int64_t len = rng.uniform_int(tcfg.min_context, std::min(tcfg.max_context, series_len));
        std::int64_t off = rng.uniform_int(0, series_len - len);
        std::vector<double> window(rec.values.begin() + off, rec.values.begin() + off + len);
        // Normalize with statistics that exclude the final horizon: the last
        // prediction position then predicts points its own statistics never
        // saw, exactly as at inference time.
        std::vector<double> history(window.begin(), window.end() - F);
        auto s = patchify_with_stats(window, compute_stats(history), mcfg);

        std::vector<std::int64_t> pos;
        const std::int64_t grid_len = s.n_tokens * P;
        std::vector<float> tgt;
        for (std::int64_t i = 0; i < s.n_tokens; ++i) {
            std::int64_t start = (i + 1) * P;
            if (start + F > grid_len) break;
            pos.push_back(i);
            for (std::int64_t j = 0; j < F; ++j)
                tgt.push_back(s.grid[static_cast<std::size_t>(start + j)]);
        }
        if (pos.empty())
            throw DataError("make_batch: window of " + std::to_string(len) +
                            " points has no position with a full target");
        batch.total_positions += static_cast<std::int64_t>(pos.size());
        target_rows.push_back(Tensor::from_data(
            {static_cast<std::int64_t>(pos.size()), F}, std::move(tgt)));
        batch.samples.push_back(std::move(s));
        batch.positions.push_back(std::move(pos));
    }
    batch.targets = concat_rows<float>(target_rows);
    return batch;
}

double lr_at(std::int64_t step, const TrainConfig& tcfg) {
    if (tcfg.lr_peak == 0) return 0;
    if (step < tcfg.warmup_steps)
        return tcfg.lr_peak * static_cast<double>(step + 1) / static_cast<double>(tcfg.warmup_steps);
    std::int64_t last = tcfg.steps - 1;
    if (last <= tcfg.warmup_steps) return tcfg.lr_peak;
    double tau = static_cast<double>(step - tcfg.warmup_steps) /
                 static_cast<double>(last - tcfg.warmup_steps);
    return tcfg.lr_peak * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(kPi * tau)));
}

AdamState make_adam_state(SundialModelT<float>& model) {
    AdamState st;
    for (auto& [name, p] : named_params(model)) {
        (void)name;
        st.m.emplace_back(p->numel(), 0.0);
        st.v.emplace_back(p->numel(), 0.0);
    }
    return st;
}

StepResult train_step(SundialModelT<float>& model, const TrainBatch& batch, AdamState& opt,
                      const TrainConfig& tcfg, std::int64_t step, Rng& draw_rng) {
    auto params = named_params(model);
    if (opt.m.size() != params.size())
        throw StateError("train_step: optimizer state does not match the model");
    for (auto& [name, p] : params) {
        (void)name;
        p->zero_grad();
    }

    FlowDraws flow_draws;
    DiffusionDraws diff_draws;
    if (tcfg.objective == HeadKind::timeflow)
        flow_draws = draw_flow(draw_rng.split(static_cast<std::uint64_t>(step)),
                               batch.total_positions, model.cfg.horizon);
    else if (tcfg.objective == HeadKind::diffusion)
        diff_draws = draw_diffusion(draw_rng.split(static_cast<std::uint64_t>(step)),
                                    batch.total_positions, model.cfg.horizon);

    auto loss = objective_loss(model, batch, tcfg.objective, flow_draws, diff_draws);
    double loss_val = static_cast<double>(loss.item());
    if (!std::isfinite(loss_val))
        throw TrainError("step " + std::to_string(step) + ": non-finite loss");
    backward(loss);

    double sq = 0;
    for (auto& [name, p] : params) {
        (void)name;
        for (float g : p->impl()->grad) sq += static_cast<double>(g) * static_cast<double>(g);
    }
    double norm = std::sqrt(sq);
    if (!std::isfinite(norm))
        throw TrainError("step " + std::to_string(step) + ": non-finite gradient norm");
    double factor = norm > tcfg.grad_clip_norm ? tcfg.grad_clip_norm / norm : 1.0;

    double lr = lr_at(step, tcfg);
    opt.t += 1;
    double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(opt.t));
    double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(opt.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = *params[i].second;
        auto& data = p.mutable_data();
        const auto& grad = p.impl()->grad;
        const bool wd = decays(p) && tcfg.weight_decay > 0;
        auto& m = opt.m[i];
        auto& v = opt.v[i];
        for (std::size_t j = 0; j < data.size(); ++j) {
            double g = grad.empty() ? 0.0 : static_cast<double>(grad[j]) * factor;
            m[j] = kBeta1 * m[j] + (1.0 - kBeta1) * g;
            v[j] = kBeta2 * v[j] + (1.0 - kBeta2) * g * g;
            double upd = lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + kAdamEps);
            if (wd) upd += lr * tcfg.weight_decay * static_cast<double>(data[j]);
            data[j] = static_cast<float>(static_cast<double>(data[j]) - upd);
        }
    }
    return {loss_val, norm, lr};
}

TrainResult train_model(SundialModelT<float>& model, const std::vector<SeriesRecord>& corpus,
                        const TrainConfig& tcfg) {
    tcfg.validate(model.cfg);
    if (tcfg.objective != model.head)
        throw ConfigError("train: objective '" + std::string(head_kind_name(tcfg.objective)) +
                          "' does not match model head '" + std::string(head_kind_name(model.head)) +
                          "'");
    Rng root(tcfg.seed);
    Rng batch_rng = root.split(1);
    Rng draw_rng = root.split(2);
    auto opt = make_adam_state(model);
    TrainResult result;
    result.records.reserve(static_cast<std::size_t>(tcfg.steps));
    for (std::int64_t step = 0; step < tcfg.steps; ++step) {
        auto batch = make_batch(corpus, model.cfg, tcfg, batch_rng);
        auto res = train_step(model, batch, opt, tcfg, step, draw_rng);
        result.records.push_back({step, res.loss, res.lr, res.grad_norm});
    }
    return result;
}

TrainResult fine_tune(SundialModelT<float>& model, const std::vector<SeriesRecord>& corpus,
                      const TrainConfig& tcfg) {
    return train_model(model, corpus, tcfg);
}

void write_loss_log(const std::vector<TrainLogRecord>& records, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open loss log for writing: " + path);
    char buf[160];
    for (const auto& r : records) {
        std::snprintf(buf, sizeof(buf), "%lld,%.9g,%.9g,%.9g\n", static_cast<long long>(r.step),
                      r.loss, r.lr, r.grad_norm);
        out << buf;
    }
    if (!out) throw DataError("write failed: " + path);
}

GradCheckReport grad_check(const SundialModelT<float>& model, const TrainBatch& batch,
                           std::int64_t n_sample, double tolerance, std::uint64_t seed) {
    if (n_sample < 1) throw ContractError("grad_check: n_sample must be >= 1");
    if (model.head == HeadKind::mse)
        throw ConfigError("grad_check: needs a flow head (timeflow or diffusion model)");
    SundialModelT<float> shallow = model;
    auto md = convert_model<double>(shallow);
    auto flow_draws = draw_flow(Rng(seed).split(7), batch.total_positions, md.cfg.horizon);

    auto loss_of = [&]() {
        return objective_loss(md, batch, HeadKind::timeflow, flow_draws, DiffusionDraws{});
    };

    auto params = named_params(md);
    for (auto& [name, p] : params) {
        (void)name;
        p->zero_grad();
    }
    auto loss = loss_of();
    backward(loss);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (auto& [name, p] : params) {
        (void)name;
        auto g = p->impl()->grad;
        g.resize(static_cast<std::size_t>(p->numel()), 0.0);
        analytic.push_back(std::move(g));
    }

    const double h = 1e-3;
    Rng pick(seed);
    GradCheckReport report;
    report.n_checked = n_sample;
    NoGradGuard guard;
    for (std::int64_t s = 0; s < n_sample; ++s) {
        auto pi = static_cast<std::size_t>(
            pick.uniform_int(0, static_cast<std::int64_t>(params.size()) - 1));
        auto& p = *params[pi].second;
        auto ji = static_cast<std::size_t>(
            pick.uniform_int(0, static_cast<std::int64_t>(p.numel()) - 1));
        double orig = p.mutable_data()[ji];
        p.mutable_data()[ji] = orig + h;
        double lp = loss_of().item();
        p.mutable_data()[ji] = orig - h;
        double lm = loss_of().item();
        p.mutable_data()[ji] = orig;
        double fd = (lp - lm) / (2.0 * h);
        double a = analytic[pi][ji];
        double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-2});
        if (rel > report.max_rel_err) {
            report.max_rel_err = rel;
            report.worst_param = params[pi].first + "[" + std::to_string(ji) + "]";
        }
    }
    report.pass = report.max_rel_err < tolerance;
    return report;
}

}  // namespace sundial
