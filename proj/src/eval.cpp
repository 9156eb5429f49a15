#include "sundial/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "sundial/backbone.hpp"
#include "sundial/error.hpp"
#include "sundial/timeflow.hpp"

namespace sundial {

namespace {

double column_quantile(const std::vector<float>& sorted, double q) {
    auto s = static_cast<std::int64_t>(sorted.size());
    double pos = q * static_cast<double>(s - 1);
    auto lo = static_cast<std::int64_t>(std::floor(pos));
    std::int64_t hi = std::min(lo + 1, s - 1);
    double frac = pos - static_cast<double>(lo);
    double a = sorted[static_cast<std::size_t>(lo)];
    double b = sorted[static_cast<std::size_t>(hi)];
    return a + (b - a) * frac;
}

const DiffusionSchedule& shared_schedule() {
    static const DiffusionSchedule s = cosine_schedule();
    return s;
}

std::vector<double> tail(const std::vector<double>& v, std::int64_t n) {
    auto len = static_cast<std::int64_t>(v.size());
    if (len <= n) return v;
    return std::vector<double>(v.end() - n, v.end());
}

}  // namespace

std::vector<double> default_quantile_levels() {
    return {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
}

ForecastEnsemble summarize(const std::vector<std::vector<float>>& samples,
                           const std::vector<double>& levels) {
    if (samples.empty()) throw ContractError("summarize: empty sample set");
    const std::size_t h = samples[0].size();
    if (h == 0) throw ContractError("summarize: zero-length samples");
    for (const auto& row : samples)
        if (row.size() != h) throw ContractError("summarize: ragged sample rows");
    for (std::size_t i = 0; i < levels.size(); ++i) {
        if (!(levels[i] > 0.0 && levels[i] < 1.0))
            throw ContractError("summarize: levels must lie in (0, 1)");
        if (i > 0 && levels[i] <= levels[i - 1])
            throw ContractError("summarize: levels must be strictly increasing");
    }

    ForecastEnsemble out;
    out.samples = samples;
    out.quantile_levels = levels;
    out.quantiles.assign(levels.size(), std::vector<float>(h));
    out.median.resize(h);
    out.mean.resize(h);
    std::vector<float> col(samples.size());
    for (std::size_t t = 0; t < h; ++t) {
        double acc = 0;
        for (std::size_t s = 0; s < samples.size(); ++s) {
            col[s] = samples[s][t];
            acc += samples[s][t];
        }
        out.mean[t] = static_cast<float>(acc / static_cast<double>(samples.size()));
        std::sort(col.begin(), col.end());
        for (std::size_t l = 0; l < levels.size(); ++l)
            out.quantiles[l][t] = static_cast<float>(column_quantile(col, levels[l]));
        out.median[t] = static_cast<float>(column_quantile(col, 0.5));
    }
    return out;
}

ForecastEnsemble rolling_forecast_with(const SundialModelT<float>& model,
                                       const SamplerFn& sampler,
                                       const std::vector<double>& context, std::int64_t h_req,
                                       std::int64_t n_samples, std::int64_t steps,
                                       const std::vector<double>& levels, std::uint64_t seed) {
    if (context.empty()) throw DataError("rolling_forecast: context must have at least 1 point");
    if (h_req < 1) throw ContractError("rolling_forecast: horizon must be >= 1");
    if (n_samples < 1) throw ContractError("rolling_forecast: need at least 1 sample");
    if (steps < 1) throw ContractError("rolling_forecast: need at least 1 sampling step");
    const auto& lv = levels.empty() ? default_quantile_levels() : levels;

    const std::int64_t F = model.cfg.horizon;
    const std::int64_t t_max = model.cfg.max_context;
    const std::int64_t rounds = (h_req + F - 1) / F;
    const auto s_count = static_cast<std::size_t>(n_samples);
    Rng root(seed);
    NoGradGuard guard;

    std::vector<std::vector<double>> traj(s_count, tail(context, t_max));
    for (std::int64_t round = 0; round < rounds; ++round) {
        Tensor h;
        std::vector<NormStats> stats;
        stats.reserve(s_count);
        if (round == 0) {
            auto sample = patchify(traj[0], model.cfg);
            auto enc = encode(model, sample.patches, sample.mask);
            auto last = slice_rows(enc, sample.n_tokens - 1, sample.n_tokens);
            h = concat_rows<float>(std::vector<Tensor>(s_count, last));
            stats.assign(s_count, sample.stats);
        } else {
            std::vector<Tensor> rows;
            rows.reserve(s_count);
            for (std::size_t s = 0; s < s_count; ++s) {
                auto window = tail(traj[s], t_max);
                auto sample = patchify(window, model.cfg);
                auto enc = encode(model, sample.patches, sample.mask);
                rows.push_back(slice_rows(enc, sample.n_tokens - 1, sample.n_tokens));
                stats.push_back(sample.stats);
            }
            h = concat_rows<float>(rows);
        }
        auto draw = sampler(h, stats, steps, root.split(static_cast<std::uint64_t>(round) + 1), 0);
        if (draw.rank() != 2 || draw.shape()[0] != n_samples || draw.shape()[1] != F)
            throw ShapeError("rolling_forecast: sampler returned " + shape_str(draw.shape()));
        for (std::size_t s = 0; s < s_count; ++s)
            for (std::int64_t j = 0; j < F; ++j)
                traj[s].push_back(static_cast<double>(draw.at({static_cast<std::int64_t>(s), j})));
    }

    const std::size_t ctx_len = tail(context, t_max).size();
    std::vector<std::vector<float>> samples(s_count, std::vector<float>(static_cast<std::size_t>(h_req)));
    for (std::size_t s = 0; s < s_count; ++s)
        for (std::int64_t j = 0; j < h_req; ++j)
            samples[s][static_cast<std::size_t>(j)] =
                static_cast<float>(traj[s][ctx_len + static_cast<std::size_t>(j)]);
    return summarize(samples, lv);
}

ForecastEnsemble rolling_forecast(const SundialModelT<float>& model,
                                  const std::vector<double>& context, std::int64_t h_req,
                                  std::int64_t n_samples, std::int64_t steps,
                                  const std::vector<double>& levels, std::uint64_t seed) {
    SamplerFn sampler = [&model](const Tensor& h, const std::vector<NormStats>& stats,
                                 std::int64_t k, const Rng& rng, std::int64_t row_offset) {
        Tensor norm;
        switch (model.head) {
            case HeadKind::timeflow:
                norm = flow_sample(model.flow, h, model.cfg.horizon, k, rng, model.cfg.norm_eps,
                                   row_offset);
                break;
            case HeadKind::diffusion:
                norm = diffusion_sample(model.flow, shared_schedule(), h, model.cfg.horizon, k,
                                        rng, model.cfg.norm_eps, row_offset);
                break;
            case HeadKind::mse: {
                NoGradGuard g;
                norm = mse_forward(model.mse, h);
                break;
            }
        }
        auto out = norm.data();
        const auto f = static_cast<std::size_t>(norm.shape()[1]);
        for (std::size_t r = 0; r < stats.size(); ++r)
            for (std::size_t j = 0; j < f; ++j) {
                auto& v = out[r * f + j];
                v = static_cast<float>(static_cast<double>(v) * stats[r].std + stats[r].mean);
            }
        return Tensor::from_data(norm.shape(), std::move(out));
    };
    return rolling_forecast_with(model, sampler, context, h_req, n_samples, steps, levels, seed);
}

std::vector<float> persistence_forecast(const std::vector<double>& context, std::int64_t h_req) {
    if (context.empty()) throw DataError("persistence_forecast: empty context");
    return std::vector<float>(static_cast<std::size_t>(h_req),
                              static_cast<float>(context.back()));
}

std::pair<double, double> mse_mae(const std::vector<double>& pred,
                                  const std::vector<double>& truth) {
    if (pred.size() != truth.size() || pred.empty())
        throw ContractError("mse_mae: length mismatch (" + std::to_string(pred.size()) + " vs " +
                            std::to_string(truth.size()) + ")");
    double se = 0, ae = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        double d = pred[i] - truth[i];
        se += d * d;
        ae += std::abs(d);
    }
    auto n = static_cast<double>(pred.size());
    return {se / n, ae / n};
}

double mase(const std::vector<double>& pred, const std::vector<double>& truth,
            const std::vector<double>& insample, std::int64_t season) {
    if (season < 1) throw ContractError("mase: season must be >= 1");
    if (static_cast<std::int64_t>(insample.size()) <= season)
        throw ContractError("mase: insample length must exceed the season");
    double denom = 0;
    for (std::size_t t = static_cast<std::size_t>(season); t < insample.size(); ++t)
        denom += std::abs(insample[t] - insample[t - static_cast<std::size_t>(season)]);
    denom /= static_cast<double>(insample.size() - static_cast<std::size_t>(season));
    double mae = mse_mae(pred, truth).second;
    if (denom == 0) return std::numeric_limits<double>::infinity();
    return mae / denom;
}

std::int64_t season_for_freq(const std::optional<std::string>& freq) {
    if (!freq) return 1;
    if (*freq == "hourly") return 24;
    if (*freq == "daily") return 7;
    if (*freq == "weekly") return 52;
    return 1;
}

double pinball(double level, double forecast, double truth) {
    double d = truth - forecast;
    return std::max(level * d, (level - 1.0) * d);
}

double wql(const std::vector<std::vector<float>>& quantile_forecasts,
           const std::vector<double>& truth, const std::vector<double>& levels) {
    if (quantile_forecasts.size() != levels.size() || levels.empty())
        throw ContractError("wql: one forecast per level required");
    double denom = 0;
    for (double y : truth) denom += std::abs(y);
    if (denom == 0) return std::numeric_limits<double>::infinity();
    double acc = 0;
    for (std::size_t l = 0; l < levels.size(); ++l) {
        if (quantile_forecasts[l].size() != truth.size())
            throw ContractError("wql: forecast/truth length mismatch");
        double sum = 0;
        for (std::size_t t = 0; t < truth.size(); ++t)
            sum += pinball(levels[l], quantile_forecasts[l][t], truth[t]);
        acc += 2.0 * sum / denom;
    }
    return acc / static_cast<double>(levels.size());
}

double crps(const std::vector<double>& samples, double truth) {
    if (samples.empty()) throw ContractError("crps: empty sample set");
    auto s = static_cast<double>(samples.size());
    double term1 = 0;
    for (double x : samples) term1 += std::abs(x - truth);
    term1 /= s;
    double term2 = 0;
    for (double a : samples)
        for (double b : samples) term2 += std::abs(a - b);
    term2 /= s * s;
    return term1 - 0.5 * term2;
}

double crps_ensemble(const std::vector<std::vector<float>>& samples,
                     const std::vector<double>& truth) {
    if (samples.empty()) throw ContractError("crps_ensemble: empty sample set");
    if (truth.empty()) throw ContractError("crps_ensemble: empty truth");
    std::vector<double> col(samples.size());
    double acc = 0;
    for (std::size_t t = 0; t < truth.size(); ++t) {
        for (std::size_t s = 0; s < samples.size(); ++s) {
            if (samples[s].size() != truth.size())
                throw ContractError("crps_ensemble: sample/truth length mismatch");
            col[s] = samples[s][t];
        }
        acc += crps(col, truth[t]);
    }
    return acc / static_cast<double>(truth.size());
}

std::vector<MetricRow> evaluate_model(const SundialModelT<float>& model,
                                      const std::vector<SeriesRecord>& corpus,
                                      const EvalOptions& opts) {
    if (corpus.empty()) throw DataError("evaluate: empty corpus");
    const auto& levels = opts.levels.empty() ? default_quantile_levels() : opts.levels;
    for (const auto& m : opts.metrics)
        if (m != "mse" && m != "mae" && m != "mase" && m != "wql" && m != "crps")
            throw ConfigError("evaluate: unknown metric '" + m + "'");

    std::vector<MetricRow> rows;
    std::vector<double> sums(opts.metrics.size(), 0.0);
    Rng seed_root(opts.seed);
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const auto& rec = corpus[i];
        auto len = static_cast<std::int64_t>(rec.values.size());
        if (len <= opts.horizon)
            throw DataError("evaluate: series '" + rec.id + "' has " + std::to_string(len) +
                            " points, need more than the horizon " + std::to_string(opts.horizon));
        std::vector<double> context(rec.values.begin(), rec.values.end() - opts.horizon);
        std::vector<double> truth(rec.values.end() - opts.horizon, rec.values.end());
        std::uint64_t series_seed = seed_root.split(static_cast<std::uint64_t>(i) + 1).next_u64();
        auto ens = rolling_forecast(model, context, opts.horizon, opts.n_samples, opts.steps,
                                    levels, series_seed);
        std::vector<double> point(ens.median.begin(), ens.median.end());
        for (std::size_t m = 0; m < opts.metrics.size(); ++m) {
            const auto& name = opts.metrics[m];
            double value = 0;
            if (name == "mse")
                value = mse_mae(point, truth).first;
            else if (name == "mae")
                value = mse_mae(point, truth).second;
            else if (name == "mase")
                value = mase(point, truth, context, season_for_freq(rec.freq));
            else if (name == "wql")
                value = wql(ens.quantiles, truth, levels);
            else
                value = crps_ensemble(ens.samples, truth);
            rows.push_back({rec.id, name, value});
            sums[m] += value;
        }
    }
    for (std::size_t m = 0; m < opts.metrics.size(); ++m)
        rows.push_back({"aggregate", opts.metrics[m],
                        sums[m] / static_cast<double>(corpus.size())});
    return rows;
}

void write_report(const std::vector<MetricRow>& rows, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open report for writing: " + path);
    char buf[64];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%.9g", r.value);
        out << r.id << "," << r.metric << "," << buf << "\n";
    }
    if (!out) throw DataError("write failed: " + path);
}

}  // namespace sundial
