#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "sundial/data.hpp"
#include "sundial/model.hpp"
#include "sundial/tokenizer.hpp"

namespace sundial {

struct ForecastEnsemble {
    std::vector<std::vector<float>> samples;    // S x H_req, series units
    std::vector<double> quantile_levels;        // sorted, in (0, 1)
    std::vector<std::vector<float>> quantiles;  // per level, H_req
    std::vector<float> median;                  // H_req, the 0.5 quantile
    std::vector<float> mean;                    // H_req, per-step sample mean
};

// empirical quantiles with linear interpolation between order statistics
ForecastEnsemble summarize(const std::vector<std::vector<float>>& samples,
                           const std::vector<double>& levels);

// rows: [M, F] in series units; stats hold each row's normalization
using SamplerFn = std::function<Tensor(const Tensor& h, const std::vector<NormStats>& stats,
                                       std::int64_t steps, const Rng& rng,
                                       std::int64_t row_offset)>;

// autoregressive rolling forecast: ceil(H_req / F) rounds, each ensemble
// member extending its own trajectory, re-normalized every round
ForecastEnsemble rolling_forecast_with(const SundialModelT<float>& model,
                                       const SamplerFn& sampler,
                                       const std::vector<double>& context, std::int64_t h_req,
                                       std::int64_t n_samples, std::int64_t steps,
                                       const std::vector<double>& levels, std::uint64_t seed);

ForecastEnsemble rolling_forecast(const SundialModelT<float>& model,
                                  const std::vector<double>& context, std::int64_t h_req,
                                  std::int64_t n_samples, std::int64_t steps,
                                  const std::vector<double>& levels, std::uint64_t seed);

std::vector<double> default_quantile_levels();  // 0.1 .. 0.9

std::vector<float> persistence_forecast(const std::vector<double>& context, std::int64_t h_req);

// ---- metrics ----

std::pair<double, double> mse_mae(const std::vector<double>& pred,
                                  const std::vector<double>& truth);

// seasonal naive scaling; +infinity when the insample seasonal diff is all zero
double mase(const std::vector<double>& pred, const std::vector<double>& truth,
            const std::vector<double>& insample, std::int64_t season);

std::int64_t season_for_freq(const std::optional<std::string>& freq);

// level*(truth-forecast) when under, (level-1)*(truth-forecast) when over
double pinball(double level, double forecast, double truth);

// mean over levels of the 2*pinball sum normalized by sum |truth|
double wql(const std::vector<std::vector<float>>& quantile_forecasts,
           const std::vector<double>& truth, const std::vector<double>& levels);

double crps(const std::vector<double>& samples, double truth);

// energy-form CRPS averaged over horizon steps
double crps_ensemble(const std::vector<std::vector<float>>& samples,
                     const std::vector<double>& truth);

// ---- whole-corpus evaluation ----

struct EvalOptions {
    std::int64_t horizon = 32;
    std::int64_t n_samples = 20;
    std::int64_t steps = 50;
    std::vector<double> levels = {};  // default 0.1..0.9 when empty
    std::vector<std::string> metrics = {"mse", "mae", "mase", "wql", "crps"};
    std::uint64_t seed = 0;
};

struct MetricRow {
    std::string id;
    std::string metric;
    double value = 0;
};

std::vector<MetricRow> evaluate_model(const SundialModelT<float>& model,
                                      const std::vector<SeriesRecord>& corpus,
                                      const EvalOptions& opts);

void write_report(const std::vector<MetricRow>& rows, const std::string& path);

}  // namespace sundial
