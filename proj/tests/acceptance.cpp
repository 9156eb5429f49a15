// Acceptance gate: one binary, four groups, one pass/fail line per criterion.
//   fast      criteria 1, 3, 4, 7, 8, 9
//   recovery  criterion 2
//   forecast  criteria 5 and 6
//   scaling   criterion 10
// Exit 0 iff every criterion in the group passes.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "sundial/backbone.hpp"
#include "sundial/checkpoint.hpp"
#include "sundial/data.hpp"
#include "sundial/eval.hpp"
#include "sundial/instrumentation.hpp"
#include "sundial/model.hpp"
#include "sundial/timeflow.hpp"
#include "sundial/train.hpp"

namespace {

using namespace sundial;
using Clock = std::chrono::steady_clock;

bool g_all_pass = true;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

void report(int criterion, const char* name, bool pass, const std::string& detail) {
    std::printf("[%s] criterion %d %s: %s\n", pass ? "PASS" : "FAIL", criterion, name,
                detail.c_str());
    std::fflush(stdout);
    if (!pass) g_all_pass = false;
}

std::string fmt(const char* spec, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), spec, v);
    return buf;
}

// plain Adam over a filtered parameter subset; used by the synthetic-target
// recovery study where the full training pipeline does not apply
struct SubsetAdam {
    std::vector<Tensor*> params;
    std::vector<std::vector<double>> m, v;
    std::int64_t t = 0;

    explicit SubsetAdam(SundialModelT<float>& model, const char* prefix) {
        for (auto& [name, p] : named_params(model)) {
            if (name.rfind(prefix, 0) != 0) continue;
            params.push_back(p);
            m.emplace_back(static_cast<std::size_t>(p->numel()), 0.0);
            v.emplace_back(static_cast<std::size_t>(p->numel()), 0.0);
        }
    }

    void step(double lr) {
        t += 1;
        double bc1 = 1.0 - std::pow(0.9, static_cast<double>(t));
        double bc2 = 1.0 - std::pow(0.95, static_cast<double>(t));
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& p = *params[i];
            auto& data = p.mutable_data();
            const auto& grad = p.impl()->grad;
            for (std::int64_t j = 0; j < p.numel(); ++j) {
                auto ji = static_cast<std::size_t>(j);
                double g = grad.empty() ? 0.0 : static_cast<double>(grad[ji]);
                m[i][ji] = 0.9 * m[i][ji] + 0.1 * g;
                v[i][ji] = 0.95 * v[i][ji] + 0.05 * g * g;
                double update = (m[i][ji] / bc1) / (std::sqrt(v[i][ji] / bc2) + 1e-8);
                data[ji] = static_cast<float>(static_cast<double>(data[ji]) - lr * update);
            }
        }
    }
};

Tensor repeat_row(const std::vector<float>& row, std::int64_t n) {
    std::vector<float> data;
    data.reserve(row.size() * static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) data.insert(data.end(), row.begin(), row.end());
    return Tensor::from_data({n, static_cast<std::int64_t>(row.size())}, std::move(data));
}

// ---- criterion 1: gradient correctness on the tiny config ----

void criterion1() {
    auto t0 = Clock::now();
    auto cfg = preset_config("tiny");
    auto model = init_model(cfg, HeadKind::timeflow, 42);
    auto corpus = make_synth_corpus(43, 4, 48, 3);
    TrainConfig tcfg;
    tcfg.batch_size = 4;
    tcfg.min_context = cfg.patch_len + cfg.horizon;
    tcfg.max_context = 48;
    tcfg.seed = 42;
    Rng rng(44);
    auto batch = make_batch(corpus, cfg, tcfg, rng);
    auto rep = grad_check(model, batch, 200, 1e-3, 45);
    double secs = seconds_since(t0);
    bool pass = rep.pass && rep.n_checked >= 200 && secs < 60.0;
    report(1, "gradient correctness", pass,
           "max_rel_err " + fmt("%.3g", rep.max_rel_err) + " (limit 1e-3) over " +
               std::to_string(rep.n_checked) + " sampled parameters (need >= 200), worst " +
               rep.worst_param + ", " + fmt("%.1f", secs) + "s (limit 60s)");
}

// ---- criterion 2: distribution recovery on a bimodal target ----

void criterion2() {
    auto t0 = Clock::now();
    ModelConfig cfg;
    cfg.patch_len = 4;
    cfg.max_context = 16;
    cfg.horizon = 1;
    cfg.layers = 1;
    cfg.dim = 8;
    cfg.ffn_dim = 16;
    cfg.heads = 2;
    cfg.tf_dim = 32;
    cfg.tf_layers = 2;
    cfg.validate();

    const std::int64_t B = 256, steps = 5000, S = 2000, K = 50;
    std::vector<float> cond(static_cast<std::size_t>(cfg.dim));
    Rng cond_rng(4);
    for (auto& v : cond) v = static_cast<float>(cond_rng.normal());
    auto h_batch = repeat_row(cond, B);
    auto h_big = repeat_row(cond, S);
    auto h_one = repeat_row(cond, 1);

    auto draw_targets = [](Rng r, std::int64_t n) {
        std::vector<float> y(static_cast<std::size_t>(n));
        for (auto& v : y) {
            double mode = (r.next_u64() & 1) ? 2.0 : -2.0;
            v = static_cast<float>(r.normal(mode, 0.1));
        }
        return y;
    };

    // velocity-field head
    auto flow_model = init_model(cfg, HeadKind::timeflow, 3);
    {
        SubsetAdam opt(flow_model, "flow.");
        Rng data_rng(5);
        Rng draw_rng(6);
        for (std::int64_t s = 0; s < steps; ++s) {
            for (auto& [name, p] : named_params(flow_model)) {
                (void)name;
                p->zero_grad();
            }
            auto su = static_cast<std::uint64_t>(s);
            auto y1 = Tensor::from_data({B, 1}, draw_targets(data_rng.split(su), B));
            auto draws = draw_flow(draw_rng.split(su), B, 1);
            auto loss = timeflow_loss(flow_model.flow, h_batch, y1, draws.t, draws.y0);
            backward(loss);
            opt.step(s < 4000 ? 1e-3 : 1e-4);
        }
    }
    Tensor samp;
    {
        NoGradGuard guard;
        samp = flow_sample(flow_model.flow, h_big, 1, K, Rng(7));
    }
    std::vector<double> flow_samples;
    double sum_pos = 0, sum_neg = 0;
    std::int64_t n_pos = 0, n_neg = 0;
    for (std::int64_t i = 0; i < S; ++i) {
        double v = samp.at({i, 0});
        flow_samples.push_back(v);
        if (v > 0) {
            sum_pos += v;
            ++n_pos;
        } else {
            sum_neg += v;
            ++n_neg;
        }
    }
    double freq_pos = static_cast<double>(n_pos) / static_cast<double>(S);
    double mean_pos = n_pos ? sum_pos / static_cast<double>(n_pos) : 1e9;
    double mean_neg = n_neg ? sum_neg / static_cast<double>(n_neg) : -1e9;

    // squared-error head on the same target collapses to the mixture mean
    auto mse_model = init_model(cfg, HeadKind::mse, 8);
    {
        SubsetAdam opt(mse_model, "mse.");
        Rng data_rng(9);
        for (std::int64_t s = 0; s < steps; ++s) {
            for (auto& [name, p] : named_params(mse_model)) {
                (void)name;
                p->zero_grad();
            }
            auto y1 = Tensor::from_data(
                {B, 1}, draw_targets(data_rng.split(static_cast<std::uint64_t>(s)), B));
            auto loss = mse_loss(mse_model.mse, h_batch, y1);
            backward(loss);
            opt.step(s < 4000 ? 1e-3 : 1e-4);
        }
    }
    double point;
    {
        NoGradGuard guard;
        point = mse_forward(mse_model.mse, h_one).at({0, 0});
    }

    // probabilistic vs point score against fresh draws from the same mixture
    auto truths = draw_targets(Rng(10), 400);
    double crps_flow = 0, crps_point = 0;
    for (float y : truths) {
        crps_flow += crps(flow_samples, static_cast<double>(y));
        crps_point += std::abs(point - static_cast<double>(y));
    }
    crps_flow /= static_cast<double>(truths.size());
    crps_point /= static_cast<double>(truths.size());

    double secs = seconds_since(t0);
    bool freq_ok = freq_pos >= 0.35 && freq_pos <= 0.65;
    bool means_ok = std::abs(mean_pos - 2.0) < 0.1 && std::abs(mean_neg + 2.0) < 0.1;
    bool mse_ok = std::abs(point) <= 0.2;
    bool crps_ok = crps_flow < crps_point;
    bool pass = freq_ok && means_ok && mse_ok && crps_ok && secs < 600.0;
    report(2, "distribution recovery", pass,
           "mode freq " + fmt("%.3f", freq_pos) + " (limits [0.35, 0.65]), mode means " +
               fmt("%.3f", mean_pos) + "/" + fmt("%.3f", mean_neg) +
               " (within 0.1 of +-2), point head " + fmt("%.3f", point) +
               " (within 0.2 of 0), ensemble crps " + fmt("%.3f", crps_flow) + " < point crps " +
               fmt("%.3f", crps_point) + ", " + fmt("%.1f", secs) + "s (limit 600s)");
}

// ---- criterion 3: incremental decoding equivalence and cost ----

void criterion3() {
    ModelConfig cfg;
    cfg.patch_len = 8;
    cfg.max_context = 256;  // exactly 32 token slots, so nothing is evicted
    cfg.horizon = 16;
    cfg.layers = 2;
    cfg.dim = 32;
    cfg.ffn_dim = 64;
    cfg.heads = 4;
    cfg.tf_dim = 32;
    cfg.tf_layers = 1;
    cfg.validate();
    auto model = init_model(cfg, HeadKind::timeflow, 7);
    auto rec = kernel_synth(8, 256, 5);
    std::vector<double> ctx(rec.values.begin(), rec.values.end());
    auto sample = patchify(ctx, cfg);
    NoGradGuard guard;

    reset_multiply_count();
    auto cache = make_kv_cache(cfg);
    std::vector<Tensor> inc;
    for (std::int64_t n = 0; n < sample.n_tokens; ++n)
        inc.push_back(forward_incremental(model, slice_rows(sample.patches, n, n + 1),
                                          slice_rows(sample.mask, n, n + 1), cache));
    auto inc_mults = multiply_count();

    reset_multiply_count();
    double max_diff = 0;
    for (std::int64_t n = 0; n < sample.n_tokens; ++n) {
        auto h = encode(model, slice_rows(sample.patches, 0, n + 1),
                        slice_rows(sample.mask, 0, n + 1));
        for (std::int64_t j = 0; j < cfg.dim; ++j)
            max_diff = std::max(max_diff,
                                std::abs(static_cast<double>(h.at({n, j})) -
                                         inc[static_cast<std::size_t>(n)].at({0, j})));
    }
    auto full_mults = multiply_count();
    double ratio = static_cast<double>(inc_mults) / static_cast<double>(full_mults);

    bool pass = sample.n_tokens == 32 && max_diff < 1e-4 && ratio < 0.6;
    report(3, "kv-cache equivalence", pass,
           "32-token stream, max |diff| " + fmt("%.3g", max_diff) +
               " (limit 1e-4), multiply ratio " + fmt("%.3f", ratio) + " (limit 0.6)");
}

// ---- criterion 4: rotary logits depend only on relative position ----

void criterion4() {
    ModelConfig cfg;
    cfg.rope_enabled = true;
    cfg.rope_theta = 10000.0;
    const std::int64_t H = 2, N = 6, d = 16;
    double worst = 0;
    for (int trial = 0; trial < 50; ++trial) {
        Rng rng(100 + static_cast<std::uint64_t>(trial));
        auto rand_tensor = [&]() {
            std::vector<float> data(static_cast<std::size_t>(H * N * d));
            for (auto& v : data) v = static_cast<float>(rng.normal());
            return Tensor::from_data({H, N, d}, std::move(data));
        };
        auto q = rand_tensor();
        auto k = rand_tensor();
        std::vector<std::int64_t> pos(N);
        std::int64_t cur = rng.uniform_int(0, 32);
        for (auto& p : pos) {
            p = cur;
            cur += rng.uniform_int(1, 16);
        }
        std::int64_t shift = rng.uniform_int(1, 256);
        auto shifted = pos;
        for (auto& p : shifted) p += shift;

        NoGradGuard guard;
        auto s1 = rope_scores(q, k, pos, pos, cfg);
        auto s2 = rope_scores(q, k, shifted, shifted, cfg);
        for (std::int64_t i = 0; i < s1.numel(); ++i)
            worst = std::max(worst, std::abs(static_cast<double>(s1.data()[i]) -
                                             static_cast<double>(s2.data()[i])));
    }
    bool pass = worst < 1e-5;
    report(4, "rotary shift invariance", pass,
           "max logit |diff| " + fmt("%.3g", worst) + " over 50 randomized trials (limit 1e-5)");
}

// ---- criterion 7: parameter accounting at reference scales ----

void criterion7() {
    struct Target {
        const char* preset;
        double millions;
    };
    bool pass = true;
    std::string detail;
    for (auto [preset, millions] : {Target{"base", 128.0}, Target{"small", 32.0},
                                    Target{"large", 444.0}}) {
        std::int64_t counted = 0;
        {
            auto model = init_model(preset_config(preset), HeadKind::timeflow, 0);
            for (auto& [name, p] : named_params(model)) {
                (void)name;
                counted += p->numel();
            }
        }
        double rel = std::abs(static_cast<double>(counted) / 1e6 - millions) / millions;
        if (counted != param_count(preset_config(preset), HeadKind::timeflow)) pass = false;
        if (rel > 0.20) pass = false;
        if (!detail.empty()) detail += ", ";
        detail += std::string(preset) + " " + fmt("%.1f", static_cast<double>(counted) / 1e6) +
                  "M vs " + fmt("%.0f", millions) + "M (" + fmt("%.1f", rel * 100) + "%)";
    }
    report(7, "parameter accounting", pass, detail + "; limit 20% each");
}

// ---- criterion 8: metric oracles by hand enumeration ----

void criterion8() {
    double c = crps({0.0, 2.0}, 1.0);
    double p = pinball(0.9, 8.0, 10.0);
    double m = mase({3.0, 4.0}, {3.0, 4.0}, {1.0, 2.0, 4.0}, 1);
    bool pass = std::abs(c - 0.5) < 1e-9 && std::abs(p - 1.8) < 1e-9 && std::abs(m) < 1e-9;
    report(8, "metric oracles", pass,
           "crps({0,2}, 1) = " + fmt("%.10g", c) + " (want 0.5), pinball_0.9(8, 10) = " +
               fmt("%.10g", p) + " (want 1.8), mase(pred==truth) = " + fmt("%.10g", m) +
               " (want 0); tolerance 1e-9");
}

// ---- criterion 9: determinism and persistence ----

void criterion9() {
    auto cfg = preset_config("tiny");
    auto corpus = make_synth_corpus(11, 6, 64, 3);
    TrainConfig tcfg;
    tcfg.batch_size = 4;
    tcfg.steps = 25;
    tcfg.warmup_steps = 3;
    tcfg.min_context = cfg.patch_len + cfg.horizon;
    tcfg.max_context = 64;
    tcfg.seed = 12;

    auto m1 = init_model(cfg, HeadKind::timeflow, 5);
    auto r1 = train_model(m1, corpus, tcfg);
    auto m2 = init_model(cfg, HeadKind::timeflow, 5);
    auto r2 = train_model(m2, corpus, tcfg);

    bool logs_equal = r1.records.size() == r2.records.size();
    for (std::size_t i = 0; logs_equal && i < r1.records.size(); ++i)
        logs_equal = r1.records[i].loss == r2.records[i].loss &&
                     r1.records[i].lr == r2.records[i].lr &&
                     r1.records[i].grad_norm == r2.records[i].grad_norm;

    const char* path = "/tmp/sundial_acceptance_c9.sndl";
    save_checkpoint(m1, path);
    auto m3 = load_checkpoint(path);
    bool params_equal = true;
    auto p1 = named_params(m1);
    auto p3 = named_params(m3);
    params_equal = p1.size() == p3.size();
    for (std::size_t i = 0; params_equal && i < p1.size(); ++i)
        params_equal = p1[i].second->data() == p3[i].second->data();

    std::vector<double> ctx(corpus[0].values.begin(), corpus[0].values.end());
    auto e1 = rolling_forecast(m1, ctx, 8, 4, 6, default_quantile_levels(), 99);
    auto e3 = rolling_forecast(m3, ctx, 8, 4, 6, default_quantile_levels(), 99);
    bool forecasts_equal = e1.samples == e3.samples;

    bool pass = logs_equal && params_equal && forecasts_equal;
    report(9, "determinism and persistence", pass,
           std::string("loss log bit-identical: ") + (logs_equal ? "yes" : "NO") +
               ", reloaded parameters bit-identical: " + (params_equal ? "yes" : "NO") +
               ", reloaded forecasts bit-identical: " + (forecasts_equal ? "yes" : "NO"));
}

// ---- criteria 5 and 6: end-to-end toy forecasting and calibration trend ----

void criterion5_6() {
    auto t0 = Clock::now();
    auto cfg = preset_config("toy");
    auto corpus = make_synth_corpus(21, 250, 320, 5);
    std::vector<SeriesRecord> train_set(corpus.begin(), corpus.begin() + 200);
    std::vector<SeriesRecord> held(corpus.begin() + 200, corpus.end());

    auto model = init_model(cfg, HeadKind::timeflow, 1);
    TrainConfig tcfg;
    tcfg.batch_size = 32;
    tcfg.steps = 3000;
    tcfg.lr_peak = 4e-3;
    tcfg.warmup_steps = 100;
    tcfg.min_context = cfg.patch_len + cfg.horizon;
    tcfg.max_context = 288;
    tcfg.seed = 1;
    train_model(model, train_set, tcfg);

    // Forecast the final 16 points of each held-out series from the 192
    // points before them (one generation round, truncated to the horizon).
    const std::int64_t H = 16;
    const std::int64_t eval_ctx = 192;
    auto levels = default_quantile_levels();
    double model_mse = 0, pers_mse = 0;
    double wql_20 = 0, wql_1 = 0, crps_50 = 0, crps_2 = 0;
    Rng seed_root(2);
    for (std::size_t i = 0; i < held.size(); ++i) {
        const auto& rec = held[i];
        std::vector<double> ctx(rec.values.end() - H - eval_ctx, rec.values.end() - H);
        std::vector<double> truth(rec.values.end() - H, rec.values.end());
        auto seed = seed_root.split(static_cast<std::uint64_t>(i) + 1).next_u64();

        auto ens = rolling_forecast(model, ctx, H, 20, 50, levels, seed);
        std::vector<double> med(ens.median.begin(), ens.median.end());
        model_mse += mse_mae(med, truth).first;

        auto pf = persistence_forecast(ctx, H);
        std::vector<double> pers(pf.begin(), pf.end());
        pers_mse += mse_mae(pers, truth).first;

        wql_20 += wql(ens.quantiles, truth, levels);
        crps_50 += crps_ensemble(ens.samples, truth);

        auto ens1 = rolling_forecast(model, ctx, H, 1, 50, levels, seed);
        wql_1 += wql(ens1.quantiles, truth, levels);
        auto ens2 = rolling_forecast(model, ctx, H, 20, 2, levels, seed);
        crps_2 += crps_ensemble(ens2.samples, truth);
    }
    auto n = static_cast<double>(held.size());
    model_mse /= n;
    pers_mse /= n;
    wql_20 /= n;
    wql_1 /= n;
    crps_50 /= n;
    crps_2 /= n;

    double secs = seconds_since(t0);
    double win = 1.0 - model_mse / pers_mse;
    bool pass5 = win >= 0.30 && secs < 900.0;
    report(5, "toy forecasting beats persistence", pass5,
           "model mse " + fmt("%.4f", model_mse) + " vs persistence " + fmt("%.4f", pers_mse) +
               " on 50 held-out series: " + fmt("%.1f", win * 100) +
               "% better (need >= 30%), S=20 K=50, " + fmt("%.1f", secs) + "s (limit 900s)");

    bool pass6 = wql_20 <= wql_1 && crps_50 <= crps_2;
    report(6, "calibration trend", pass6,
           "wql S=20 " + fmt("%.4f", wql_20) + " <= wql S=1 " + fmt("%.4f", wql_1) +
               ", crps K=50 " + fmt("%.4f", crps_50) + " <= crps K=2 " + fmt("%.4f", crps_2) +
               " (ties allowed)");
}

// ---- criterion 10: larger model reaches a lower converged loss ----

void criterion10() {
    auto t0 = Clock::now();
    auto corpus = make_synth_corpus(31, 500, 192, 5);

    auto run = [&](std::int64_t layers, std::int64_t dim) {
        ModelConfig cfg;
        cfg.patch_len = 16;
        cfg.horizon = 32;
        cfg.max_context = 2880;
        cfg.layers = layers;
        cfg.dim = dim;
        cfg.ffn_dim = dim * 4;
        cfg.heads = dim / 16;
        cfg.tf_dim = dim;
        cfg.tf_layers = 2;
        cfg.validate();
        auto model = init_model(cfg, HeadKind::timeflow, 7);
        TrainConfig tcfg;
        tcfg.batch_size = 8;
        tcfg.steps = 1500;
        tcfg.lr_peak = 1e-3;
        tcfg.warmup_steps = 100;
        tcfg.min_context = cfg.patch_len + cfg.horizon;
        tcfg.max_context = 160;
        tcfg.seed = 7;
        auto result = train_model(model, corpus, tcfg);
        double tail = 0;
        const std::int64_t tail_n = 150;
        for (std::int64_t i = tcfg.steps - tail_n; i < tcfg.steps; ++i)
            tail += result.records[static_cast<std::size_t>(i)].loss;
        return tail / static_cast<double>(tail_n);
    };

    double small_loss = run(2, 64);
    double large_loss = run(4, 128);
    double secs = seconds_since(t0);
    bool pass = large_loss < small_loss && secs < 1800.0;
    report(10, "scaling ordering", pass,
           "4-layer d128 smoothed loss " + fmt("%.4f", large_loss) +
               " < 2-layer d64 smoothed loss " + fmt("%.4f", small_loss) +
               " (same 1500 steps, seed 7, 500-series corpus), " + fmt("%.1f", secs) +
               "s (limit 1800s)");
}

}  // namespace

int main(int argc, char** argv) {
    std::string group = argc > 1 ? argv[1] : "fast";
    set_debug_checks(false);
    if (group == "fast") {
        criterion1();
        criterion3();
        criterion4();
        criterion7();
        criterion8();
        criterion9();
    } else if (group == "recovery") {
        criterion2();
    } else if (group == "forecast") {
        criterion5_6();
    } else if (group == "scaling") {
        criterion10();
    } else {
        std::fprintf(stderr, "usage: %s [fast|recovery|forecast|scaling]\n", argv[0]);
        return 2;
    }
    std::printf("%s: %s\n", group.c_str(), g_all_pass ? "all criteria passed" : "FAILURES");
    return g_all_pass ? 0 : 1;
}
