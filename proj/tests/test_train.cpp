#include <cmath>
#include <fstream>
#include <set>

#include "doctest.h"
#include "sundial/backbone.hpp"
#include "sundial/timeflow.hpp"
#include "sundial/train.hpp"

using namespace sundial;

namespace {

ModelConfig train_test_config() {
    auto cfg = preset_config("tiny");  // P=4, F=4, D=8
    return cfg;
}

std::vector<SeriesRecord> toy_corpus(int n, std::int64_t len, std::uint64_t seed) {
    std::vector<SeriesRecord> out;
    Rng rng(seed);
    for (int i = 0; i < n; ++i) {
        SeriesRecord rec;
        rec.id = "toy-" + std::to_string(i);
        double phase = rng.uniform(0.0, 6.28);
        for (std::int64_t t = 0; t < len; ++t)
            rec.values.push_back(
                static_cast<float>(std::sin(0.3 * static_cast<double>(t) + phase)) +
                static_cast<float>(rng.normal() * 0.05));
        out.push_back(std::move(rec));
    }
    return out;
}

TrainConfig toy_train_config(const ModelConfig& mcfg) {
    TrainConfig t;
    t.batch_size = 4;
    t.steps = 20;
    t.lr_peak = 1e-3;
    t.warmup_steps = 5;
    t.min_context = mcfg.patch_len + mcfg.horizon;
    t.max_context = std::min<std::int64_t>(mcfg.max_context, 48);
    t.seed = 11;
    return t;
}

}  // namespace

TEST_CASE("train config validation") {
    auto mcfg = train_test_config();
    auto t = toy_train_config(mcfg);
    CHECK_NOTHROW(t.validate(mcfg));
    auto bad = t;
    bad.min_context = mcfg.patch_len + mcfg.horizon - 1;
    CHECK_THROWS_AS(bad.validate(mcfg), ConfigError);
    bad = t;
    bad.max_context = mcfg.max_context + 1;
    CHECK_THROWS_AS(bad.validate(mcfg), ConfigError);
    bad = t;
    bad.grad_clip_norm = 0;
    CHECK_THROWS_AS(bad.validate(mcfg), ConfigError);
}

TEST_CASE("make_batch: window bounds, targets from the grid, determinism") {
    auto mcfg = train_test_config();
    auto tcfg = toy_train_config(mcfg);
    auto corpus = toy_corpus(3, 64, 5);
    Rng rng(9);
    auto batch = make_batch(corpus, mcfg, tcfg, rng);
    REQUIRE(batch.samples.size() == 4);
    REQUIRE(batch.targets.shape()[0] == batch.total_positions);
    REQUIRE(batch.targets.shape()[1] == mcfg.horizon);

    std::int64_t row = 0;
    for (std::size_t e = 0; e < batch.samples.size(); ++e) {
        const auto& s = batch.samples[e];
        REQUIRE(!batch.positions[e].empty());
        for (auto i : batch.positions[e]) {
            std::int64_t start = (i + 1) * mcfg.patch_len;
            REQUIRE(start + mcfg.horizon <= s.n_tokens * mcfg.patch_len);
            for (std::int64_t j = 0; j < mcfg.horizon; ++j)
                CHECK(batch.targets.at({row, j}) == s.grid[static_cast<std::size_t>(start + j)]);
            ++row;
        }
    }
    CHECK(row == batch.total_positions);

    Rng rng2(9);
    auto batch2 = make_batch(corpus, mcfg, tcfg, rng2);
    CHECK(batch2.targets.data() == batch.targets.data());
    for (std::size_t e = 0; e < batch.samples.size(); ++e)
        CHECK(batch2.samples[e].patches.data() == batch.samples[e].patches.data());
}

TEST_CASE("make_batch: normalization stats exclude the final horizon") {
    auto mcfg = train_test_config();  // P=4, F=4
    auto tcfg = toy_train_config(mcfg);
    tcfg.batch_size = 2;
    tcfg.min_context = 12;
    tcfg.max_context = 12;
    // Single 12-point series forces one possible window; spike the final
    // horizon so including it in the stats would shift them noticeably.
    SeriesRecord rec;
    rec.id = "spiked";
    for (int t = 0; t < 8; ++t) rec.values.push_back(static_cast<float>(t % 3));
    for (int t = 0; t < 4; ++t) rec.values.push_back(100.0f);
    Rng rng(3);
    auto batch = make_batch({rec}, mcfg, tcfg, rng);
    std::vector<double> history(rec.values.begin(), rec.values.end() - mcfg.horizon);
    auto expected = compute_stats(history);
    for (const auto& s : batch.samples) {
        CHECK(s.stats.mean == doctest::Approx(expected.mean));
        CHECK(s.stats.std == doctest::Approx(expected.std));
        // The spike stays in the grid as a target, normalized by history stats.
        CHECK(s.grid.back() ==
              doctest::Approx((100.0 - expected.mean) / expected.std).epsilon(1e-5));
    }
}

TEST_CASE("make_batch: forced single window and error cases") {
    auto mcfg = train_test_config();
    auto tcfg = toy_train_config(mcfg);
    tcfg.min_context = 8;
    tcfg.max_context = 8;
    std::vector<SeriesRecord> corpus = {{"only", std::vector<float>(8, 0.0f), std::nullopt}};
    corpus[0].values[3] = 1.0f;
    Rng rng(1);
    auto batch = make_batch(corpus, mcfg, tcfg, rng);
    for (const auto& s : batch.samples) CHECK(s.n_tokens == 2);

    CHECK_THROWS_AS(make_batch({}, mcfg, tcfg, rng), DataError);
    std::vector<SeriesRecord> shorties = {{"s", std::vector<float>(7, 1.0f), std::nullopt}};
    CHECK_THROWS_AS(make_batch(shorties, mcfg, tcfg, rng), DataError);
}

TEST_CASE("make_batch: uniform sampling touches every series") {
    auto mcfg = train_test_config();
    auto tcfg = toy_train_config(mcfg);
    tcfg.batch_size = 1;
    auto corpus = toy_corpus(10, 32, 3);
    Rng rng(42);
    std::set<std::string> seen;
    for (int draw = 0; draw < 1000; ++draw) {
        auto b = make_batch(corpus, mcfg, tcfg, rng);
        // identify the series by matching the window against each candidate
        for (const auto& rec : corpus) {
            const auto& g = b.samples[0].grid;
            auto denorm0 =
                denormalize(std::vector<double>(g.end() - 4, g.end()), b.samples[0].stats);
            for (std::size_t off = 0; off + 4 <= rec.values.size(); ++off) {
                bool match = true;
                for (std::size_t j = 0; j < 4; ++j)
                    if (std::abs(rec.values[off + j] - denorm0[j]) > 1e-4) match = false;
                if (match) {
                    seen.insert(rec.id);
                    break;
                }
            }
        }
        if (seen.size() == corpus.size()) break;
    }
    // P(miss a series in 1000 uniform draws) = 10 * 0.9^1000 << 1e-3
    CHECK(seen.size() == corpus.size());
}

TEST_CASE("lr schedule: warmup, peak, cosine tail at a tenth of peak") {
    TrainConfig t;
    t.lr_peak = 1.0;
    t.warmup_steps = 10;
    t.steps = 110;
    CHECK(lr_at(0, t) == doctest::Approx(0.1));
    CHECK(lr_at(9, t) == doctest::Approx(1.0));
    CHECK(lr_at(10, t) == doctest::Approx(1.0));
    CHECK(lr_at(109, t) == doctest::Approx(0.1));
    double mid = lr_at((10 + 109) / 2, t);
    CHECK(mid < 1.0);
    CHECK(mid > 0.1);
    for (std::int64_t s = 10; s < 109; ++s) CHECK(lr_at(s, t) >= lr_at(s + 1, t));
}

TEST_CASE("lr=0 step leaves parameters bit-identical") {
    auto mcfg = train_test_config();
    auto tcfg = toy_train_config(mcfg);
    tcfg.lr_peak = 0;
    auto model = init_model(mcfg, HeadKind::timeflow, 3);
    auto corpus = toy_corpus(2, 32, 7);
    Rng rng(2);
    auto batch = make_batch(corpus, mcfg, tcfg, rng);
    std::vector<std::vector<float>> before;
    for (auto& [name, p] : named_params(model)) {
        (void)name;
        before.push_back(p->data());
    }
    auto opt = make_adam_state(model);
    Rng draw(4);
    auto res = train_step(model, batch, opt, tcfg, 0, draw);
    CHECK(std::isfinite(res.loss));
    CHECK(res.grad_norm > 0);
    std::size_t i = 0;
    for (auto& [name, p] : named_params(model)) {
        (void)name;
        CHECK(p->data() == before[i++]);
    }
}

TEST_CASE("adam drives a quadratic to its optimum") {
    // single weight, loss (w*1 - 3)^2 via the mse head on a stub batch is
    // overkill; drive the optimizer directly through a tiny custom loop
    TrainConfig t;
    t.lr_peak = 0.05;
    t.warmup_steps = 1;
    t.steps = 200;
    t.weight_decay = 0;
    t.grad_clip_norm = 1e9;
    double w = 5.0, m = 0, v = 0;
    for (int step = 0; step < 200; ++step) {
        double g = 2.0 * (w - 3.0);
        m = 0.9 * m + 0.1 * g;
        v = 0.95 * v + 0.05 * g * g;
        double bc1 = 1.0 - std::pow(0.9, step + 1);
        double bc2 = 1.0 - std::pow(0.95, step + 1);
        w -= lr_at(step, t) * (m / bc1) / (std::sqrt(v / bc2) + 1e-8);
    }
    CHECK(std::abs(w - 3.0) < 1e-3);
}

TEST_CASE("overfitting one repeated batch drives the loss down") {
    auto mcfg = train_test_config();
    auto tcfg = toy_train_config(mcfg);
    tcfg.lr_peak = 3e-3;
    tcfg.steps = 100;
    tcfg.warmup_steps = 10;
    auto model = init_model(mcfg, HeadKind::timeflow, 8);
    auto corpus = toy_corpus(2, 32, 7);
    Rng rng(6);
    auto batch = make_batch(corpus, mcfg, tcfg, rng);
    auto opt = make_adam_state(model);
    std::vector<double> losses;
    Rng draw(12);
    for (int step = 0; step < 100; ++step)
        losses.push_back(train_step(model, batch, opt, tcfg, step, draw).loss);
    auto window_mean = [&](int lo) {
        double acc = 0;
        for (int i = lo; i < lo + 20; ++i) acc += losses[static_cast<std::size_t>(i)];
        return acc / 20.0;
    };
    CHECK(window_mean(80) < window_mean(0));
    CHECK(window_mean(60) < window_mean(0));
}

TEST_CASE("gradient clipping bounds the applied norm") {
    auto mcfg = train_test_config();
    auto tcfg = toy_train_config(mcfg);
    tcfg.grad_clip_norm = 1e-3;  // force clipping
    auto model = init_model(mcfg, HeadKind::timeflow, 9);
    auto corpus = toy_corpus(2, 32, 7);
    Rng rng(6);
    auto batch = make_batch(corpus, mcfg, tcfg, rng);
    auto opt = make_adam_state(model);
    Rng draw(12);
    auto res = train_step(model, batch, opt, tcfg, 0, draw);
    CHECK(res.grad_norm > tcfg.grad_clip_norm);  // reported norm is pre-clip
}

TEST_CASE("identical seed and corpus give a bit-identical loss trajectory") {
    auto mcfg = train_test_config();
    auto tcfg = toy_train_config(mcfg);
    tcfg.steps = 8;
    auto corpus = toy_corpus(3, 48, 13);
    auto m1 = init_model(mcfg, HeadKind::timeflow, 5);
    auto m2 = init_model(mcfg, HeadKind::timeflow, 5);
    auto r1 = train_model(m1, corpus, tcfg);
    auto r2 = train_model(m2, corpus, tcfg);
    REQUIRE(r1.records.size() == r2.records.size());
    for (std::size_t i = 0; i < r1.records.size(); ++i) {
        CHECK(r1.records[i].loss == r2.records[i].loss);
        CHECK(r1.records[i].grad_norm == r2.records[i].grad_norm);
        CHECK(r1.records[i].lr == r2.records[i].lr);
    }
    auto p1 = named_params(m1);
    auto p2 = named_params(m2);
    for (std::size_t i = 0; i < p1.size(); ++i) CHECK(p1[i].second->data() == p2[i].second->data());
}

TEST_CASE("objective mismatch and mse objective path") {
    auto mcfg = train_test_config();
    auto tcfg = toy_train_config(mcfg);
    tcfg.steps = 2;
    auto corpus = toy_corpus(2, 32, 7);
    auto model = init_model(mcfg, HeadKind::mse, 5);
    CHECK_THROWS_AS(train_model(model, corpus, tcfg), ConfigError);
    tcfg.objective = HeadKind::mse;
    auto res = train_model(model, corpus, tcfg);
    CHECK(res.records.size() == 2);
    for (const auto& r : res.records) CHECK(std::isfinite(r.loss));
}

TEST_CASE("diffusion objective trains") {
    auto mcfg = train_test_config();
    auto tcfg = toy_train_config(mcfg);
    tcfg.steps = 2;
    tcfg.objective = HeadKind::diffusion;
    auto corpus = toy_corpus(2, 32, 7);
    auto model = init_model(mcfg, HeadKind::diffusion, 5);
    auto res = train_model(model, corpus, tcfg);
    CHECK(res.records.size() == 2);
    for (const auto& r : res.records) CHECK(std::isfinite(r.loss));
}

TEST_CASE("grad check passes on the tiny config and is deterministic") {
    auto mcfg = preset_config("tiny");
    auto model = init_model(mcfg, HeadKind::timeflow, 17);
    TrainConfig tcfg;
    tcfg.batch_size = 2;
    tcfg.min_context = mcfg.patch_len + mcfg.horizon;
    tcfg.max_context = 24;
    auto corpus = toy_corpus(2, 32, 21);
    Rng rng(3);
    auto batch = make_batch(corpus, mcfg, tcfg, rng);
    auto r1 = grad_check(model, batch, 64, 1e-3, 99);
    CHECK(r1.pass);
    CHECK(r1.max_rel_err < 1e-3);
    auto r2 = grad_check(model, batch, 64, 1e-3, 99);
    CHECK(r1.max_rel_err == r2.max_rel_err);
    CHECK(r1.worst_param == r2.worst_param);
}

TEST_CASE("zero-gated mlp weights get exactly zero gradient at init") {
    auto mcfg = preset_config("tiny");
    auto model = init_model(mcfg, HeadKind::timeflow, 23);
    TrainConfig tcfg;
    tcfg.batch_size = 2;
    tcfg.min_context = mcfg.patch_len + mcfg.horizon;
    tcfg.max_context = 24;
    auto corpus = toy_corpus(2, 32, 21);
    Rng rng(3);
    auto batch = make_batch(corpus, mcfg, tcfg, rng);

    auto params = named_params(model);
    for (auto& [name, p] : params) {
        (void)name;
        p->zero_grad();
    }
    auto draws = draw_flow(Rng(77), batch.total_positions, mcfg.horizon);
    std::vector<Tensor> rows;
    for (std::size_t e = 0; e < batch.samples.size(); ++e)
        rows.push_back(take_rows(encode(model, batch.samples[e].patches, batch.samples[e].mask),
                                 batch.positions[e]));
    auto h = concat_rows<float>(rows);
    auto loss = timeflow_loss(model.flow, h, batch.targets, draws.t, draws.y0, mcfg.norm_eps);
    backward(loss);

    // the gate output is zero at init, so fc1/fc2/mod_shift/mod_scale sit
    // behind a zero multiplier; mod_gate itself must still receive signal
    for (auto& [name, p] : params) {
        bool gated = name.find("flow.blocks.") == 0 &&
                     (name.find(".fc1.") != std::string::npos ||
                      name.find(".fc2.") != std::string::npos ||
                      name.find(".mod_shift.") != std::string::npos ||
                      name.find(".mod_scale.") != std::string::npos);
        if (gated) {
            for (float g : p->impl()->grad) CHECK(g == 0.0f);
        }
        if (name.find(".mod_gate.w") != std::string::npos) {
            double acc = 0;
            for (float g : p->impl()->grad) acc += std::abs(g);
            CHECK(acc > 0);
        }
    }
}

TEST_CASE("loss log is written with stable formatting") {
    std::vector<TrainLogRecord> recs = {{0, 0.5, 1e-3, 2.25}, {1, 0.25, 9.87654321e-4, 1.0}};
    auto path = std::string("/tmp/sundial_test_loss_log.csv");
    write_loss_log(recs, path);
    std::ifstream in(path);
    std::string l1, l2;
    std::getline(in, l1);
    std::getline(in, l2);
    CHECK(l1 == "0,0.5,0.001,2.25");
    CHECK(l2 == "1,0.25,0.000987654321,1");
}

TEST_CASE("fine_tune with zero steps leaves weights identical") {
    auto mcfg = train_test_config();
    auto tcfg = toy_train_config(mcfg);
    tcfg.steps = 0;
    auto model = init_model(mcfg, HeadKind::timeflow, 3);
    std::vector<std::vector<float>> before;
    for (auto& [name, p] : named_params(model)) {
        (void)name;
        before.push_back(p->data());
    }
    auto corpus = toy_corpus(2, 32, 7);
    auto res = fine_tune(model, corpus, tcfg);
    CHECK(res.records.empty());
    std::size_t i = 0;
    for (auto& [name, p] : named_params(model)) {
        (void)name;
        CHECK(p->data() == before[i++]);
    }
}
