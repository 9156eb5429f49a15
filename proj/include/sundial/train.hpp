#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sundial/data.hpp"
#include "sundial/model.hpp"
#include "sundial/tokenizer.hpp"

namespace sundial {

struct TrainConfig {
    std::int64_t batch_size = 8;
    std::int64_t steps = 100;
    double lr_peak = 1e-3;
    std::int64_t warmup_steps = 10;
    double weight_decay = 0.01;
    double grad_clip_norm = 1.0;
    std::int64_t min_context = 0;  // time points
    std::int64_t max_context = 0;  // time points
    HeadKind objective = HeadKind::timeflow;
    std::uint64_t seed = 0;

    void validate(const ModelConfig& mcfg) const;
};

// one training batch: tokenized windows plus, per window, the token
// positions that carry a full F-point target inside the window
struct TrainBatch {
    std::vector<SeriesSample> samples;
    std::vector<std::vector<std::int64_t>> positions;
    Tensor targets;  // [total eligible positions, F], normalized
    std::int64_t total_positions = 0;
};

TrainBatch make_batch(const std::vector<SeriesRecord>& corpus, const ModelConfig& mcfg,
                      const TrainConfig& tcfg, Rng& rng);

// linear warmup to lr_peak, then cosine decay to lr_peak/10 at the last step
double lr_at(std::int64_t step, const TrainConfig& tcfg);

struct AdamState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    std::int64_t t = 0;
};

AdamState make_adam_state(SundialModelT<float>& model);

struct StepResult {
    double loss = 0;
    double grad_norm = 0;  // pre-clip
    double lr = 0;
};

StepResult train_step(SundialModelT<float>& model, const TrainBatch& batch, AdamState& opt,
                      const TrainConfig& tcfg, std::int64_t step, Rng& draw_rng);

struct TrainLogRecord {
    std::int64_t step = 0;
    double loss = 0;
    double lr = 0;
    double grad_norm = 0;
};

struct TrainResult {
    std::vector<TrainLogRecord> records;
};

TrainResult train_model(SundialModelT<float>& model, const std::vector<SeriesRecord>& corpus,
                        const TrainConfig& tcfg);

// same loop from loaded weights; fresh moments, lr_peak already lowered by the caller
TrainResult fine_tune(SundialModelT<float>& model, const std::vector<SeriesRecord>& corpus,
                      const TrainConfig& tcfg);

void write_loss_log(const std::vector<TrainLogRecord>& records, const std::string& path);

struct GradCheckReport {
    double max_rel_err = 0;
    std::int64_t n_checked = 0;
    std::string worst_param;
    bool pass = false;
};

// analytic gradients of the flow-matching training loss vs central finite
// differences at f64, over a random subset of parameters with frozen draws
GradCheckReport grad_check(const SundialModelT<float>& model, const TrainBatch& batch,
                           std::int64_t n_sample, double tolerance, std::uint64_t seed);

}  // namespace sundial
