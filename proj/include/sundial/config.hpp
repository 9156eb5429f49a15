#pragma once

#include <cstdint>
#include <string>

namespace sundial {

enum class HeadKind { timeflow, mse, diffusion };

std::string head_kind_name(HeadKind kind);
HeadKind head_kind_from_name(const std::string& name);

// Architecture and inference hyperparameters. Defaults are the toy scale.
struct ModelConfig {
    std::int64_t patch_len = 16;     // P, time points per token
    std::int64_t max_context = 2880; // longest raw context in time points
    std::int64_t horizon = 32;       // F, points predicted per generation
    std::int64_t layers = 2;
    std::int64_t dim = 64;
    std::int64_t ffn_dim = 256;
    std::int64_t heads = 4;
    std::int64_t tf_dim = 64;   // width of the flow head
    std::int64_t tf_layers = 2; // residual blocks in the flow head
    std::int64_t sample_steps = 50;
    bool rope_enabled = true;
    bool pre_ln = true;
    bool use_kv_cache = true;
    bool blocked_attention = false; // inference-only attention accumulation strategy
    double rope_theta = 10000.0;
    double norm_eps = 1e-5;

    std::int64_t head_dim() const { return dim / heads; }
    std::int64_t max_tokens() const { return (max_context + patch_len - 1) / patch_len; }

    void validate() const;
};

bool operator==(const ModelConfig& a, const ModelConfig& b);

// Named presets: tiny, toy, small, base, large.
ModelConfig preset_config(const std::string& name);

// Canonical key=value text, one pair per line, fixed order. Embedded in
// checkpoints and compared verbatim on load.
std::string config_text(const ModelConfig& cfg, HeadKind head);
void parse_config_text(const std::string& text, ModelConfig& cfg, HeadKind& head);

// JSON object (file contents) -> config; unknown keys are an error.
ModelConfig config_from_json_text(const std::string& json_text, HeadKind* head = nullptr);
std::string config_to_json_text(const ModelConfig& cfg, HeadKind head);

}  // namespace sundial
