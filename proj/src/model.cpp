#include "sundial/model.hpp"

namespace sundial {

std::vector<ParamSpec> param_specs(const ModelConfig& cfg, HeadKind head) {
    cfg.validate();
    std::vector<ParamSpec> specs;
    auto lin = [&](const std::string& name, std::int64_t in, std::int64_t out) {
        specs.push_back({name + ".w", {in, out}});
        specs.push_back({name + ".b", {out}});
    };
    auto norm = [&](const std::string& name, std::int64_t d) {
        specs.push_back({name + ".gamma", {d}});
        specs.push_back({name + ".beta", {d}});
    };
    const std::int64_t P = cfg.patch_len, D = cfg.dim, F = cfg.horizon, Dtf = cfg.tf_dim;

    lin("embed.fc1", 2 * P, D);
    lin("embed.fc2", D, D);
    for (std::int64_t i = 0; i < cfg.layers; ++i) {
        std::string p = "blocks." + std::to_string(i);
        norm(p + ".ln1", D);
        lin(p + ".attn.wq", D, D);
        lin(p + ".attn.wk", D, D);
        lin(p + ".attn.wv", D, D);
        lin(p + ".attn.wo", D, D);
        norm(p + ".ln2", D);
        lin(p + ".ffn.fc1", D, cfg.ffn_dim);
        lin(p + ".ffn.fc2", cfg.ffn_dim, D);
    }
    norm("final_ln", D);
    if (head == HeadKind::timeflow || head == HeadKind::diffusion) {
        lin("flow.time_fc1", kTimeFeatureDim, Dtf);
        lin("flow.time_fc2", Dtf, Dtf);
        lin("flow.in_proj", F, Dtf);
        lin("flow.cond_in", D, Dtf);
        for (std::int64_t i = 0; i < cfg.tf_layers; ++i) {
            std::string p = "flow.blocks." + std::to_string(i);
            lin(p + ".mod_shift", Dtf, Dtf);
            lin(p + ".mod_scale", Dtf, Dtf);
            lin(p + ".mod_gate", Dtf, Dtf);
            lin(p + ".fc1", Dtf, 4 * Dtf);
            lin(p + ".fc2", 4 * Dtf, Dtf);
        }
        lin("flow.out_proj", Dtf, F);
    } else {
        lin("mse.fc1", D, Dtf);
        lin("mse.fc2", Dtf, F);
    }
    return specs;
}

std::int64_t param_count(const ModelConfig& cfg, HeadKind head) {
    std::int64_t total = 0;
    for (const auto& spec : param_specs(cfg, head)) total += shape_numel(spec.shape);
    return total;
}

}  // namespace sundial
