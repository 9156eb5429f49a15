#include "sundial/config.hpp"

#include <cmath>
#include <sstream>
#include <vector>

#include "json.hpp"
#include "sundial/error.hpp"

namespace sundial {

std::string head_kind_name(HeadKind kind) {
    switch (kind) {
        case HeadKind::timeflow: return "timeflow";
        case HeadKind::mse: return "mse";
        case HeadKind::diffusion: return "diffusion";
    }
    throw ConfigError("unknown head kind");
}

HeadKind head_kind_from_name(const std::string& name) {
    if (name == "timeflow") return HeadKind::timeflow;
    if (name == "mse") return HeadKind::mse;
    if (name == "diffusion") return HeadKind::diffusion;
    throw ConfigError("unknown head kind '" + name + "' (expected timeflow, mse, or diffusion)");
}

void ModelConfig::validate() const {
    auto positive = [](std::int64_t v, const char* name) {
        if (v <= 0) throw ConfigError(std::string(name) + " must be positive");
    };
    positive(patch_len, "patch_len");
    positive(max_context, "max_context");
    positive(horizon, "horizon");
    positive(layers, "layers");
    positive(dim, "dim");
    positive(ffn_dim, "ffn_dim");
    positive(heads, "heads");
    positive(tf_dim, "tf_dim");
    positive(tf_layers, "tf_layers");
    positive(sample_steps, "sample_steps");
    if (dim % heads != 0)
        throw ConfigError("dim " + std::to_string(dim) + " not divisible by heads " +
                          std::to_string(heads));
    if (rope_enabled && head_dim() % 2 != 0)
        throw ConfigError("rotary embedding needs an even head dim, got " +
                          std::to_string(head_dim()));
    if (max_context < patch_len)
        throw ConfigError("max_context must be at least one patch");
    if (!(rope_theta > 0)) throw ConfigError("rope_theta must be positive");
    if (!(norm_eps > 0)) throw ConfigError("norm_eps must be positive");
}

bool operator==(const ModelConfig& a, const ModelConfig& b) {
    return config_text(a, HeadKind::timeflow) == config_text(b, HeadKind::timeflow);
}

ModelConfig preset_config(const std::string& name) {
    ModelConfig c;
    if (name == "tiny") {
        c.patch_len = 4;
        c.max_context = 64;
        c.horizon = 4;
        c.layers = 1;
        c.dim = 8;
        c.ffn_dim = 32;
        c.heads = 2;
        c.tf_dim = 8;
        c.tf_layers = 1;
    } else if (name == "toy") {
        c.patch_len = 16;
        c.max_context = 2880;
        c.horizon = 32;
        c.layers = 2;
        c.dim = 64;
        c.ffn_dim = 256;
        c.heads = 4;
        c.tf_dim = 64;
        c.tf_layers = 2;
    } else if (name == "small") {
        c.patch_len = 16;
        c.max_context = 2880;
        c.horizon = 720;
        c.layers = 6;
        c.dim = 512;
        c.ffn_dim = 2048;
        c.heads = 8;
        c.tf_dim = 512;
        c.tf_layers = 3;
    } else if (name == "base") {
        c.patch_len = 16;
        c.max_context = 2880;
        c.horizon = 720;
        c.layers = 12;
        c.dim = 768;
        c.ffn_dim = 3072;
        c.heads = 12;
        c.tf_dim = 768;
        c.tf_layers = 3;
    } else if (name == "large") {
        c.patch_len = 16;
        c.max_context = 2880;
        c.horizon = 720;
        c.layers = 24;
        c.dim = 1024;
        c.ffn_dim = 4096;
        c.heads = 16;
        c.tf_dim = 1024;
        c.tf_layers = 6;
    } else {
        throw ConfigError("unknown preset '" + name + "' (expected tiny, toy, small, base, large)");
    }
    c.validate();
    return c;
}

namespace {

std::string fmt_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

}  // namespace

std::string config_text(const ModelConfig& cfg, HeadKind head) {
    std::ostringstream os;
    os << "head=" << head_kind_name(head) << "\n";
    os << "patch_len=" << cfg.patch_len << "\n";
    os << "max_context=" << cfg.max_context << "\n";
    os << "horizon=" << cfg.horizon << "\n";
    os << "layers=" << cfg.layers << "\n";
    os << "dim=" << cfg.dim << "\n";
    os << "ffn_dim=" << cfg.ffn_dim << "\n";
    os << "heads=" << cfg.heads << "\n";
    os << "tf_dim=" << cfg.tf_dim << "\n";
    os << "tf_layers=" << cfg.tf_layers << "\n";
    os << "sample_steps=" << cfg.sample_steps << "\n";
    os << "rope_enabled=" << (cfg.rope_enabled ? 1 : 0) << "\n";
    os << "pre_ln=" << (cfg.pre_ln ? 1 : 0) << "\n";
    os << "use_kv_cache=" << (cfg.use_kv_cache ? 1 : 0) << "\n";
    os << "blocked_attention=" << (cfg.blocked_attention ? 1 : 0) << "\n";
    os << "rope_theta=" << fmt_double(cfg.rope_theta) << "\n";
    os << "norm_eps=" << fmt_double(cfg.norm_eps) << "\n";
    return os.str();
}

void parse_config_text(const std::string& text, ModelConfig& cfg, HeadKind& head) {
    std::istringstream is(text);
    std::string line;
    long line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) throw ParseError("config line missing '='", line_no);
        std::string key = line.substr(0, eq);
        std::string value = line.substr(eq + 1);
        try {
            if (key == "head") head = head_kind_from_name(value);
            else if (key == "patch_len") cfg.patch_len = std::stoll(value);
            else if (key == "max_context") cfg.max_context = std::stoll(value);
            else if (key == "horizon") cfg.horizon = std::stoll(value);
            else if (key == "layers") cfg.layers = std::stoll(value);
            else if (key == "dim") cfg.dim = std::stoll(value);
            else if (key == "ffn_dim") cfg.ffn_dim = std::stoll(value);
            else if (key == "heads") cfg.heads = std::stoll(value);
            else if (key == "tf_dim") cfg.tf_dim = std::stoll(value);
            else if (key == "tf_layers") cfg.tf_layers = std::stoll(value);
            else if (key == "sample_steps") cfg.sample_steps = std::stoll(value);
            else if (key == "rope_enabled") cfg.rope_enabled = std::stoll(value) != 0;
            else if (key == "pre_ln") cfg.pre_ln = std::stoll(value) != 0;
            else if (key == "use_kv_cache") cfg.use_kv_cache = std::stoll(value) != 0;
            else if (key == "blocked_attention") cfg.blocked_attention = std::stoll(value) != 0;
            else if (key == "rope_theta") cfg.rope_theta = std::stod(value);
            else if (key == "norm_eps") cfg.norm_eps = std::stod(value);
            else throw ParseError("unknown config key '" + key + "'", line_no);
        } catch (const std::invalid_argument&) {
            throw ParseError("bad value for config key '" + key + "'", line_no);
        } catch (const std::out_of_range&) {
            throw ParseError("out-of-range value for config key '" + key + "'", line_no);
        }
    }
    cfg.validate();
}

ModelConfig config_from_json_text(const std::string& json_text, HeadKind* head) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("config json: ") + e.what());
    }
    if (!j.is_object()) throw ParseError("config json: top level must be an object");

    ModelConfig cfg;
    if (j.contains("preset")) {
        cfg = preset_config(j["preset"].get<std::string>());
        j.erase("preset");
    }
    for (auto& [key, value] : j.items()) {
        try {
            if (key == "head") {
                if (head) *head = head_kind_from_name(value.get<std::string>());
            } else if (key == "patch_len") cfg.patch_len = value.get<std::int64_t>();
            else if (key == "max_context") cfg.max_context = value.get<std::int64_t>();
            else if (key == "horizon") cfg.horizon = value.get<std::int64_t>();
            else if (key == "layers") cfg.layers = value.get<std::int64_t>();
            else if (key == "dim") cfg.dim = value.get<std::int64_t>();
            else if (key == "ffn_dim") cfg.ffn_dim = value.get<std::int64_t>();
            else if (key == "heads") cfg.heads = value.get<std::int64_t>();
            else if (key == "tf_dim") cfg.tf_dim = value.get<std::int64_t>();
            else if (key == "tf_layers") cfg.tf_layers = value.get<std::int64_t>();
            else if (key == "sample_steps") cfg.sample_steps = value.get<std::int64_t>();
            else if (key == "rope_enabled") cfg.rope_enabled = value.get<bool>();
            else if (key == "pre_ln") cfg.pre_ln = value.get<bool>();
            else if (key == "use_kv_cache") cfg.use_kv_cache = value.get<bool>();
            else if (key == "blocked_attention") cfg.blocked_attention = value.get<bool>();
            else if (key == "rope_theta") cfg.rope_theta = value.get<double>();
            else if (key == "norm_eps") cfg.norm_eps = value.get<double>();
            else throw ConfigError("unknown config key '" + key + "'");
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config key '" + key + "': " + e.what());
        }
    }
    cfg.validate();
    return cfg;
}

std::string config_to_json_text(const ModelConfig& cfg, HeadKind head) {
    nlohmann::json j;
    j["head"] = head_kind_name(head);
    j["patch_len"] = cfg.patch_len;
    j["max_context"] = cfg.max_context;
    j["horizon"] = cfg.horizon;
    j["layers"] = cfg.layers;
    j["dim"] = cfg.dim;
    j["ffn_dim"] = cfg.ffn_dim;
    j["heads"] = cfg.heads;
    j["tf_dim"] = cfg.tf_dim;
    j["tf_layers"] = cfg.tf_layers;
    j["sample_steps"] = cfg.sample_steps;
    j["rope_enabled"] = cfg.rope_enabled;
    j["pre_ln"] = cfg.pre_ln;
    j["use_kv_cache"] = cfg.use_kv_cache;
    j["blocked_attention"] = cfg.blocked_attention;
    j["rope_theta"] = cfg.rope_theta;
    j["norm_eps"] = cfg.norm_eps;
    return j.dump(2) + "\n";
}

}  // namespace sundial
