#pragma once

#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "fcvit/model.hpp"

namespace fcvit {

NLOHMANN_JSON_SERIALIZE_ENUM(ContextMode, {
                                              {ContextMode::none, "none"},
                                              {ContextMode::plain, "plain"},
                                              {ContextMode::bottleneck, "bottleneck"},
                                          })

inline void to_json(nlohmann::json& j, const StageConfig& s) {
    j = nlohmann::json{{"dim", s.dim},
                       {"depth", s.depth},
                       {"mlp_ratio", s.mlp_ratio},
                       {"patch_kernel", s.patch_kernel},
                       {"patch_stride", s.patch_stride},
                       {"mixer_kernel", s.mixer_kernel},
                       {"groups", s.groups},
                       {"bottleneck_r", s.bottleneck_r},
                       {"mixer_repeats", s.mixer_repeats},
                       {"context", s.context},
                       {"dynamic_context", s.dynamic_context},
                       {"mixer_pointwise", s.mixer_pointwise}};
}

// Missing optional fields keep their defaults.
inline void from_json(const nlohmann::json& j, StageConfig& s) {
    StageConfig d;
    s.dim = j.at("dim").get<std::size_t>();
    s.depth = j.at("depth").get<std::size_t>();
    s.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
    s.patch_kernel = j.value("patch_kernel", d.patch_kernel);
    s.patch_stride = j.value("patch_stride", d.patch_stride);
    s.mixer_kernel = j.value("mixer_kernel", d.mixer_kernel);
    s.groups = j.value("groups", d.groups);
    s.bottleneck_r = j.value("bottleneck_r", d.bottleneck_r);
    s.mixer_repeats = j.value("mixer_repeats", d.mixer_repeats);
    s.context = j.value("context", d.context);
    s.dynamic_context = j.value("dynamic_context", d.dynamic_context);
    s.mixer_pointwise = j.value("mixer_pointwise", d.mixer_pointwise);
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"name", c.name},
                       {"stages", c.stages},
                       {"num_classes", c.num_classes},
                       {"in_channels", c.in_channels},
                       {"isotropic", c.isotropic},
                       {"iso_patch", c.iso_patch}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    c.name = j.value("name", std::string{});
    c.stages = j.at("stages").get<std::vector<StageConfig>>();
    c.num_classes = j.value("num_classes", std::size_t{1000});
    c.in_channels = j.value("in_channels", std::size_t{3});
    c.isotropic = j.value("isotropic", false);
    c.iso_patch = j.value("iso_patch", std::size_t{16});
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
        c = j.get<ModelConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("invalid model config: ") + e.what());
    }
    c.validate();
    return c;
}

/// Reads a JSON config file, or resolves a preset name.
inline ModelConfig load_config(const std::string& preset_or_path) {
    for (const auto& n : presets::names()) {
        if (n == preset_or_path) return presets::by_name(n);
    }
    std::ifstream in(preset_or_path);
    if (!in) throw ConfigError("no preset or config file named '" + preset_or_path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
    return config_from_json(j);
}

}  // namespace fcvit
