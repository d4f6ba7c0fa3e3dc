#pragma once

#include <string>

#include "cmb/features.hpp"

namespace cmb {

// Runtime-selectable module composition, mirroring the ablation rows.
enum class Ablation { B, B_RED, B_RED_ITIM, FULL };

std::string to_string(Ablation a);
Ablation ablation_from_string(const std::string& s);

struct RunConfig {
    Ablation ablation = Ablation::FULL;
    int k = 10;             // neighbor count, clamped per path to rows-1
    int64_t d_text = 32;    // text feature width (768 in the paper preset)
    int64_t d_z = 16;       // latent width
    int64_t d_c = 32;       // central feature width
    int64_t n_tokens = 4;   // text rows
    FeatureChannels channels;
    int64_t c_compressed = 64;
    int psi_depth = 2;
    uint64_t seed = 1;
    int epochs = 20;
    double lr = 1e-3;
    int batch = 2;
    double threshold = 0.5;
    int64_t image_size = 64; // dataset generation default
};

// Plain-text key=value parsing; '#' starts a comment. Unknown keys throw.
RunConfig parse_config_text(const std::string& text, RunConfig base = {});
RunConfig load_config(const std::string& path, RunConfig base = {});
void set_config_key(RunConfig& cfg, const std::string& key, const std::string& value);

// CMB_SEED, when set, overrides the configured seed.
void apply_env(RunConfig& cfg);

std::string config_to_json(const RunConfig& cfg);
RunConfig config_from_json(const std::string& json_text);

} // namespace cmb
