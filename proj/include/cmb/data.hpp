#pragma once

#include <string>
#include <vector>

#include "cmb/features.hpp"
#include "cmb/tensor.hpp"

namespace cmb {

// One tampered image: textured background with a pasted, tone-shifted patch.
// Masks cover between 1% and 40% of the pixels by construction.
struct SyntheticSample {
    Tensor image;    // [3,H,W] in [0,1]
    Tensor mask;     // [H,W] binary
    Tensor boundary; // [H,W] binary
    TextFeatures text;
    bool matched = true;
};

// Pure generator: fully determined by the sample seed.
SyntheticSample make_sample(uint64_t sample_seed, int64_t size, bool matched, int64_t n_tokens,
                            int64_t d_text);

// Writes n samples (PPM image, PGM mask, CMBT text features) plus
// manifest.json. Alternates matched/mismatched text so every prefix is
// balanced. Byte-identical across runs with the same arguments.
void gen_dataset(const std::string& dir, int n, uint64_t seed, int64_t size, int64_t n_tokens,
                 int64_t d_text);

struct DatasetEntry {
    std::string image, mask, text;
    bool matched = true;
};

std::vector<DatasetEntry> read_manifest(const std::string& dir);
SyntheticSample load_sample(const std::string& dir, const DatasetEntry& entry);

} // namespace cmb
