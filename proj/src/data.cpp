#include "cmb/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "cmb/image_io.hpp"
#include "cmb/losses.hpp"
#include "cmb/serialize.hpp"

namespace fs = std::filesystem;

namespace cmb {

namespace {

struct Wave {
    double amp, fx, fy, phase;
};

Wave draw_wave(Rng& rng, int64_t size) {
    double scale = 2.0 * M_PI / static_cast<double>(size);
    return {rng.uniform(0.04, 0.12), rng.uniform(0.5, 3.0) * scale,
            rng.uniform(0.5, 3.0) * scale, rng.uniform(0.0, 2.0 * M_PI)};
}

// Textured 3-channel background: shared waves with per-channel mixing.
Tensor render_background(Rng& rng, int64_t size) {
    double base[3];
    double mix[3][2];
    for (int c = 0; c < 3; ++c) {
        base[c] = rng.uniform(0.3, 0.65);
        mix[c][0] = rng.uniform(0.5, 1.0);
        mix[c][1] = rng.uniform(0.5, 1.0);
    }
    Wave w0 = draw_wave(rng, size), w1 = draw_wave(rng, size);
    std::vector<double> img(static_cast<size_t>(3 * size * size));
    for (int64_t i = 0; i < size; ++i)
        for (int64_t j = 0; j < size; ++j) {
            double v0 = std::sin(w0.fx * j + w0.fy * i + w0.phase) * w0.amp;
            double v1 = std::sin(w1.fx * j + w1.fy * i + w1.phase) * w1.amp;
            for (int c = 0; c < 3; ++c)
                img[(c * size + i) * size + j] = base[c] + mix[c][0] * v0 + mix[c][1] * v1;
        }
    for (auto& v : img) v = std::clamp(v + rng.normal(0.0, 0.015), 0.0, 1.0);
    return Tensor::from_data({3, size, size}, std::move(img));
}

// Rectangle or ellipse support, fully inside the frame, ~3%-32% coverage.
Tensor render_patch_mask(Rng& rng, int64_t size) {
    bool ellipse = rng.uniform() < 0.5;
    double frac = rng.uniform(0.04, 0.32);
    double aspect = rng.uniform(0.6, 1.6);
    int64_t pw = std::clamp<int64_t>(
        static_cast<int64_t>(std::lround(size * std::sqrt(frac * aspect))), 4, size - 6);
    int64_t ph = std::clamp<int64_t>(
        static_cast<int64_t>(std::lround(size * std::sqrt(frac / aspect))), 4, size - 6);
    int64_t cx = rng.uniform_int(pw / 2 + 1, size - pw / 2 - 2);
    int64_t cy = rng.uniform_int(ph / 2 + 1, size - ph / 2 - 2);
    std::vector<double> mask(static_cast<size_t>(size * size), 0.0);
    double rx = pw / 2.0, ry = ph / 2.0;
    for (int64_t i = 0; i < size; ++i)
        for (int64_t j = 0; j < size; ++j) {
            bool inside;
            if (ellipse) {
                double dx = (j - cx) / rx, dy = (i - cy) / ry;
                inside = dx * dx + dy * dy <= 1.0;
            } else {
                inside = std::abs(j - cx) <= rx && std::abs(i - cy) <= ry;
            }
            if (inside) mask[i * size + j] = 1.0;
        }
    return Tensor::from_data({size, size}, std::move(mask));
}

} // namespace

SyntheticSample make_sample(uint64_t sample_seed, int64_t size, bool matched, int64_t n_tokens,
                            int64_t d_text) {
    Rng rng(sample_seed);
    SyntheticSample s;
    s.matched = matched;
    s.image = render_background(rng, size);
    s.mask = render_patch_mask(rng, size);

    bool copy_move = rng.uniform() < 0.5;
    double* img = s.image.data();
    if (copy_move) {
        int64_t span = std::max<int64_t>(2, size / 3);
        int64_t dx = rng.uniform_int(size / 8, span) * (rng.uniform() < 0.5 ? -1 : 1);
        int64_t dy = rng.uniform_int(size / 8, span) * (rng.uniform() < 0.5 ? -1 : 1);
        Tensor source = s.image.detach();
        const double* src = source.data();
        for (int64_t i = 0; i < size; ++i)
            for (int64_t j = 0; j < size; ++j) {
                if (s.mask.at({i, j}) < 0.5) continue;
                int64_t si = std::clamp<int64_t>(i + dy, 0, size - 1);
                int64_t sj = std::clamp<int64_t>(j + dx, 0, size - 1);
                for (int c = 0; c < 3; ++c)
                    img[(c * size + i) * size + j] = src[(c * size + si) * size + sj];
            }
    } else {
        // splice: independent texture
        Tensor texture = render_background(rng, size);
        const double* src = texture.data();
        for (int64_t i = 0; i < size; ++i)
            for (int64_t j = 0; j < size; ++j) {
                if (s.mask.at({i, j}) < 0.5) continue;
                for (int c = 0; c < 3; ++c)
                    img[(c * size + i) * size + j] = src[(c * size + i) * size + j];
            }
    }
    // brightening tone shift over the tampered region; one direction keeps the
    // apparent patch statistics cleanly readable at desk scale
    double gain = rng.uniform(1.18, 1.38);
    double offset = rng.uniform(0.03, 0.07);
    for (int64_t i = 0; i < size; ++i)
        for (int64_t j = 0; j < size; ++j) {
            if (s.mask.at({i, j}) < 0.5) continue;
            for (int c = 0; c < 3; ++c) {
                double& v = img[(c * size + i) * size + j];
                v = std::clamp(v * gain + offset, 0.0, 1.0);
            }
        }

    s.boundary = boundary_gt(s.mask);
    MaskGeometry geo = mask_geometry(s.mask);
    if (!matched) {
        // decoy region for mismatched text; resampled until its area is
        // clearly distinct so the pairing signal is never accidental
        MaskGeometry decoy;
        do {
            decoy = mask_geometry(render_patch_mask(rng, size));
        } while (std::abs(decoy.area - geo.area) < 0.10);
        geo = decoy;
    }
    s.text = synth_text_features(geo, n_tokens, d_text, Rng::mix(sample_seed, 101));
    return s;
}

void gen_dataset(const std::string& dir, int n, uint64_t seed, int64_t size, int64_t n_tokens,
                 int64_t d_text) {
    if (size % 16 != 0) throw ValueError("gen_dataset: size must be divisible by 16");
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create dataset directory " + dir + ": " + ec.message());

    nlohmann::ordered_json manifest;
    manifest["n"] = n;
    manifest["seed"] = seed;
    manifest["size"] = size;
    manifest["n_tokens"] = n_tokens;
    manifest["d_text"] = d_text;
    nlohmann::ordered_json samples = nlohmann::ordered_json::array();
    for (int i = 0; i < n; ++i) {
        bool matched = i % 2 == 0;
        SyntheticSample s = make_sample(Rng::mix(seed, i), size, matched, n_tokens, d_text);
        char img_name[32], mask_name[32], text_name[32];
        std::snprintf(img_name, sizeof(img_name), "img_%04d.ppm", i);
        std::snprintf(mask_name, sizeof(mask_name), "mask_%04d.pgm", i);
        std::snprintf(text_name, sizeof(text_name), "text_%04d.cmbt", i);
        save_ppm((fs::path(dir) / img_name).string(), s.image);
        save_pgm((fs::path(dir) / mask_name).string(), s.mask);
        save_tensor((fs::path(dir) / text_name).string(), s.text.t);
        nlohmann::ordered_json e;
        e["image"] = img_name;
        e["mask"] = mask_name;
        e["text"] = text_name;
        e["matched"] = matched;
        samples.push_back(e);
    }
    manifest["samples"] = samples;
    std::ofstream f(fs::path(dir) / "manifest.json");
    if (!f) throw IoError("cannot write manifest in " + dir);
    f << manifest.dump(2) << "\n";
}

std::vector<DatasetEntry> read_manifest(const std::string& dir) {
    std::ifstream f(fs::path(dir) / "manifest.json");
    if (!f) throw IoError("cannot read manifest in " + dir);
    nlohmann::json manifest = nlohmann::json::parse(f);
    std::vector<DatasetEntry> entries;
    for (const auto& e : manifest.at("samples")) {
        entries.push_back({e.at("image").get<std::string>(), e.at("mask").get<std::string>(),
                           e.at("text").get<std::string>(), e.at("matched").get<bool>()});
    }
    return entries;
}

SyntheticSample load_sample(const std::string& dir, const DatasetEntry& entry) {
    SyntheticSample s;
    s.image = load_image((fs::path(dir) / entry.image).string());
    Tensor m = load_image((fs::path(dir) / entry.mask).string());
    s.mask = Tensor::from_data({m.dim(1), m.dim(2)}, m.vec());
    for (auto& v : s.mask.vec()) v = v > 0.5 ? 1.0 : 0.0;
    s.boundary = boundary_gt(s.mask);
    s.text = load_text_features((fs::path(dir) / entry.text).string());
    s.matched = entry.matched;
    return s;
}

} // namespace cmb
