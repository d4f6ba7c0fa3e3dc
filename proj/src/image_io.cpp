#include "cmb/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "cmb/errors.hpp"

namespace cmb {

namespace {

// Skips whitespace and '#' comment lines between header tokens.
int next_header_int(std::istream& f, const std::string& path) {
    int c = f.get();
    while (c != EOF && (std::isspace(c) || c == '#')) {
        if (c == '#')
            while (c != EOF && c != '\n') c = f.get();
        c = f.get();
    }
    if (c == EOF || !std::isdigit(c)) throw FormatError(path + ": malformed netpbm header");
    int value = 0;
    while (c != EOF && std::isdigit(c)) {
        value = value * 10 + (c - '0');
        c = f.get();
    }
    return value;
}

uint8_t quantize(double v) {
    double q = std::round(v * 255.0);
    return static_cast<uint8_t>(std::clamp(q, 0.0, 255.0));
}

} // namespace

Tensor load_image(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for read: " + path);
    char p = 0, kind = 0;
    f.get(p);
    f.get(kind);
    if (p != 'P' || (kind != '5' && kind != '6'))
        throw FormatError(path + ": expected P5 or P6 netpbm");
    int channels = kind == '6' ? 3 : 1;
    int w = next_header_int(f, path);
    int h = next_header_int(f, path);
    int maxval = next_header_int(f, path);
    if (maxval != 255) throw FormatError(path + ": only 8-bit netpbm supported");
    std::vector<uint8_t> raw(static_cast<size_t>(w) * h * channels);
    f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (f.gcount() != static_cast<std::streamsize>(raw.size()))
        throw FormatError(path + ": truncated pixel data");
    // Interleaved bytes to planar [C,H,W] floats.
    std::vector<double> data(raw.size());
    for (int64_t i = 0; i < h; ++i)
        for (int64_t j = 0; j < w; ++j)
            for (int c = 0; c < channels; ++c)
                data[(c * h + i) * w + j] = raw[(i * w + j) * channels + c] / 255.0;
    return Tensor::from_data({channels, h, w}, std::move(data));
}

void save_ppm(const std::string& path, const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != 3)
        throw ShapeError("save_ppm: need [3,H,W], got " + shape_str(image.shape()));
    int64_t h = image.dim(1), w = image.dim(2);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for write: " + path);
    f << "P6\n" << w << " " << h << "\n255\n";
    const double* d = image.data();
    std::vector<uint8_t> raw(static_cast<size_t>(h) * w * 3);
    for (int64_t i = 0; i < h; ++i)
        for (int64_t j = 0; j < w; ++j)
            for (int c = 0; c < 3; ++c)
                raw[(i * w + j) * 3 + c] = quantize(d[(c * h + i) * w + j]);
    f.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!f) throw IoError("write failed: " + path);
}

void save_pgm(const std::string& path, const Tensor& map) {
    int64_t h, w;
    if (map.rank() == 2) {
        h = map.dim(0);
        w = map.dim(1);
    } else if (map.rank() == 3 && map.dim(0) == 1) {
        h = map.dim(1);
        w = map.dim(2);
    } else {
        throw ShapeError("save_pgm: need [H,W] or [1,H,W], got " + shape_str(map.shape()));
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for write: " + path);
    f << "P5\n" << w << " " << h << "\n255\n";
    const double* d = map.data();
    std::vector<uint8_t> raw(static_cast<size_t>(h) * w);
    for (size_t i = 0; i < raw.size(); ++i) raw[i] = quantize(d[i]);
    f.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!f) throw IoError("write failed: " + path);
}

} // namespace cmb
