#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "wcmorph/errors.hpp"
#include "wcmorph/tensor.hpp"

namespace wcm {

// Single-channel intensity grid with values in [0,1].
struct Image {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> px;  // row-major

    Image() = default;
    Image(std::size_t h, std::size_t w) : height(h), width(w), px(h * w, 0.0) {}

    double& at(std::size_t y, std::size_t x) { return px[y * width + x]; }
    double at(std::size_t y, std::size_t x) const { return px[y * width + x]; }
    std::size_t numel() const { return px.size(); }

    // [1 x h x w] tensor view for the networks.
    Tensor to_tensor() const { return Tensor({1, height, width}, px); }

    static Image from_tensor(const Tensor& t) {
        if (t.rank() != 3 || t.dim(0) != 1) {
            throw DimensionError("image tensor must be [1 x h x w], got " +
                                 shape_str(t.shape()));
        }
        Image im(t.dim(1), t.dim(2));
        im.px = t.vec();
        im.require_valid();
        return im;
    }

    void clamp01() {
        for (auto& v : px) v = std::clamp(v, 0.0, 1.0);
    }

    void require_valid() const {
        for (double v : px) {
            if (!(v >= 0.0 && v <= 1.0)) {
                throw InvariantError("image pixel out of [0,1]: " + std::to_string(v));
            }
        }
    }

    bool operator==(const Image& o) const {
        return height == o.height && width == o.width && px == o.px;
    }
};

// Bilinear resample of the image shifted by (dx, dy) pixels, clamping at
// the border.
inline Image shift_bilinear(const Image& im, double dx, double dy) {
    Image out(im.height, im.width);
    const auto clamp_idx = [](double v, std::size_t n) {
        return std::clamp(v, 0.0, static_cast<double>(n - 1));
    };
    for (std::size_t y = 0; y < im.height; ++y) {
        for (std::size_t x = 0; x < im.width; ++x) {
            const double sy = clamp_idx(static_cast<double>(y) - dy, im.height);
            const double sx = clamp_idx(static_cast<double>(x) - dx, im.width);
            const auto y0 = static_cast<std::size_t>(sy);
            const auto x0 = static_cast<std::size_t>(sx);
            const std::size_t y1 = std::min(y0 + 1, im.height - 1);
            const std::size_t x1 = std::min(x0 + 1, im.width - 1);
            const double fy = sy - static_cast<double>(y0);
            const double fx = sx - static_cast<double>(x0);
            out.at(y, x) = (1 - fy) * ((1 - fx) * im.at(y0, x0) + fx * im.at(y0, x1)) +
                           fy * ((1 - fx) * im.at(y1, x0) + fx * im.at(y1, x1));
        }
    }
    return out;
}

// Binary PGM (P5), 8-bit. The comment line carries provenance metadata.
inline void save_pgm(const std::string& path, const Image& im, const std::string& comment = "") {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ArgumentError("pgm: cannot open " + path + " for writing");
    out << "P5\n";
    if (!comment.empty()) out << "# " << comment << "\n";
    out << im.width << " " << im.height << "\n255\n";
    for (double v : im.px) {
        const int q = static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
        out.put(static_cast<char>(q));
    }
    if (!out) throw ArgumentError("pgm: write failed for " + path);
}

inline Image load_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw StageDependencyError("missing image file: " + path);
    auto next_token = [&in, &path]() {
        std::string tok;
        while (true) {
            int c = in.get();
            if (c == EOF) throw FormatError(path + ": truncated PGM header");
            if (c == '#') {
                while (c != EOF && c != '\n') c = in.get();
                continue;
            }
            if (std::isspace(c)) {
                if (!tok.empty()) return tok;
                continue;
            }
            tok.push_back(static_cast<char>(c));
        }
    };
    if (next_token() != "P5") throw FormatError(path + ": not a binary PGM (P5) file");
    const std::size_t w = std::stoul(next_token());
    const std::size_t h = std::stoul(next_token());
    const std::size_t maxval = std::stoul(next_token());
    if (maxval != 255) throw FormatError(path + ": expected 8-bit PGM, maxval=255");
    // Header ends after exactly one whitespace byte (already consumed).
    Image im(h, w);
    std::vector<char> raw(w * h);
    in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
    if (in.gcount() != static_cast<std::streamsize>(raw.size())) {
        throw FormatError(path + ": truncated PGM payload");
    }
    for (std::size_t i = 0; i < im.px.size(); ++i) {
        im.px[i] = static_cast<double>(static_cast<std::uint8_t>(raw[i])) / 255.0;
    }
    return im;
}

} // namespace wcm
