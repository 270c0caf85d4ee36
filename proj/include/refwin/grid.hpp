#pragma once

#include <vector>

#include "refwin/common.hpp"

namespace refwin {

/// Dense frames x height x width x channels tensor, row-major with channels
/// fastest. Latent video clips, single reference frames (frames == 1) and
/// entity patterns all use this layout.
struct TokenGrid {
    int frames = 0;
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<double> data;

    TokenGrid() = default;
    TokenGrid(int f, int h, int w, int c)
        : frames(f), height(h), width(w), channels(c),
          data(static_cast<size_t>(f) * h * w * c, 0.0) {
        require(f >= 1 && h >= 1 && w >= 1 && c >= 1, "grid dims must be >= 1");
    }

    size_t size() const { return data.size(); }

    size_t offset(int f, int y, int x, int c) const {
        return ((static_cast<size_t>(f) * height + y) * width + x) * channels + c;
    }

    double& at(int f, int y, int x, int c) { return data[offset(f, y, x, c)]; }
    double at(int f, int y, int x, int c) const { return data[offset(f, y, x, c)]; }

    bool same_shape(const TokenGrid& o) const {
        return frames == o.frames && height == o.height && width == o.width &&
               channels == o.channels;
    }

    TokenGrid frame_slice(int f) const {
        TokenGrid out(1, height, width, channels);
        size_t stride = static_cast<size_t>(height) * width * channels;
        std::copy(data.begin() + f * stride, data.begin() + (f + 1) * stride, out.data.begin());
        return out;
    }
};

TokenGrid gaussian_grid(int f, int h, int w, int c, Rng& rng, double sigma = 1.0);

}  // namespace refwin
