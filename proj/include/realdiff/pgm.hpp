#pragma once

#include <string>
#include <vector>

#include "realdiff/errors.hpp"

namespace realdiff {

// Row-major grayscale image with pixels in [0,1].
struct GrayImage {
    int width = 0;
    int height = 0;
    std::vector<double> pixels;

    double at(int y, int x) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
};

// Binary PGM (P5), 8-bit. Pixels quantize to the /255 grid on save, so images
// generated on that grid round-trip losslessly.
void save_pgm(const std::string& path, const GrayImage& img);
GrayImage load_pgm(const std::string& path);

}  // namespace realdiff
