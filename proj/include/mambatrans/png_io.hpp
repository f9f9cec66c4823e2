#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mambatrans/common.hpp"

namespace mambatrans {

// 8-bit image, row-major interleaved; channels is 1 (gray) or 3 (RGB).
struct ImageU8 {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<uint8_t> pixels;
};

void write_png(const std::string& path, const ImageU8& img);
ImageU8 read_png(const std::string& path);

}  // namespace mambatrans
