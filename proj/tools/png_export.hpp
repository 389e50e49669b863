#pragma once

// 8-bit grayscale PNG export; [-1, 1] maps linearly onto 0..255.

#include <png.h>

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "mode/tensor.hpp"

namespace mode::tools {

inline std::vector<unsigned char> to_gray8(const Tensor<float>& image) {
    std::vector<unsigned char> px(image.dim(1) * image.dim(2));
    for (std::size_t i = 0; i < px.size(); ++i) {
        const double v = std::lround((std::clamp(static_cast<double>(image[i]), -1.0, 1.0) + 1.0) * 127.5);
        px[i] = static_cast<unsigned char>(v);
    }
    return px;
}

/// Writes channel 0 of a [C, H, W] image.
inline void write_png(const std::string& path, const Tensor<float>& image) {
    if (image.rank() != 3) throw ShapeError("write_png: expected [C, H, W]");
    const auto h = static_cast<png_uint_32>(image.dim(1)), w = static_cast<png_uint_32>(image.dim(2));
    auto px = to_gray8(image);
    FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw FormatError("cannot open '" + path + "' for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw FormatError("libpng failed writing '" + path + "'");
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, w, h, 8, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (png_uint_32 y = 0; y < h; ++y) png_write_row(png, px.data() + y * w);
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

}  // namespace mode::tools
