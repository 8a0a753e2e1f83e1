#pragma once

// 8-bit grayscale PNG read/write via libpng. Pixel values map to [0,1].

#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "radsynth/errors.hpp"
#include "radsynth/tensor.hpp"

namespace radsynth {

inline void write_png_gray(const std::string& path, const Tensor& img) {
    if (img.ndim() != 2) throw IoError("write_png_gray: expected 2-D tensor for " + path);
    const int h = img.dim(0), w = img.dim(1);
    std::unique_ptr<std::FILE, int (*)(std::FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
    if (!fp) throw IoError("cannot open for write: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("png write failure: " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, (png_uint_32)w, (png_uint_32)h, 8, PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_byte> row((size_t)w);
    for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
            double v = img.at({i, j});
            v = v < 0 ? 0 : (v > 1 ? 1 : v);
            row[(size_t)j] = (png_byte)std::lround(v * 255.0);
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

inline Tensor read_png_gray(const std::string& path) {
    std::unique_ptr<std::FILE, int (*)(std::FILE*)> fp(std::fopen(path.c_str(), "rb"), &std::fclose);
    if (!fp) throw IoError("cannot open image: " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("png read failure: " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    // normalize any input to 8-bit gray
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    if (png_get_color_type(png, info) & PNG_COLOR_MASK_COLOR) png_set_rgb_to_gray(png, 1, -1, -1);
    if (png_get_color_type(png, info) == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
    png_read_update_info(png, info);
    const int h = (int)png_get_image_height(png, info);
    const int w = (int)png_get_image_width(png, info);
    Tensor img({h, w});
    std::vector<png_byte> row((size_t)png_get_rowbytes(png, info));
    for (int i = 0; i < h; ++i) {
        png_read_row(png, row.data(), nullptr);
        for (int j = 0; j < w; ++j) img.at({i, j}) = row[(size_t)j] / 255.0;
    }
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

} // namespace radsynth
