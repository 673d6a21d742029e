#pragma once

#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "dapose/common.hpp"
#include "dapose/tensor.hpp"

namespace dapose {
namespace img {

/// Images are (3, H, W) float tensors with values in [0, 1]; on disk they are
/// 8-bit RGB PNG.
using Image = Tensor<float>;

inline Image make_image(int64_t h, int64_t w) { return Image({3, h, w}); }

inline void clamp01(Image& im) {
    for (int64_t i = 0; i < im.numel(); ++i) im[i] = std::min(1.0f, std::max(0.0f, im[i]));
}

namespace detail {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

} // namespace detail

inline Image load_png(const std::string& path) {
    detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
    check_data(fp != nullptr, dapose::detail::cat("cannot open file: ", path));
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    check_data(png != nullptr, "libpng: read struct allocation failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw DataError("libpng: info struct allocation failed");
    }
    std::vector<png_byte> pixels;
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("libpng: failed to decode " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);

    const png_uint_32 w = png_get_image_width(png, info);
    const png_uint_32 h = png_get_image_height(png, info);
    const png_byte color = png_get_color_type(png, info);
    const png_byte depth = png_get_bit_depth(png, info);

    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(png);
    if (color & PNG_COLOR_MASK_ALPHA || png_get_valid(png, info, PNG_INFO_tRNS))
        png_set_strip_alpha(png);
    png_read_update_info(png, info);

    pixels.assign(static_cast<size_t>(h) * png_get_rowbytes(png, info), 0);
    rows.resize(h);
    for (png_uint_32 r = 0; r < h; ++r)
        rows[r] = pixels.data() + static_cast<size_t>(r) * png_get_rowbytes(png, info);
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);

    Image im({3, static_cast<int64_t>(h), static_cast<int64_t>(w)});
    const int64_t hw = static_cast<int64_t>(h) * static_cast<int64_t>(w);
    for (int64_t r = 0; r < static_cast<int64_t>(h); ++r)
        for (int64_t c = 0; c < static_cast<int64_t>(w); ++c) {
            const png_byte* px = rows[static_cast<size_t>(r)] + 3 * c;
            for (int64_t ch = 0; ch < 3; ++ch)
                im[ch * hw + r * static_cast<int64_t>(w) + c] =
                    static_cast<float>(px[ch]) / 255.0f;
        }
    return im;
}

inline void save_png(const Image& im, const std::string& path) {
    check_arg(im.rank() == 3 && im.dim(0) == 3, "save_png: (3,H,W) image expected");
    const int64_t h = im.dim(1), w = im.dim(2), hw = h * w;
    std::vector<png_byte> pixels(static_cast<size_t>(3 * hw));
    std::vector<png_bytep> rows(static_cast<size_t>(h));
    for (int64_t r = 0; r < h; ++r) {
        rows[static_cast<size_t>(r)] = pixels.data() + static_cast<size_t>(3 * r * w);
        for (int64_t c = 0; c < w; ++c)
            for (int64_t ch = 0; ch < 3; ++ch) {
                const float v = std::min(1.0f, std::max(0.0f, im[ch * hw + r * w + c]));
                pixels[static_cast<size_t>(3 * (r * w + c) + ch)] =
                    static_cast<png_byte>(std::lround(v * 255.0f));
            }
    }
    detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
    check_data(fp != nullptr, dapose::detail::cat("cannot open file for writing: ", path));
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    check_data(png != nullptr, "libpng: write struct allocation failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw DataError("libpng: info struct allocation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw DataError("libpng: failed to encode " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

inline Image resize_bilinear(const Image& im, int64_t oh, int64_t ow) {
    check_arg(oh > 0 && ow > 0, "resize: positive output size required");
    const int64_t h = im.dim(1), w = im.dim(2);
    Image out({3, oh, ow});
    const double sy = static_cast<double>(h) / static_cast<double>(oh);
    const double sx = static_cast<double>(w) / static_cast<double>(ow);
    for (int64_t ch = 0; ch < 3; ++ch)
        for (int64_t r = 0; r < oh; ++r)
            for (int64_t c = 0; c < ow; ++c) {
                // Cell-center mapping with clamp-to-edge sampling.
                const double yy = (static_cast<double>(r) + 0.5) * sy - 0.5;
                const double xx = (static_cast<double>(c) + 0.5) * sx - 0.5;
                const int64_t y0 = static_cast<int64_t>(std::floor(yy));
                const int64_t x0 = static_cast<int64_t>(std::floor(xx));
                const double fy = yy - static_cast<double>(y0);
                const double fx = xx - static_cast<double>(x0);
                auto tap = [&](int64_t r2, int64_t c2) {
                    r2 = std::min(h - 1, std::max<int64_t>(0, r2));
                    c2 = std::min(w - 1, std::max<int64_t>(0, c2));
                    return static_cast<double>(im.at(ch, r2, c2));
                };
                out.at(ch, r, c) = static_cast<float>(
                    (1 - fy) * ((1 - fx) * tap(y0, x0) + fx * tap(y0, x0 + 1)) +
                    fy * ((1 - fx) * tap(y0 + 1, x0) + fx * tap(y0 + 1, x0 + 1)));
            }
    return out;
}

inline void fill_rect(Image& im, int64_t x, int64_t y, int64_t bw, int64_t bh, float r, float g,
                      float b) {
    const int64_t h = im.dim(1), w = im.dim(2);
    const float rgb[3] = {r, g, b};
    for (int64_t yy = std::max<int64_t>(0, y); yy < std::min(h, y + bh); ++yy)
        for (int64_t xx = std::max<int64_t>(0, x); xx < std::min(w, x + bw); ++xx)
            for (int64_t ch = 0; ch < 3; ++ch) im.at(ch, yy, xx) = rgb[ch];
}

/// Filled disk with a half-pixel feathered edge.
inline void draw_disk(Image& im, double cx, double cy, double radius, float r, float g, float b) {
    const int64_t h = im.dim(1), w = im.dim(2);
    const float rgb[3] = {r, g, b};
    const int64_t y0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(cy - radius - 1)));
    const int64_t y1 = std::min(h - 1, static_cast<int64_t>(std::ceil(cy + radius + 1)));
    const int64_t x0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(cx - radius - 1)));
    const int64_t x1 = std::min(w - 1, static_cast<int64_t>(std::ceil(cx + radius + 1)));
    for (int64_t yy = y0; yy <= y1; ++yy)
        for (int64_t xx = x0; xx <= x1; ++xx) {
            const double dx = (static_cast<double>(xx) + 0.5) - cx;
            const double dy = (static_cast<double>(yy) + 0.5) - cy;
            const double d = std::sqrt(dx * dx + dy * dy);
            const double a = std::min(1.0, std::max(0.0, radius + 0.5 - d));
            if (a <= 0) continue;
            for (int64_t ch = 0; ch < 3; ++ch)
                im.at(ch, yy, xx) = static_cast<float>(a) * rgb[ch] +
                                    (1.0f - static_cast<float>(a)) * im.at(ch, yy, xx);
        }
}

/// Thick line segment (capsule) from (x0,y0) to (x1,y1).
inline void draw_capsule(Image& im, double ax, double ay, double bx, double by, double radius,
                         float r, float g, float b) {
    const int64_t h = im.dim(1), w = im.dim(2);
    const float rgb[3] = {r, g, b};
    const double lo_x = std::min(ax, bx) - radius - 1, hi_x = std::max(ax, bx) + radius + 1;
    const double lo_y = std::min(ay, by) - radius - 1, hi_y = std::max(ay, by) + radius + 1;
    const int64_t y0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(lo_y)));
    const int64_t y1 = std::min(h - 1, static_cast<int64_t>(std::ceil(hi_y)));
    const int64_t x0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(lo_x)));
    const int64_t x1 = std::min(w - 1, static_cast<int64_t>(std::ceil(hi_x)));
    const double ux = bx - ax, uy = by - ay;
    const double len2 = ux * ux + uy * uy;
    for (int64_t yy = y0; yy <= y1; ++yy)
        for (int64_t xx = x0; xx <= x1; ++xx) {
            const double px = (static_cast<double>(xx) + 0.5) - ax;
            const double py = (static_cast<double>(yy) + 0.5) - ay;
            double t = len2 > 0 ? (px * ux + py * uy) / len2 : 0.0;
            t = std::min(1.0, std::max(0.0, t));
            const double dx = px - t * ux, dy = py - t * uy;
            const double d = std::sqrt(dx * dx + dy * dy);
            const double a = std::min(1.0, std::max(0.0, radius + 0.5 - d));
            if (a <= 0) continue;
            for (int64_t ch = 0; ch < 3; ++ch)
                im.at(ch, yy, xx) = static_cast<float>(a) * rgb[ch] +
                                    (1.0f - static_cast<float>(a)) * im.at(ch, yy, xx);
        }
}

/// Separable Gaussian blur with clamp-to-edge borders; sigma in pixels.
inline Image gaussian_blur(const Image& im, double sigma) {
    if (sigma <= 0) return im;
    const int64_t h = im.dim(1), w = im.dim(2);
    const int64_t rad = std::max<int64_t>(1, static_cast<int64_t>(std::ceil(3.0 * sigma)));
    std::vector<double> k(static_cast<size_t>(2 * rad + 1));
    double ksum = 0;
    for (int64_t i = -rad; i <= rad; ++i) {
        const double v = std::exp(-0.5 * (static_cast<double>(i) / sigma) *
                                  (static_cast<double>(i) / sigma));
        k[static_cast<size_t>(i + rad)] = v;
        ksum += v;
    }
    for (auto& v : k) v /= ksum;

    Image tmp({3, h, w}), out({3, h, w});
    for (int64_t ch = 0; ch < 3; ++ch)
        for (int64_t r = 0; r < h; ++r)
            for (int64_t c = 0; c < w; ++c) {
                double acc = 0;
                for (int64_t i = -rad; i <= rad; ++i) {
                    const int64_t cc = std::min(w - 1, std::max<int64_t>(0, c + i));
                    acc += k[static_cast<size_t>(i + rad)] * im.at(ch, r, cc);
                }
                tmp.at(ch, r, c) = static_cast<float>(acc);
            }
    for (int64_t ch = 0; ch < 3; ++ch)
        for (int64_t r = 0; r < h; ++r)
            for (int64_t c = 0; c < w; ++c) {
                double acc = 0;
                for (int64_t i = -rad; i <= rad; ++i) {
                    const int64_t rr = std::min(h - 1, std::max<int64_t>(0, r + i));
                    acc += k[static_cast<size_t>(i + rad)] * tmp.at(ch, rr, c);
                }
                out.at(ch, r, c) = static_cast<float>(acc);
            }
    return out;
}

/// Peak signal-to-noise ratio in dB between two same-shaped images.
inline double psnr(const Image& a, const Image& b) {
    check_arg(a.same_shape(b), "psnr: shape mismatch");
    double mse = 0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        mse += d * d;
    }
    mse /= static_cast<double>(a.numel());
    if (mse <= 0) return 99.0;
    return 10.0 * std::log10(1.0 / mse);
}

} // namespace img
} // namespace dapose
