#ifndef CLICKSEG_IMAGE_IO_HPP
#define CLICKSEG_IMAGE_IO_HPP

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "clickseg/error.hpp"
#include "clickseg/mask.hpp"
#include "clickseg/tensor.hpp"

namespace clickseg {

/// 8-bit interleaved pixels, 1 (gray) or 3 (RGB) channels.
struct RawImage {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t channels = 0;
    std::vector<std::uint8_t> pixels;
};

inline std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot create " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + path);
}

/// Header-only size probe; returns false for anything that is not a readable PNG.
inline bool png_dimensions(std::span<const std::uint8_t> bytes, std::size_t& width, std::size_t& height) {
    png_image img;
    std::memset(&img, 0, sizeof img);
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) return false;
    width = img.width;
    height = img.height;
    png_image_free(&img);
    return true;
}

/// Decodes to RGB (channels = 3) or gray (channels = 1). Alpha is composited onto black.
/// With `require_gray`, color inputs are rejected instead of converted.
inline RawImage decode_png(std::span<const std::uint8_t> bytes, std::size_t channels, bool require_gray = false) {
    if (channels != 1 && channels != 3) throw DomainError("decode_png: channels must be 1 or 3");
    png_image img;
    std::memset(&img, 0, sizeof img);
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) {
        throw IoError(std::string("decode_png: ") + img.message);
    }
    if (require_gray && (img.format & PNG_FORMAT_FLAG_COLOR)) {
        png_image_free(&img);
        throw IoError("decode_png: expected a single-channel image");
    }
    img.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    RawImage out{img.width, img.height, channels, std::vector<std::uint8_t>(PNG_IMAGE_SIZE(img))};
    if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
        const std::string msg = img.message;
        png_image_free(&img);
        throw IoError("decode_png: " + msg);
    }
    return out;
}

inline std::vector<std::uint8_t> encode_png(const RawImage& raw) {
    if (raw.channels != 1 && raw.channels != 3) throw DomainError("encode_png: channels must be 1 or 3");
    if (raw.pixels.size() != raw.width * raw.height * raw.channels) throw ShapeError("encode_png: pixel count");
    png_image img;
    std::memset(&img, 0, sizeof img);
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(raw.width);
    img.height = static_cast<png_uint_32>(raw.height);
    img.format = raw.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&img, nullptr, &size, 0, raw.pixels.data(), 0, nullptr)) {
        throw IoError(std::string("encode_png: ") + img.message);
    }
    std::vector<std::uint8_t> out(size);
    if (!png_image_write_to_memory(&img, out.data(), &size, 0, raw.pixels.data(), 0, nullptr)) {
        throw IoError(std::string("encode_png: ") + img.message);
    }
    out.resize(size);
    return out;
}

inline std::uint8_t to_byte(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// RGB pixels to a [3,H,W] tensor in [0,1].
inline Tensor image_tensor(const RawImage& raw) {
    if (raw.channels != 3) throw DomainError("image_tensor: expected RGB");
    const std::size_t n = raw.width * raw.height;
    std::vector<double> v(3 * n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < 3; ++c) v[c * n + i] = raw.pixels[i * 3 + c] / 255.0;
    return Tensor({3, raw.height, raw.width}, std::move(v));
}

inline RawImage image_raw(const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("image_raw: expected [3,H,W]");
    const std::size_t h = image.dim(1), w = image.dim(2), n = h * w;
    RawImage raw{w, h, 3, std::vector<std::uint8_t>(3 * n)};
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < 3; ++c) raw.pixels[i * 3 + c] = to_byte(image[c * n + i]);
    return raw;
}

/// Gray pixels to a mask: values >= 128 are foreground.
inline Mask mask_from_gray(const RawImage& raw) {
    if (raw.channels != 1) throw DomainError("mask_from_gray: expected gray");
    Mask m(raw.height, raw.width);
    for (std::size_t i = 0; i < raw.pixels.size(); ++i) m.set(i / raw.width, i % raw.width, raw.pixels[i] >= 128);
    return m;
}

inline RawImage mask_raw(const Mask& mask) {
    RawImage raw{mask.width(), mask.height(), 1, std::vector<std::uint8_t>(mask.size())};
    for (std::size_t i = 0; i < mask.size(); ++i) raw.pixels[i] = mask.bits()[i] ? 255 : 0;
    return raw;
}

/// A single-channel map with values in [0,1] (any tensor whose last two dims are H, W).
inline RawImage gray_raw(const Tensor& values, std::size_t height, std::size_t width) {
    if (values.numel() != height * width) throw ShapeError("gray_raw: value count does not match size");
    RawImage raw{width, height, 1, std::vector<std::uint8_t>(height * width)};
    for (std::size_t i = 0; i < raw.pixels.size(); ++i) raw.pixels[i] = to_byte(values[i]);
    return raw;
}

inline Tensor load_image(const std::string& path) { return image_tensor(decode_png(read_file(path), 3)); }

inline Mask load_mask(const std::string& path) { return mask_from_gray(decode_png(read_file(path), 1, true)); }

inline void save_image(const Tensor& image, const std::string& path) { write_file(path, encode_png(image_raw(image))); }

inline void save_mask(const Mask& mask, const std::string& path) { write_file(path, encode_png(mask_raw(mask))); }

} // namespace clickseg

#endif // CLICKSEG_IMAGE_IO_HPP
