#pragma once

// 8-bit PNG codec for ImageBuffer (RGB) and SegMap (single-channel ids + JSON palette sidecar).

#include "segedit/error.hpp"
#include "segedit/image.hpp"

#include <nlohmann/json.hpp>
#include <png.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

namespace segedit {

namespace detail {

inline std::vector<uint8_t> read_bytes(std::filesystem::path const& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::io, "cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(std::filesystem::path const& path, std::span<uint8_t const> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::io, "cannot write " + path.string());
    out.write(reinterpret_cast<char const*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorKind::io, "short write to " + path.string());
}

struct DecodedPng {
    int height = 0;
    int width = 0;
    std::vector<uint8_t> pixels;
};

inline DecodedPng decode(std::span<uint8_t const> bytes, uint32_t format) {
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size()))
        throw Error(ErrorKind::io, std::string("png decode: ") + image.message);
    image.format = format;
    DecodedPng out;
    out.height = static_cast<int>(image.height);
    out.width = static_cast<int>(image.width);
    out.pixels.resize(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, out.pixels.data(), 0, nullptr)) {
        std::string msg = image.message;
        png_image_free(&image);
        throw Error(ErrorKind::io, "png decode: " + msg);
    }
    return out;
}

inline std::vector<uint8_t> encode(int height, int width, uint32_t format, std::vector<uint8_t> const& pixels) {
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(width);
    image.height = static_cast<png_uint_32>(height);
    image.format = format;
    png_alloc_size_t size = 0;
    if (!png_image_write_get_memory_size(image, size, 0, pixels.data(), 0, nullptr))
        throw Error(ErrorKind::io, std::string("png encode: ") + image.message);
    std::vector<uint8_t> out(size);
    if (!png_image_write_to_memory(&image, out.data(), &size, 0, pixels.data(), 0, nullptr))
        throw Error(ErrorKind::io, std::string("png encode: ") + image.message);
    out.resize(size);
    return out;
}

inline uint8_t quantize(float v) {
    return static_cast<uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

} // namespace detail

inline ImageBuffer decode_png(std::span<uint8_t const> bytes) {
    auto png = detail::decode(bytes, PNG_FORMAT_RGB);
    ImageBuffer img(png.height, png.width, 3);
    for (size_t i = 0; i < png.pixels.size(); ++i) img.data()[i] = png.pixels[i] / 255.0f;
    return img;
}

inline std::vector<uint8_t> encode_png(ImageBuffer const& image) {
    if (image.channels() != 3) throw Error(ErrorKind::shape, "PNG export expects 3-channel images");
    std::vector<uint8_t> px(image.size());
    for (size_t i = 0; i < px.size(); ++i) px[i] = detail::quantize(image.data()[i]);
    return detail::encode(image.height(), image.width(), PNG_FORMAT_RGB, px);
}

/// Rounds every channel to the nearest 8-bit level, matching a PNG save/load cycle.
inline ImageBuffer quantize_8bit(ImageBuffer image) {
    for (float& v : image.data()) v = detail::quantize(v) / 255.0f;
    return image;
}

inline ImageBuffer read_png(std::filesystem::path const& path) { return decode_png(detail::read_bytes(path)); }

inline void write_png(std::filesystem::path const& path, ImageBuffer const& image) {
    detail::write_bytes(path, encode_png(image));
}

inline std::vector<uint8_t> encode_mask_png(MaskMap const& mask) {
    std::vector<uint8_t> px(mask.data().size());
    for (size_t i = 0; i < px.size(); ++i) px[i] = mask.data()[i] ? 255 : 0;
    return detail::encode(mask.height(), mask.width(), PNG_FORMAT_GRAY, px);
}

inline MaskMap decode_mask_png(std::span<uint8_t const> bytes) {
    auto png = detail::decode(bytes, PNG_FORMAT_GRAY);
    MaskMap m(png.height, png.width);
    for (int y = 0; y < png.height; ++y)
        for (int x = 0; x < png.width; ++x) m.set(y, x, png.pixels[static_cast<size_t>(y) * png.width + x] >= 128);
    return m;
}

inline nlohmann::json palette_to_json(SegMap::Palette const& palette) {
    nlohmann::json j = nlohmann::json::object();
    for (auto const& [id, label] : palette) j[std::to_string(id)] = label;
    return j;
}

inline SegMap::Palette palette_from_json(nlohmann::json const& j) {
    SegMap::Palette palette;
    if (!j.is_object()) throw Error(ErrorKind::palette, "palette must be a JSON object");
    for (auto const& [key, value] : j.items()) {
        int id = 0;
        try {
            id = std::stoi(key);
        } catch (std::exception const&) {
            throw Error(ErrorKind::palette, "palette key is not an integer: " + key);
        }
        if (id <= 0 || id > 255) throw Error(ErrorKind::palette, "palette id out of range: " + key);
        palette[id] = value.get<std::string>();
    }
    return palette;
}

/// Class ids as single-channel 8-bit PNG; ids above 255 are rejected.
inline std::vector<uint8_t> encode_segmap_png(SegMap const& seg) {
    std::vector<uint8_t> px(seg.ids().size());
    for (size_t i = 0; i < px.size(); ++i) {
        int id = seg.ids()[i];
        if (id < 0 || id > 255) throw Error(ErrorKind::palette, "class id does not fit in 8 bits");
        px[i] = static_cast<uint8_t>(id);
    }
    return detail::encode(seg.height(), seg.width(), PNG_FORMAT_GRAY, px);
}

inline SegMap decode_segmap_png(std::span<uint8_t const> bytes, SegMap::Palette palette) {
    auto png = detail::decode(bytes, PNG_FORMAT_GRAY);
    SegMap seg(png.height, png.width, std::move(palette));
    for (size_t i = 0; i < png.pixels.size(); ++i) seg.ids()[i] = png.pixels[i];
    return seg;
}

inline std::filesystem::path palette_sidecar(std::filesystem::path const& png_path) {
    auto p = png_path;
    return p.replace_extension(".json");
}

inline void write_segmap(std::filesystem::path const& path, SegMap const& seg) {
    detail::write_bytes(path, encode_segmap_png(seg));
    std::ofstream(palette_sidecar(path)) << palette_to_json(seg.palette()).dump(2) << "\n";
}

/// Reads the id PNG and its palette sidecar; a missing sidecar yields an empty palette.
inline SegMap read_segmap(std::filesystem::path const& path) {
    SegMap::Palette palette;
    auto side = palette_sidecar(path);
    if (std::filesystem::exists(side)) {
        std::ifstream in(side);
        palette = palette_from_json(nlohmann::json::parse(in));
    }
    return decode_segmap_png(detail::read_bytes(path), std::move(palette));
}

} // namespace segedit
