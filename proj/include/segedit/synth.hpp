#pragma once

// Synthetic shapes-with-captions scenes: flat-colored circles, squares and triangles on
// near-gray textured backgrounds, with exact segmentation maps.

#include "segedit/error.hpp"
#include "segedit/image.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace segedit::synth {

enum class Shape { circle = 1, square = 2, triangle = 3 };

inline constexpr std::array<Shape, 3> all_shapes{Shape::circle, Shape::square, Shape::triangle};

inline std::string_view shape_name(Shape s) {
    switch (s) {
    case Shape::circle: return "circle";
    case Shape::square: return "square";
    case Shape::triangle: return "triangle";
    }
    return "circle";
}

inline int class_id(Shape s) { return static_cast<int>(s); }

inline SegMap::Palette shape_palette() {
    return {{1, "circle"}, {2, "square"}, {3, "triangle"}};
}

struct NamedColor {
    std::string_view name;
    std::array<uint8_t, 3> rgb;
};

// Saturated colors only; background texels stay within a few levels of gray, so an
// exact 8-bit match against this table separates objects from background.
inline constexpr std::array<NamedColor, 8> palette_colors{{
    {"red", {220, 30, 30}},
    {"green", {30, 170, 50}},
    {"blue", {30, 60, 220}},
    {"yellow", {235, 210, 30}},
    {"purple", {140, 50, 170}},
    {"orange", {240, 130, 20}},
    {"cyan", {30, 200, 210}},
    {"pink", {240, 110, 180}},
}};

inline int color_index(std::string_view name) {
    for (size_t i = 0; i < palette_colors.size(); ++i)
        if (palette_colors[i].name == name) return static_cast<int>(i);
    return -1;
}

enum class Texture { stripes = 0, checker = 1, gradient = 2, noise = 3 };

struct SceneObject {
    Shape shape = Shape::circle;
    int color = 0; // index into palette_colors
    BoundingBox box;
};

struct SynthSample {
    ImageBuffer image;
    SegMap seg;
    std::string caption;
    std::string target_label;
    std::vector<SceneObject> objects; // objects[0] is the caption's target
    Texture texture = Texture::stripes;
};

/// Whether pixel (y, x) lies inside `shape` drawn in `box`; tested at pixel centers.
inline bool shape_covers(Shape shape, BoundingBox const& box, int y, int x) {
    if (y < box.y0 || y >= box.y1 || x < box.x0 || x >= box.x1) return false;
    double py = y + 0.5 - box.y0, px = x + 0.5 - box.x0;
    double h = box.height(), w = box.width();
    switch (shape) {
    case Shape::square: return true;
    case Shape::circle: {
        double r = w / 2.0;
        return (py - r) * (py - r) + (px - r) * (px - r) <= r * r;
    }
    case Shape::triangle: {
        // Apex at top center, base along the bottom edge.
        double half = (py / h) * (w / 2.0);
        return std::abs(px - w / 2.0) <= half;
    }
    }
    return false;
}

inline MaskMap shape_raster(Shape shape, BoundingBox const& box, int height, int width) {
    MaskMap m(height, width);
    for (int y = std::max(0, box.y0); y < std::min(height, box.y1); ++y)
        for (int x = std::max(0, box.x0); x < std::min(width, box.x1); ++x) m.set(y, x, shape_covers(shape, box, y, x));
    return m;
}

inline float level(int v) { return static_cast<float>(v) / 255.0f; }

inline ImageBuffer render_background(Texture texture, int size, std::mt19937_64& rng) {
    std::uniform_int_distribution<int> base_d(80, 170), tint_d(-8, 8), period_d(4, 10);
    int base = base_d(rng);
    std::array<int, 3> tint{tint_d(rng), tint_d(rng), tint_d(rng)};
    int period = period_d(rng);
    ImageBuffer img(size, size, 3);
    std::uniform_int_distribution<int> noise_d(-10, 10);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            int g = base;
            switch (texture) {
            case Texture::stripes: g += ((x / period) % 2) ? 14 : -14; break;
            case Texture::checker: g += (((x / period) + (y / period)) % 2) ? 12 : -12; break;
            case Texture::gradient: g += (y * 40) / size - 20; break;
            case Texture::noise: g += noise_d(rng); break;
            }
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = level(std::clamp(g + tint[c], 0, 255));
        }
    return img;
}

inline void paint(ImageBuffer& img, SegMap& seg, SceneObject const& obj) {
    auto const& rgb = palette_colors[obj.color].rgb;
    for (int y = obj.box.y0; y < obj.box.y1; ++y)
        for (int x = obj.box.x0; x < obj.box.x1; ++x)
            if (shape_covers(obj.shape, obj.box, y, x)) {
                for (int c = 0; c < 3; ++c) img.at(y, x, c) = level(rgb[c]);
                seg.set(y, x, class_id(obj.shape));
            }
}

inline std::string caption_for(SceneObject const& obj) {
    return "the " + std::string(shape_name(obj.shape)) + " is " + std::string(palette_colors[obj.color].name);
}

/// Renders one scene of 1-3 shapes of distinct types. Objects keep a 2-px gap between boxes.
inline SynthSample render_scene(std::mt19937_64& rng, int size) {
    if (size < 24) throw Error(ErrorKind::parameter, "synthetic scenes need size >= 24");
    SynthSample s;
    std::uniform_int_distribution<int> tex_d(0, 3), count_d(1, 3), color_d(0, 7);
    s.texture = static_cast<Texture>(tex_d(rng));
    s.image = render_background(s.texture, size, rng);
    s.seg = SegMap(size, size, shape_palette());

    std::array<Shape, 3> shapes = all_shapes;
    std::shuffle(shapes.begin(), shapes.end(), rng);
    int count = count_d(rng);
    std::uniform_int_distribution<int> extent_d(std::max(8, size / 5), std::max(9, size * 2 / 5));
    for (int i = 0; i < count; ++i) {
        for (int attempt = 0; attempt < 50; ++attempt) {
            int e = extent_d(rng);
            std::uniform_int_distribution<int> pos_d(1, size - e - 1);
            BoundingBox box{pos_d(rng), pos_d(rng), 0, 0};
            box.y1 = box.y0 + e;
            box.x1 = box.x0 + e;
            bool clear = true;
            for (auto const& o : s.objects)
                if (box.y0 < o.box.y1 + 2 && o.box.y0 < box.y1 + 2 && box.x0 < o.box.x1 + 2 && o.box.x0 < box.x1 + 2)
                    clear = false;
            if (!clear) continue;
            s.objects.push_back({shapes[i], color_d(rng), box});
            break;
        }
    }
    if (s.objects.empty()) throw Error(ErrorKind::parameter, "could not place any object");
    for (auto const& o : s.objects) paint(s.image, s.seg, o);
    s.caption = caption_for(s.objects.front());
    s.target_label = std::string(shape_name(s.objects.front().shape));
    return s;
}

/// Deterministic per seed. Sample i uses its own stream so prefixes of the dataset agree.
inline std::vector<SynthSample> make_synthetic_dataset(int n, uint64_t seed, int size) {
    if (n < 1) throw Error(ErrorKind::parameter, "dataset size must be at least 1");
    std::vector<SynthSample> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) {
        std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ull + static_cast<uint64_t>(i));
        out.push_back(render_scene(rng, size));
    }
    return out;
}

/// Recolors every pixel of `mask` to palette color `color`.
inline ImageBuffer recolor(ImageBuffer img, MaskMap const& mask, int color) {
    auto const& rgb = palette_colors[color].rgb;
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x)
            if (mask.get(y, x))
                for (int c = 0; c < 3; ++c) img.at(y, x, c) = level(rgb[c]);
    return img;
}

} // namespace segedit::synth
