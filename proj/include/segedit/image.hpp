#pragma once

#include "segedit/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace segedit {

/// H x W x C image with channel values in [0,1], stored row-major as (y, x, c).
class ImageBuffer {
  public:
    ImageBuffer() = default;

    ImageBuffer(int height, int width, int channels = 3, float fill = 0.0f)
        : height_(height), width_(width), channels_(channels) {
        if (height < 1 || width < 1 || channels < 1)
            throw Error(ErrorKind::parameter, "image dimensions must be positive");
        data_.assign(static_cast<size_t>(height) * width * channels, fill);
    }

    ImageBuffer(int height, int width, int channels, std::vector<float> data)
        : height_(height), width_(width), channels_(channels), data_(std::move(data)) {
        if (height < 1 || width < 1 || channels < 1)
            throw Error(ErrorKind::parameter, "image dimensions must be positive");
        if (data_.size() != static_cast<size_t>(height) * width * channels)
            throw Error(ErrorKind::shape, "image data length does not match dimensions");
    }

    int height() const noexcept { return height_; }
    int width() const noexcept { return width_; }
    int channels() const noexcept { return channels_; }
    bool empty() const noexcept { return data_.empty(); }
    size_t size() const noexcept { return data_.size(); }

    float& at(int y, int x, int c) { return data_[index(y, x, c)]; }
    float at(int y, int x, int c) const { return data_[index(y, x, c)]; }

    std::vector<float>& data() noexcept { return data_; }
    std::vector<float> const& data() const noexcept { return data_; }

    bool same_shape(ImageBuffer const& other) const noexcept {
        return height_ == other.height_ && width_ == other.width_ && channels_ == other.channels_;
    }

    /// True when every value is finite and inside [0,1].
    bool is_valid() const noexcept {
        return !data_.empty() && std::all_of(data_.begin(), data_.end(), [](float v) {
                   return std::isfinite(v) && v >= 0.0f && v <= 1.0f;
               });
    }

    friend bool operator==(ImageBuffer const&, ImageBuffer const&) = default;

  private:
    size_t index(int y, int x, int c) const noexcept {
        return (static_cast<size_t>(y) * width_ + x) * channels_ + c;
    }

    int height_ = 0;
    int width_ = 0;
    int channels_ = 0;
    std::vector<float> data_;
};

/// Binary H x W mask; values are 0 or 1.
class MaskMap {
  public:
    MaskMap() = default;
    MaskMap(int height, int width, uint8_t fill = 0) : height_(height), width_(width) {
        if (height < 1 || width < 1) throw Error(ErrorKind::parameter, "mask dimensions must be positive");
        data_.assign(static_cast<size_t>(height) * width, fill ? 1 : 0);
    }

    int height() const noexcept { return height_; }
    int width() const noexcept { return width_; }

    uint8_t get(int y, int x) const { return data_[static_cast<size_t>(y) * width_ + x]; }
    void set(int y, int x, bool v) { data_[static_cast<size_t>(y) * width_ + x] = v ? 1 : 0; }
    bool contains(int y, int x) const noexcept { return y >= 0 && x >= 0 && y < height_ && x < width_; }

    std::vector<uint8_t> const& data() const noexcept { return data_; }

    size_t area() const noexcept { return static_cast<size_t>(std::count(data_.begin(), data_.end(), 1)); }
    bool none() const noexcept { return area() == 0; }

    bool same_shape(MaskMap const& other) const noexcept {
        return height_ == other.height_ && width_ == other.width_;
    }

    friend bool operator==(MaskMap const&, MaskMap const&) = default;

  private:
    int height_ = 0;
    int width_ = 0;
    std::vector<uint8_t> data_;
};

/// Per-pixel class ids (0 = background) with a label for every nonzero id in use.
class SegMap {
  public:
    using Palette = std::map<int, std::string>;

    SegMap() = default;
    SegMap(int height, int width, Palette palette = {}) : height_(height), width_(width), palette_(std::move(palette)) {
        if (height < 1 || width < 1) throw Error(ErrorKind::parameter, "segmap dimensions must be positive");
        ids_.assign(static_cast<size_t>(height) * width, 0);
    }

    int height() const noexcept { return height_; }
    int width() const noexcept { return width_; }

    int get(int y, int x) const { return ids_[static_cast<size_t>(y) * width_ + x]; }
    void set(int y, int x, int id) { ids_[static_cast<size_t>(y) * width_ + x] = id; }

    std::vector<int32_t>& ids() noexcept { return ids_; }
    std::vector<int32_t> const& ids() const noexcept { return ids_; }
    Palette& palette() noexcept { return palette_; }
    Palette const& palette() const noexcept { return palette_; }

    /// Throws a palette error when a nonzero id in use has no label.
    void validate() const {
        for (int32_t id : ids_) {
            if (id < 0) throw Error(ErrorKind::palette, "negative class id " + std::to_string(id));
            if (id != 0 && !palette_.contains(id))
                throw Error(ErrorKind::palette, "class id " + std::to_string(id) + " missing from palette");
        }
    }

    MaskMap mask_of(int class_id) const {
        MaskMap m(height_, width_);
        for (int y = 0; y < height_; ++y)
            for (int x = 0; x < width_; ++x) m.set(y, x, get(y, x) == class_id);
        return m;
    }

    size_t count(int class_id) const noexcept {
        return static_cast<size_t>(std::count(ids_.begin(), ids_.end(), class_id));
    }

    /// First id whose label equals `label`, or 0.
    int id_for(std::string const& label) const {
        for (auto const& [id, name] : palette_)
            if (name == label) return id;
        return 0;
    }

    bool same_shape(ImageBuffer const& img) const noexcept {
        return height_ == img.height() && width_ == img.width();
    }

    friend bool operator==(SegMap const&, SegMap const&) = default;

  private:
    int height_ = 0;
    int width_ = 0;
    std::vector<int32_t> ids_;
    Palette palette_;
};

/// Half-open pixel rectangle [y0, y1) x [x0, x1).
struct BoundingBox {
    int y0 = 0;
    int x0 = 0;
    int y1 = 0;
    int x1 = 0;

    int height() const noexcept { return y1 - y0; }
    int width() const noexcept { return x1 - x0; }
    bool valid_for(int h, int w) const noexcept { return 0 <= y0 && y0 < y1 && y1 <= h && 0 <= x0 && x0 < x1 && x1 <= w; }

    friend bool operator==(BoundingBox const&, BoundingBox const&) = default;
};

struct RegionSplit {
    ImageBuffer relevant;
    ImageBuffer irrelevant;
    MaskMap mask;
};

namespace detail {

inline void require_same(ImageBuffer const& img, MaskMap const& mask, char const* what) {
    if (img.height() != mask.height() || img.width() != mask.width())
        throw Error(ErrorKind::shape, std::string(what) + ": image and mask dimensions differ");
}

} // namespace detail

inline RegionSplit split_by_mask(ImageBuffer const& image, MaskMap const& mask) {
    detail::require_same(image, mask, "split_by_mask");
    RegionSplit out{ImageBuffer(image.height(), image.width(), image.channels()),
                    ImageBuffer(image.height(), image.width(), image.channels()), mask};
    for (int y = 0; y < image.height(); ++y)
        for (int x = 0; x < image.width(); ++x) {
            auto& dst = mask.get(y, x) ? out.relevant : out.irrelevant;
            for (int c = 0; c < image.channels(); ++c) dst.at(y, x, c) = image.at(y, x, c);
        }
    return out;
}

inline ImageBuffer composite(ImageBuffer const& relevant, ImageBuffer const& irrelevant, MaskMap const& mask) {
    if (!relevant.same_shape(irrelevant)) throw Error(ErrorKind::shape, "composite: layer dimensions differ");
    detail::require_same(relevant, mask, "composite");
    ImageBuffer out = irrelevant;
    for (int y = 0; y < out.height(); ++y)
        for (int x = 0; x < out.width(); ++x)
            if (mask.get(y, x))
                for (int c = 0; c < out.channels(); ++c) out.at(y, x, c) = relevant.at(y, x, c);
    return out;
}

/// Tightest box around the mask's foreground, or nullopt-like empty box (y1 == 0) when empty.
inline BoundingBox mask_bbox(MaskMap const& mask) {
    int y0 = mask.height(), x0 = mask.width(), y1 = 0, x1 = 0;
    for (int y = 0; y < mask.height(); ++y)
        for (int x = 0; x < mask.width(); ++x)
            if (mask.get(y, x)) {
                y0 = std::min(y0, y);
                x0 = std::min(x0, x);
                y1 = std::max(y1, y + 1);
                x1 = std::max(x1, x + 1);
            }
    if (y1 == 0) return {};
    return {y0, x0, y1, x1};
}

inline ImageBuffer crop(ImageBuffer const& image, BoundingBox const& box) {
    if (!box.valid_for(image.height(), image.width())) throw Error(ErrorKind::shape, "crop box out of bounds");
    ImageBuffer out(box.height(), box.width(), image.channels());
    for (int y = 0; y < box.height(); ++y)
        for (int x = 0; x < box.width(); ++x)
            for (int c = 0; c < image.channels(); ++c) out.at(y, x, c) = image.at(box.y0 + y, box.x0 + x, c);
    return out;
}

inline MaskMap crop(MaskMap const& mask, BoundingBox const& box) {
    if (!box.valid_for(mask.height(), mask.width())) throw Error(ErrorKind::shape, "crop box out of bounds");
    MaskMap out(box.height(), box.width());
    for (int y = 0; y < box.height(); ++y)
        for (int x = 0; x < box.width(); ++x) out.set(y, x, mask.get(box.y0 + y, box.x0 + x));
    return out;
}

inline std::pair<ImageBuffer, BoundingBox> crop_to_mask_bbox(ImageBuffer const& image, MaskMap const& mask, int margin) {
    detail::require_same(image, mask, "crop_to_mask_bbox");
    if (margin < 0) throw Error(ErrorKind::parameter, "margin must be non-negative");
    BoundingBox box = mask_bbox(mask);
    if (box.y1 == 0) throw Error(ErrorKind::empty_region, "cannot crop to an empty mask");
    box.y0 = std::max(0, box.y0 - margin);
    box.x0 = std::max(0, box.x0 - margin);
    box.y1 = std::min(image.height(), box.y1 + margin);
    box.x1 = std::min(image.width(), box.x1 + margin);
    return {crop(image, box), box};
}

inline ImageBuffer paste_patch(ImageBuffer const& target, ImageBuffer const& patch, BoundingBox const& box) {
    if (!box.valid_for(target.height(), target.width())) throw Error(ErrorKind::shape, "paste box out of bounds");
    if (patch.height() != box.height() || patch.width() != box.width() || patch.channels() != target.channels())
        throw Error(ErrorKind::shape, "patch dimensions do not match box");
    ImageBuffer out = target;
    for (int y = 0; y < box.height(); ++y)
        for (int x = 0; x < box.width(); ++x)
            for (int c = 0; c < target.channels(); ++c) out.at(box.y0 + y, box.x0 + x, c) = patch.at(y, x, c);
    return out;
}

/// Centroid of the foreground in continuous coordinates (pixel (y,x) covers [y,y+1) x [x,x+1)).
inline std::pair<double, double> mask_centroid(MaskMap const& mask) {
    double sy = 0, sx = 0;
    size_t n = 0;
    for (int y = 0; y < mask.height(); ++y)
        for (int x = 0; x < mask.width(); ++x)
            if (mask.get(y, x)) {
                sy += y + 0.5;
                sx += x + 0.5;
                ++n;
            }
    if (n == 0) throw Error(ErrorKind::empty_region, "centroid of an empty mask");
    return {sy / n, sx / n};
}

/// Scales the foreground about its centroid by `factor` in both axes. Each output pixel
/// takes the value of the source pixel its center maps back onto, which is the same as
/// forward-mapping every source pixel's footprint; the result has no holes for any factor.
/// Pixels that land outside the frame are clipped.
inline MaskMap scale_mask_about_centroid(MaskMap const& mask, double factor) {
    if (!(factor > 0.0) || !std::isfinite(factor)) throw Error(ErrorKind::parameter, "scale factor must be positive");
    auto [cy, cx] = mask_centroid(mask);
    if (factor == 1.0) return mask;
    MaskMap out(mask.height(), mask.width());
    for (int y = 0; y < mask.height(); ++y) {
        double sy = cy + (y + 0.5 - cy) / factor;
        int iy = static_cast<int>(std::floor(sy));
        if (iy < 0 || iy >= mask.height()) continue;
        for (int x = 0; x < mask.width(); ++x) {
            double sx = cx + (x + 0.5 - cx) / factor;
            int ix = static_cast<int>(std::floor(sx));
            if (ix < 0 || ix >= mask.width()) continue;
            if (mask.get(iy, ix)) out.set(y, x, true);
        }
    }
    return out;
}

/// Pixels within Chebyshev distance band_width-1 of the mask boundary. Boundary pixels are
/// foreground pixels with a background 4-neighbor and background pixels with a foreground
/// 4-neighbor; outside the frame counts as background.
inline MaskMap extract_outline(MaskMap const& mask, int band_width) {
    if (band_width < 1) throw Error(ErrorKind::parameter, "band width must be at least 1");
    int const h = mask.height(), w = mask.width();
    MaskMap boundary(h, w);
    auto value = [&](int y, int x) -> int { return mask.contains(y, x) ? mask.get(y, x) : 0; };
    constexpr int dy[4] = {-1, 1, 0, 0};
    constexpr int dx[4] = {0, 0, -1, 1};
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            int v = mask.get(y, x);
            for (int k = 0; k < 4; ++k) {
                int ny = y + dy[k], nx = x + dx[k];
                // Background outside the frame only matters for foreground pixels.
                if (!mask.contains(ny, nx) && v == 0) continue;
                if (value(ny, nx) != v) {
                    boundary.set(y, x, true);
                    break;
                }
            }
        }
    if (band_width == 1) return boundary;
    int const r = band_width - 1;
    // Separable Chebyshev dilation: rows, then columns.
    MaskMap rows(h, w), out(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            bool on = false;
            for (int k = std::max(0, x - r); k <= std::min(w - 1, x + r) && !on; ++k) on = boundary.get(y, k);
            rows.set(y, x, on);
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            bool on = false;
            for (int k = std::max(0, y - r); k <= std::min(h - 1, y + r) && !on; ++k) on = rows.get(k, x);
            out.set(y, x, on);
        }
    return out;
}

enum class ResizeMethod { nearest, bilinear };

inline ImageBuffer resize_image(ImageBuffer const& image, int new_h, int new_w, ResizeMethod method) {
    if (new_h < 1 || new_w < 1) throw Error(ErrorKind::parameter, "resize target must be positive");
    if (new_h == image.height() && new_w == image.width()) return image;
    ImageBuffer out(new_h, new_w, image.channels());
    double const sy = static_cast<double>(image.height()) / new_h;
    double const sx = static_cast<double>(image.width()) / new_w;
    if (method == ResizeMethod::nearest) {
        for (int y = 0; y < new_h; ++y) {
            int iy = std::min(image.height() - 1, static_cast<int>(std::floor((y + 0.5) * sy)));
            for (int x = 0; x < new_w; ++x) {
                int ix = std::min(image.width() - 1, static_cast<int>(std::floor((x + 0.5) * sx)));
                for (int c = 0; c < image.channels(); ++c) out.at(y, x, c) = image.at(iy, ix, c);
            }
        }
        return out;
    }
    for (int y = 0; y < new_h; ++y) {
        double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, image.height() - 1.0);
        int y0 = static_cast<int>(std::floor(fy));
        int y1 = std::min(y0 + 1, image.height() - 1);
        double wy = fy - y0;
        for (int x = 0; x < new_w; ++x) {
            double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, image.width() - 1.0);
            int x0 = static_cast<int>(std::floor(fx));
            int x1 = std::min(x0 + 1, image.width() - 1);
            double wx = fx - x0;
            for (int c = 0; c < image.channels(); ++c) {
                double top = image.at(y0, x0, c) * (1 - wx) + image.at(y0, x1, c) * wx;
                double bot = image.at(y1, x0, c) * (1 - wx) + image.at(y1, x1, c) * wx;
                out.at(y, x, c) = static_cast<float>(std::clamp(top * (1 - wy) + bot * wy, 0.0, 1.0));
            }
        }
    }
    return out;
}

inline MaskMap resize_mask(MaskMap const& mask, int new_h, int new_w) {
    if (new_h < 1 || new_w < 1) throw Error(ErrorKind::parameter, "resize target must be positive");
    MaskMap out(new_h, new_w);
    double const sy = static_cast<double>(mask.height()) / new_h;
    double const sx = static_cast<double>(mask.width()) / new_w;
    for (int y = 0; y < new_h; ++y) {
        int iy = std::min(mask.height() - 1, static_cast<int>(std::floor((y + 0.5) * sy)));
        for (int x = 0; x < new_w; ++x) {
            int ix = std::min(mask.width() - 1, static_cast<int>(std::floor((x + 0.5) * sx)));
            out.set(y, x, mask.get(iy, ix));
        }
    }
    return out;
}

inline MaskMap mask_union(MaskMap const& a, MaskMap const& b) {
    if (!a.same_shape(b)) throw Error(ErrorKind::shape, "mask_union: dimensions differ");
    MaskMap out(a.height(), a.width());
    for (int y = 0; y < a.height(); ++y)
        for (int x = 0; x < a.width(); ++x) out.set(y, x, a.get(y, x) || b.get(y, x));
    return out;
}

inline MaskMap mask_complement(MaskMap const& a) {
    MaskMap out(a.height(), a.width());
    for (int y = 0; y < a.height(); ++y)
        for (int x = 0; x < a.width(); ++x) out.set(y, x, !a.get(y, x));
    return out;
}

} // namespace segedit
