#pragma once

// Pre-processing: segmentation + detection -> target selection -> text-relevant mask ->
// region split -> super-resolved canvas of the target object.

#include "segedit/backends.hpp"
#include "segedit/error.hpp"
#include "segedit/image.hpp"
#include "segedit/instruction.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

namespace segedit {

/// The target object cropped, upscaled and centered on a working_size x working_size canvas.
struct CanvasPatch {
    ImageBuffer image;
    BoundingBox source_box;   // crop region in the source image
    double canvas_scale = 1;  // canvas pixels per source pixel
    MaskMap mask;             // object mask at canvas resolution
    int offset_y = 0;         // where the scaled crop starts on the canvas
    int offset_x = 0;
    int placed_h = 0;         // scaled crop size on the canvas
    int placed_w = 0;
};

inline constexpr int canvas_margin = 8;
inline constexpr std::array<int, 4> sr_scales{8, 4, 2, 1};

/// Class-id match restricted to the boxes of every detection labeled `target_label`.
inline MaskMap build_text_relevant_mask(SegMap const& seg, std::vector<DetectedObject> const& detections,
                                        std::string const& target_label) {
    MaskMap mask(seg.height(), seg.width());
    bool matched = false;
    for (auto const& d : detections) {
        if (d.label != target_label) continue;
        matched = true;
        BoundingBox b = d.box;
        b.y0 = std::max(0, b.y0);
        b.x0 = std::max(0, b.x0);
        b.y1 = std::min(seg.height(), b.y1);
        b.x1 = std::min(seg.width(), b.x1);
        for (int y = b.y0; y < b.y1; ++y)
            for (int x = b.x0; x < b.x1; ++x)
                if (seg.get(y, x) == d.class_id) mask.set(y, x, true);
    }
    if (!matched) throw Error(ErrorKind::no_target, "no detection labeled '" + target_label + "'");
    if (mask.none()) throw Error(ErrorKind::empty_region, "target '" + target_label + "' has no segmented pixels");
    return mask;
}

/// Largest scale in {1,2,4,8} keeping the longer side within working_size, or the
/// fractional scale that fits when even scale 1 is too large.
inline double select_canvas_scale(int longer_side, int working_size) {
    for (int s : sr_scales)
        if (longer_side * s <= working_size) return s;
    return static_cast<double>(working_size) / longer_side;
}

inline CanvasPatch prepare_canvas(ImageBuffer const& image, MaskMap const& mask, SRBackend const& sr, int working_size) {
    if (working_size < 4) throw Error(ErrorKind::parameter, "working size too small");
    auto [crop_img, box] = crop_to_mask_bbox(image, mask, canvas_margin);
    auto crop_mask = crop(mask, box);
    int longer = std::max(box.height(), box.width());

    CanvasPatch out;
    out.source_box = box;
    out.canvas_scale = select_canvas_scale(longer, working_size);
    ImageBuffer scaled;
    MaskMap scaled_mask;
    if (out.canvas_scale >= 1.0) {
        int s = static_cast<int>(out.canvas_scale);
        scaled = s == 1 ? crop_img : sr.upscale(crop_img, s);
        if (scaled.height() != box.height() * s || scaled.width() != box.width() * s)
            throw Error(ErrorKind::backend, "SR backend returned wrong dimensions");
        scaled_mask = resize_mask(crop_mask, box.height() * s, box.width() * s);
    } else {
        int h = std::clamp(static_cast<int>(std::floor(box.height() * out.canvas_scale)), 1, working_size);
        int w = std::clamp(static_cast<int>(std::floor(box.width() * out.canvas_scale)), 1, working_size);
        scaled = anchored_resize(crop_img, out.canvas_scale, h, w);
        scaled_mask = resize_mask(crop_mask, h, w);
    }
    out.placed_h = scaled.height();
    out.placed_w = scaled.width();
    out.offset_y = (working_size - out.placed_h) / 2;
    out.offset_x = (working_size - out.placed_w) / 2;
    out.image = ImageBuffer(working_size, working_size, image.channels());
    out.mask = MaskMap(working_size, working_size);
    for (int y = 0; y < out.placed_h; ++y)
        for (int x = 0; x < out.placed_w; ++x) {
            for (int c = 0; c < image.channels(); ++c) out.image.at(out.offset_y + y, out.offset_x + x, c) = scaled.at(y, x, c);
            out.mask.set(out.offset_y + y, out.offset_x + x, scaled_mask.get(y, x));
        }
    return out;
}

namespace detail {

inline float sample_bilinear(ImageBuffer const& img, double fy, double fx, int c) {
    fy = std::clamp(fy, 0.0, img.height() - 1.0);
    fx = std::clamp(fx, 0.0, img.width() - 1.0);
    int y0 = static_cast<int>(std::floor(fy)), x0 = static_cast<int>(std::floor(fx));
    int y1 = std::min(y0 + 1, img.height() - 1), x1 = std::min(x0 + 1, img.width() - 1);
    double wy = fy - y0, wx = fx - x0;
    double top = img.at(y0, x0, c) * (1 - wx) + img.at(y0, x1, c) * wx;
    double bot = img.at(y1, x0, c) * (1 - wx) + img.at(y1, x1, c) * wx;
    return static_cast<float>(top * (1 - wy) + bot * wy);
}

} // namespace detail

/// Maps canvas content back into an image of the source size. `base` supplies pixels the
/// canvas does not cover. With factor != 1 the content is also scaled about (center_y,
/// center_x), given in continuous source coordinates. For factor 1 and an integer canvas
/// scale every source pixel reads exactly one canvas pixel.
inline ImageBuffer restore_from_canvas(ImageBuffer const& canvas_image, CanvasPatch const& patch, ImageBuffer const& base,
                                       double factor = 1.0, double center_y = 0.0, double center_x = 0.0) {
    if (!(factor > 0.0)) throw Error(ErrorKind::parameter, "factor must be positive");
    if (canvas_image.height() != patch.image.height() || canvas_image.width() != patch.image.width())
        throw Error(ErrorKind::shape, "canvas image does not match the patch");
    ImageBuffer out = base;
    double const s = patch.canvas_scale;
    bool exact = factor == 1.0 && s >= 1.0 && s == std::floor(s);
    // Index-space centroid (pixel i has index i; continuous coordinate i + 0.5).
    double cy = center_y - 0.5, cx = center_x - 0.5;
    for (int y = 0; y < out.height(); ++y)
        for (int x = 0; x < out.width(); ++x) {
            double ty = factor == 1.0 ? y : cy + (y - cy) / factor;
            double tx = factor == 1.0 ? x : cx + (x - cx) / factor;
            double ky = (ty - patch.source_box.y0) * s, kx = (tx - patch.source_box.x0) * s;
            if (ky < -0.5 || kx < -0.5 || ky > patch.placed_h - 0.5 || kx > patch.placed_w - 0.5) continue;
            for (int c = 0; c < out.channels(); ++c) {
                if (exact)
                    out.at(y, x, c) = canvas_image.at(patch.offset_y + static_cast<int>(ky), patch.offset_x + static_cast<int>(kx), c);
                else
                    out.at(y, x, c) = std::clamp(detail::sample_bilinear(canvas_image, patch.offset_y + ky, patch.offset_x + kx, c), 0.0f, 1.0f);
            }
        }
    return out;
}

struct PreprocResult {
    RegionSplit split;
    CanvasPatch canvas;
    SegMap seg;
    std::string target;
    std::vector<DetectedObject> detections;
    TargetSelection selection;
};

struct PreprocBackends {
    SegmentationBackend const& segmentation;
    DetectionBackend const& detection;
    SRBackend const& sr;
};

/// Runs selection -> mask -> split -> canvas on an already segmented image.
inline PreprocResult preprocess_with_seg(ImageBuffer const& image, ParsedInstruction const& instruction, SegMap seg,
                                         std::vector<DetectedObject> detections, SRBackend const& sr,
                                         EmbeddingTable const& table, int working_size) {
    PreprocResult out;
    out.seg = std::move(seg);
    out.detections = std::move(detections);
    std::vector<std::string> labels;
    for (auto const& d : out.detections)
        if (std::find(labels.begin(), labels.end(), d.label) == labels.end()) labels.push_back(d.label);
    out.selection = with_stage("selection", [&] { return select_target_class(labels, instruction, table); });
    out.target = out.selection.label;
    auto mask = with_stage("mask", [&] { return build_text_relevant_mask(out.seg, out.detections, out.target); });
    out.split = split_by_mask(image, mask);
    out.canvas = with_stage("super-resolution", [&] { return prepare_canvas(image, mask, sr, working_size); });
    return out;
}

inline PreprocResult run_preprocessing(ImageBuffer const& image, ParsedInstruction const& instruction,
                                       PreprocBackends const& backends, EmbeddingTable const& table, int working_size = 128) {
    if (!image.is_valid()) throw Error(ErrorKind::parameter, "input image is empty or out of range", "input");
    auto seg = with_stage("segmentation", [&] {
        auto s = backends.segmentation.segment(image);
        if (!s.same_shape(image)) throw Error(ErrorKind::backend, "segmentation has wrong dimensions");
        return s;
    });
    auto detections = with_stage("detection", [&] {
        auto d = backends.detection.detect(image);
        if (d.empty()) throw Error(ErrorKind::no_target, "no objects detected");
        return d;
    });
    return preprocess_with_seg(image, instruction, std::move(seg), std::move(detections), backends.sr, table, working_size);
}

/// Detections implied by a segmentation map: one per class id present, boxed around all its pixels.
inline std::vector<DetectedObject> detections_from_seg(SegMap const& seg) {
    std::vector<DetectedObject> out;
    for (auto const& [id, label] : seg.palette()) {
        auto box = mask_bbox(seg.mask_of(id));
        if (box.y1 == 0) continue;
        out.push_back({label, 1.0, box, id});
    }
    return out;
}

} // namespace segedit
